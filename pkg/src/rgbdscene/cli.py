"""Command-line front end: infer, evaluate, bench, plus weight/data utilities."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import formats, weights as wio
from .config import Variant, reference_config, tiny_config
from .errors import ConfigurationError, ContainerError
from .metrics import Evaluator
from .model import Model, PostprocessSettings
from .panoptic import (
    DEFAULT_MIN_INSTANCE_PIXELS,
    DEFAULT_NMS_KERNEL,
    DEFAULT_THRESHOLD,
    DEFAULT_TOP_K,
    ThingStuffSpec,
)
from .tensor import set_num_threads

log = logging.getLogger("rgbdscene")

EXIT_INPUT = 2
EXIT_WEIGHTS = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _default_threads() -> int:
    env = os.environ.get("EMSF_THREADS")
    if env and env.isdigit() and int(env) > 0:
        return int(env)
    return os.cpu_count() or 1


def _load_model(path: str, variant: str | None = None) -> Model:
    try:
        config, store = wio.load(path)
    except (ContainerError, ConfigurationError) as exc:
        raise CliError(f"weight validation failed: {type(exc).__name__}: {exc}", EXIT_WEIGHTS)
    if variant is not None and Variant(variant) is not Variant(config.encoder.variant):
        raise CliError(f"--variant {variant} does not match weights "
                       f"({Variant(config.encoder.variant).value})", EXIT_WEIGHTS)
    return Model(config, store)


def _settings(args) -> PostprocessSettings:
    return PostprocessSettings(args.center_threshold, args.nms_kernel, args.top_k,
                               args.min_instance_pixels)


def _read_split(path: str) -> list[str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read split manifest: {exc}")
    names = [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]
    if not names:
        raise CliError(f"split manifest {path} lists no samples")
    return names


def _read_inputs(rgb_path, depth_path, needs_depth: bool):
    rgb = formats.read_rgb(rgb_path)
    depth = None
    if depth_path is not None:
        depth = formats.read_depth(depth_path)
        if depth.shape != rgb.shape[:2]:
            raise CliError(f"depth {depth.shape[::-1]} and rgb {rgb.shape[1::-1]} sizes differ")
    elif needs_depth:
        raise CliError("this variant requires --depth")
    return rgb, depth


def _run_one(model: Model, rgb, depth, settings, out_dir, gt_semantic=None):
    pred = model.predict(rgb, depth, settings, gt_semantic)
    formats.write_prediction(out_dir, pred.semantic, pred.panoptic, pred.scene,
                             pred.outputs.scene_logits[0])
    return pred


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    set_num_threads(args.threads)
    model = _load_model(args.weights, args.variant)
    settings = _settings(args)
    if args.dataset_dir:
        if not args.split_manifest:
            raise CliError("--dataset-dir needs --split-manifest")
        for name in _read_split(args.split_manifest):
            d = Path(args.dataset_dir) / name
            depth = d / "depth.png" if model.uses_depth else None
            rgb, dep = _read_inputs(d / "rgb.png", depth, model.uses_depth)
            _run_one(model, rgb, dep, settings, Path(args.out) / name)
        return 0
    if not args.rgb:
        raise CliError("--rgb (or --dataset-dir) is required")
    rgb, depth = _read_inputs(args.rgb, args.depth, model.uses_depth)
    pred = _run_one(model, rgb, depth, settings, args.out)
    log.info("wrote %s: %d instances, scene %d", args.out, len(pred.panoptic.instances), pred.scene)
    return 0


def cmd_evaluate(args) -> int:
    set_num_threads(args.threads)
    names = _read_split(args.split_manifest)
    if args.predictions is None and args.weights is None:
        raise CliError("evaluate needs --weights or --predictions")
    model = _load_model(args.weights) if args.weights is not None else None
    cfg = model.config if model is not None else reference_config()
    if args.predictions is not None:
        model = None  # weights only supply the label configuration
    num_classes = args.num_classes or cfg.num_classes
    spec = ThingStuffSpec.from_stuff(num_classes, cfg.stuff_classes)
    ev = Evaluator(num_classes, cfg.num_scene_classes, spec)
    settings = _settings(args)
    for name in names:
        d = Path(args.dataset_dir) / name
        try:
            gt_sem = formats.read_semantic(d / "semantic.png") if (d / "semantic.png").exists() else None
            gt_pan = formats.read_panoptic(d) if (d / "panoptic.png").exists() else None
            gt_scene = formats.read_scene(d / "scene.txt") if (d / "scene.txt").exists() else None
            if model is not None:
                rgb, depth = _read_inputs(d / "rgb.png",
                                          d / "depth.png" if model.uses_depth else None,
                                          model.uses_depth)
                use_gt = gt_sem if args.gt_foreground else None
                if args.gt_foreground and gt_sem is None:
                    raise formats.FormatError(f"{name}: --gt-foreground needs semantic.png")
                pred = model.predict(rgb, depth, settings, use_gt)
                p_sem, p_pan, p_scene = pred.semantic, pred.panoptic, pred.scene
                if args.save_predictions:
                    formats.write_prediction(Path(args.save_predictions) / name, p_sem, p_pan,
                                             p_scene, pred.outputs.scene_logits[0])
            else:
                pd = Path(args.predictions) / name
                p_sem = formats.read_semantic(pd / "semantic.png")
                p_pan = formats.read_panoptic(pd)
                p_scene = formats.read_scene(pd / "scene.txt")
            for gt in (gt_sem, None if gt_pan is None else gt_pan.semantic):
                if gt is not None and gt.shape != p_sem.shape:
                    raise formats.FormatError(f"{name}: prediction and ground truth sizes differ")
        except (formats.FormatError, CliError, OSError) as exc:
            log.warning("skipping %s: %s", name, exc)
            ev.num_skipped += 1
            continue
        ev.add(p_sem, gt_sem, p_pan if gt_pan is not None else None, gt_pan,
               p_scene, gt_scene)
    report = ev.report(settings=_echo(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    out.with_suffix(".txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return 0


def _percentiles(xs) -> dict:
    a = np.asarray(xs, dtype=np.float64)
    med = float(np.median(a))
    return {"median_ms": 1e3 * med, "p10_ms": 1e3 * float(np.percentile(a, 10)),
            "p90_ms": 1e3 * float(np.percentile(a, 90)),
            "fps": (1.0 / med) if med > 0 else float("inf")}


def run_bench(model: Model, height: int, width: int, iters: int, warmup: int,
              seed: int = 0) -> dict:
    """Time ``iters`` full predictions on one fixed synthetic frame after ``warmup``."""
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    depth = rng.integers(500, 5000, (height, width), dtype=np.uint16)
    samples = {k: [] for k in ("encoder", "context", "decoders", "postprocess", "total")}
    for i in range(warmup + iters):
        t = model.predict(rgb, depth if model.uses_depth else None).timings
        if i >= warmup:
            for k in samples:
                samples[k].append(t[k])
    return {k: _percentiles(v) for k, v in samples.items()}


def cmd_bench(args) -> int:
    if args.iters < 10 or args.warmup < 3:
        raise CliError("bench needs --iters >= 10 and --warmup >= 3")
    set_num_threads(args.threads)
    model = _load_model(args.weights)
    t0 = time.perf_counter()
    stats = run_bench(model, args.height, args.width, args.iters, args.warmup)
    result = {"settings": _echo(args), "stages": stats,
              "wall_s": time.perf_counter() - t0}
    if args.json:
        sys.stdout.write(json.dumps(result, indent=2) + "\n")
    else:
        sys.stdout.write(f"{'stage':<12}{'median ms':>12}{'p10 ms':>12}{'p90 ms':>12}{'fps':>10}\n")
        for name, s in stats.items():
            sys.stdout.write(f"{name:<12}{s['median_ms']:>12.2f}{s['p10_ms']:>12.2f}"
                             f"{s['p90_ms']:>12.2f}{s['fps']:>10.2f}\n")
    return 0


def cmd_init_weights(args) -> int:
    make = tiny_config if args.size == "tiny" else reference_config
    cfg = make(args.variant, args.semantic_decoder, args.instance_decoder)
    wio.save(args.out, cfg, wio.reference_init(cfg, args.seed))
    log.info("wrote %s (%s, %s)", args.out, args.size, args.variant)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import write_dataset
    manifest = write_dataset(args.out, args.count, args.seed, args.height, args.width)
    log.info("wrote %d samples, manifest %s", args.count, manifest)
    return 0


def cmd_selftest(args) -> int:
    from .harness import PROPERTIES, property_driver
    ids = args.property or list(PROPERTIES)
    report = property_driver(range(args.seeds), ids, args.dump_dir)
    sys.stdout.write(report.summary() + "\n")
    return 0 if report.ok else 1


def _echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_post(p: argparse.ArgumentParser) -> None:
    p.add_argument("--center-threshold", type=float, default=DEFAULT_THRESHOLD,
                   help="minimum heatmap score for an instance center")
    p.add_argument("--nms-kernel", type=int, default=DEFAULT_NMS_KERNEL,
                   help="side of the center suppression window")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K, help="maximum number of centers")
    p.add_argument("--min-instance-pixels", type=int, default=DEFAULT_MIN_INSTANCE_PIXELS,
                   help="smaller instances are dissolved")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="rgbdscene", formatter_class=fmt,
                                     description="RGB-D panoptic segmentation, orientation "
                                                 "and scene classification on CPU.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{infer,evaluate,bench,init-weights,synth}")
    threads = _default_threads()
    variants = [v.value for v in Variant]

    p = sub.add_parser("infer", formatter_class=fmt, help="run inference on one image or a split")
    p.add_argument("--weights", required=True, help="weight container")
    p.add_argument("--rgb", help="8-bit RGB PNG")
    p.add_argument("--depth", help="16-bit depth PNG in millimeters")
    p.add_argument("--dataset-dir", help="batch mode: directory of sample dirs")
    p.add_argument("--split-manifest", help="batch mode: sample names, one per line")
    p.add_argument("--out", required=True, help="output dir (one subdir per sample in batch mode)")
    p.add_argument("--variant", choices=variants, help="assert the weights' encoder variant")
    p.add_argument("--threads", type=int, default=threads, help="worker threads (EMSF_THREADS)")
    _add_post(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", formatter_class=fmt, help="score predictions against ground truth")
    p.add_argument("--weights", help="weight container used to predict")
    p.add_argument("--predictions", help="score existing prediction dirs instead of running the model")
    p.add_argument("--dataset-dir", required=True, help="ground-truth sample dirs")
    p.add_argument("--split-manifest", required=True, help="sample names, one per line")
    p.add_argument("--out", required=True, help="report JSON path; text goes next to it")
    p.add_argument("--gt-foreground", action="store_true",
                   help="use ground-truth semantics for the foreground mask and instance classes")
    p.add_argument("--save-predictions", help="also write predictions under this dir")
    p.add_argument("--num-classes", type=int, default=None, help="override the class count")
    p.add_argument("--threads", type=int, default=threads, help="worker threads (EMSF_THREADS)")
    _add_post(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", formatter_class=fmt, help="per-stage latency and throughput")
    p.add_argument("--weights", required=True, help="weight container")
    p.add_argument("--height", type=int, default=480, help="input height")
    p.add_argument("--width", type=int, default=640, help="input width")
    p.add_argument("--iters", type=int, default=20, help="timed iterations (>= 10)")
    p.add_argument("--warmup", type=int, default=3, help="untimed iterations (>= 3)")
    p.add_argument("--threads", type=int, default=threads, help="worker threads (EMSF_THREADS)")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("init-weights", formatter_class=fmt, help="write deterministic reference weights")
    p.add_argument("--out", required=True, help="container path")
    p.add_argument("--variant", choices=variants, default=Variant.SWINV2_T_128_MULTI.value,
                   help="encoder variant")
    p.add_argument("--size", choices=("reference", "tiny"), default="reference",
                   help="full-size or test-size network")
    p.add_argument("--semantic-decoder", choices=("segformer", "emsanet"), default="segformer",
                   help="semantic branch decoder")
    p.add_argument("--instance-decoder", choices=("segformer", "emsanet"), default="emsanet",
                   help="instance branch decoder")
    p.add_argument("--seed", type=int, default=0, help="initialization seed")
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("synth", formatter_class=fmt, help="write a synthetic RGB-D dataset")
    p.add_argument("--out", required=True, help="dataset root")
    p.add_argument("--count", type=int, default=10, help="number of samples")
    p.add_argument("--height", type=int, default=64, help="image height")
    p.add_argument("--width", type=int, default=64, help="image width")
    p.add_argument("--seed", type=int, default=0, help="first sample seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", formatter_class=fmt)
    p.add_argument("--seeds", type=int, default=100, help="seeds 0..N-1 per property")
    p.add_argument("--property", action="append", help="property name (repeatable)")
    p.add_argument("--dump-dir", default="property_failures", help="where failing inputs go")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code
    except formats.FormatError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except ConfigurationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
