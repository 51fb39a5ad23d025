import json
import shutil

import numpy as np
import pytest

from rgbdscene import formats
from rgbdscene.cli import build_parser, main, run_bench
from rgbdscene.config import Variant, tiny_config
from rgbdscene.model import Model
from rgbdscene.synthetic import write_dataset
from rgbdscene.weights import reference_init, save


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    weights = {}
    for v in (Variant.SWINV2_T_128_MULTI, Variant.RGB_ONLY):
        cfg = tiny_config(v)
        weights[v] = root / f"{v.value}.emsf"
        save(weights[v], cfg, reference_init(cfg, 0))
    manifest = write_dataset(root / "ds", 3, seed=0, height=48, width=64)
    return root, weights, manifest


def sample(env, i=0):
    root, _, _ = env
    return root / "ds" / f"sample_{i:04d}"


def test_infer_writes_artifacts(env, tmp_path):
    _, w, _ = env
    s = sample(env)
    rc = main(["infer", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--rgb", str(s / "rgb.png"),
               "--depth", str(s / "depth.png"), "--out", str(tmp_path / "o")])
    assert rc == 0
    assert formats.read_semantic(tmp_path / "o" / "semantic.png").shape == (48, 64)
    assert formats.read_panoptic_ids(tmp_path / "o" / "panoptic.png").shape == (48, 64)
    doc = json.loads((tmp_path / "o" / "instances.json").read_text())
    assert "instances" in doc
    text = (tmp_path / "o" / "scene.txt").read_text()
    assert text.startswith("label=") and "logits=" in text


def test_rgb_only_without_depth(env, tmp_path):
    _, w, _ = env
    s = sample(env)
    assert main(["infer", "--weights", str(w[Variant.RGB_ONLY]), "--rgb", str(s / "rgb.png"),
                 "--out", str(tmp_path / "o")]) == 0


def test_depth_variant_without_depth_exit_2(env, tmp_path, capsys):
    _, w, _ = env
    s = sample(env)
    assert main(["infer", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--rgb",
                 str(s / "rgb.png"), "--out", str(tmp_path / "o")]) == 2
    assert "depth" in capsys.readouterr().err


def test_unreadable_and_mismatched_inputs(env, tmp_path):
    _, w, _ = env
    s = sample(env)
    (tmp_path / "junk.png").write_bytes(b"not a png")
    args = ["infer", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--out", str(tmp_path / "o")]
    assert main(args + ["--rgb", str(tmp_path / "junk.png"), "--depth", str(s / "depth.png")]) == 2
    formats.write_depth(tmp_path / "small.png", np.zeros((10, 10), np.uint16))
    assert main(args + ["--rgb", str(s / "rgb.png"), "--depth", str(tmp_path / "small.png")]) == 2


def test_bad_weights_exit_3(env, tmp_path):
    _, w, _ = env
    s = sample(env)
    bad = tmp_path / "bad.emsf"
    bad.write_bytes(w[Variant.SWINV2_T_128_MULTI].read_bytes()[:500])
    assert main(["infer", "--weights", str(bad), "--rgb", str(s / "rgb.png"),
                 "--depth", str(s / "depth.png"), "--out", str(tmp_path / "o")]) == 3


def test_variant_assertion(env, tmp_path):
    _, w, _ = env
    s = sample(env)
    assert main(["infer", "--weights", str(w[Variant.RGB_ONLY]), "--variant", "swinv2-t-multi",
                 "--rgb", str(s / "rgb.png"), "--out", str(tmp_path / "o")]) == 3


def test_self_evaluation_is_perfect(env, tmp_path):
    root, _, manifest = env
    preds = tmp_path / "preds"
    for name in manifest.read_text().split():
        shutil.copytree(root / "ds" / name, preds / name)
    out = tmp_path / "r.json"
    assert main(["evaluate", "--predictions", str(preds), "--dataset-dir", str(root / "ds"),
                 "--split-manifest", str(manifest), "--out", str(out)]) == 0
    r = json.loads(out.read_text())
    assert (r["miou"], r["pq"], r["maae_deg"], r["bacc"]) == (100.0, 100.0, 0.0, 100.0)
    assert out.with_suffix(".txt").exists()


def test_evaluate_infer_outputs_roundtrip(env, tmp_path):
    root, w, manifest = env
    out = tmp_path / "r.json"
    assert main(["evaluate", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--dataset-dir",
                 str(root / "ds"), "--split-manifest", str(manifest), "--out", str(out),
                 "--save-predictions", str(tmp_path / "p")]) == 0
    r = json.loads(out.read_text())
    assert r["num_images"] == 3 and r["num_skipped"] == 0
    # Written predictions evaluate to the same report.
    out2 = tmp_path / "r2.json"
    assert main(["evaluate", "--predictions", str(tmp_path / "p"), "--dataset-dir",
                 str(root / "ds"), "--split-manifest", str(manifest), "--out", str(out2)]) == 0
    r2 = json.loads(out2.read_text())
    for k in ("miou", "pq", "sq", "rq", "maae_deg", "bacc", "per_class_pq", "confusion"):
        assert r[k] == r2[k]
    assert r["settings"]["center_threshold"] == 0.1 and r["settings"]["top_k"] == 64


def test_evaluate_skips_malformed_and_reports_absent(env, tmp_path):
    root, _, manifest = env
    ds = tmp_path / "ds"
    shutil.copytree(root / "ds", ds)
    (ds / "sample_0001" / "panoptic.png").write_bytes(b"garbage")
    for name in ("sample_0000", "sample_0002"):
        (ds / name / "scene.txt").unlink()
    preds = tmp_path / "preds"
    shutil.copytree(root / "ds", preds)
    out = tmp_path / "r.json"
    assert main(["evaluate", "--predictions", str(preds), "--dataset-dir", str(ds),
                 "--split-manifest", str(manifest), "--out", str(out)]) == 0
    r = json.loads(out.read_text())
    assert r["num_skipped"] == 1 and r["bacc"] is None and r["num_images"] == 2


def test_empty_manifest_exit_2(env, tmp_path):
    root, w, _ = env
    (tmp_path / "empty.txt").write_text("")
    assert main(["evaluate", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--dataset-dir",
                 str(root / "ds"), "--split-manifest", str(tmp_path / "empty.txt"),
                 "--out", str(tmp_path / "r.json")]) == 2


def test_bench_structure(env, capsys):
    _, w, _ = env
    assert main(["bench", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--height", "48",
                 "--width", "64", "--iters", "10", "--warmup", "3", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["stages"]) == {"encoder", "context", "decoders", "postprocess", "total"}
    for s in doc["stages"].values():
        assert s["p10_ms"] <= s["median_ms"] <= s["p90_ms"]
    assert doc["settings"]["iters"] == 10


def test_bench_text_rows(env, capsys):
    _, w, _ = env
    assert main(["bench", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--height", "32",
                 "--width", "32", "--iters", "10", "--warmup", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6


def test_bench_rejects_small_counts(env):
    _, w, _ = env
    assert main(["bench", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--iters", "5"]) == 2


def test_bench_monotone_scaling(tiny):
    cfg, store = tiny
    model = Model(cfg, store)
    small = [run_bench(model, 32, 32, 10, 3)["encoder"]["median_ms"] for _ in range(5)]
    large = [run_bench(model, 64, 64, 10, 3)["encoder"]["median_ms"] for _ in range(5)]
    assert np.median(large) > np.median(small)


def test_help_lists_defaults(capsys):
    parser = build_parser()
    for cmd in ("infer", "evaluate", "bench"):
        with pytest.raises(SystemExit):
            parser.parse_args([cmd, "--help"])
        out = capsys.readouterr().out
        assert "default:" in out
    assert "selftest" not in parser.format_help().split("positional arguments")[0]


def test_threads_env_default(monkeypatch):
    monkeypatch.setenv("EMSF_THREADS", "3")
    args = build_parser().parse_args(["bench", "--weights", "x"])
    assert args.threads == 3


def test_init_weights_and_synth(tmp_path):
    assert main(["init-weights", "--size", "tiny", "--variant", "swinv2-t", "--out",
                 str(tmp_path / "w.emsf")]) == 0
    assert main(["synth", "--out", str(tmp_path / "ds"), "--count", "2"]) == 0
    assert (tmp_path / "ds" / "split.txt").read_text().split() == ["sample_0000", "sample_0001"]


def test_selftest(tmp_path, capsys):
    assert main(["selftest", "--seeds", "3", "--dump-dir", str(tmp_path)]) == 0
    assert "failed=0" in capsys.readouterr().out


def test_batch_infer(env, tmp_path):
    root, w, manifest = env
    assert main(["infer", "--weights", str(w[Variant.SWINV2_T_128_MULTI]), "--dataset-dir",
                 str(root / "ds"), "--split-manifest", str(manifest), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "sample_0002" / "panoptic.png").exists()
