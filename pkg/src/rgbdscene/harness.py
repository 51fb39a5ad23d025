"""Randomized property driver pairing fast paths with the float64 oracles."""
from __future__ import annotations

import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import oracle
from . import tensor as T
from .encoder import AttentionWeights, cosine_window_attention, crop, pad_to_window, \
    window_partition, window_reverse
from .metrics import PQStat, match_segments
from .panoptic import PanopticMap, ThingStuffSpec, extract_centers, group_pixels

# A property maps a seed to (passed, inputs); inputs are dumped on failure.
Property = Callable[[int], tuple[bool, dict]]
PROPERTIES: dict[str, Property] = {}


def register(name: str) -> Callable[[Property], Property]:
    def deco(fn: Property) -> Property:
        PROPERTIES[name] = fn
        return fn
    return deco


@dataclass
class PropertyReport:
    runs: int = 0
    passed: int = 0
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"runs={self.runs} passed={self.passed} failed={len(self.failures)}"]
        for f in self.failures:
            lines.append(f"FAIL {f['property']} seed={f['seed']} dump={f['dump']}")
        return "\n".join(lines)


def property_driver(seeds: Iterable[int], property_ids: Iterable[str] | None = None,
                    dump_dir: str | Path = "property_failures",
                    registry: dict[str, Property] | None = None) -> PropertyReport:
    """Run each property over each seed; failing inputs go to ``dump_dir``."""
    registry = PROPERTIES if registry is None else registry
    ids = list(registry) if property_ids is None else list(property_ids)
    seeds = list(seeds)
    report = PropertyReport()
    for pid in ids:
        prop = registry[pid]
        for seed in seeds:
            report.runs += 1
            try:
                ok, inputs = prop(seed)
                err = None
            except Exception:  # a crashing property is a failing property
                ok, inputs, err = False, {}, traceback.format_exc()
            if ok:
                report.passed += 1
                continue
            dump = Path(dump_dir)
            dump.mkdir(parents=True, exist_ok=True)
            stem = f"{pid.replace(' ', '_')}_seed{seed}"
            arrays = {k: np.asarray(v) for k, v in inputs.items()}
            np.savez(dump / f"{stem}.npz", **arrays)
            (dump / f"{stem}.json").write_text(json.dumps(
                {"property": pid, "seed": seed, "error": err}, indent=2))
            report.failures.append({"property": pid, "seed": seed, "dump": str(dump / stem)})
    return report


# ---------------------------------------------------------------------------
# Built-in properties
# ---------------------------------------------------------------------------

def random_attention_weights(rng: np.random.Generator, n_heads: int, window: int,
                             head_dim: int = 32, hidden: int = 64) -> dict[str, np.ndarray]:
    """Unit-scale random attention parameters under the ``attn`` prefix."""
    c = n_heads * head_dim
    f = lambda *s, sc=1.0: (rng.standard_normal(s) * sc).astype(np.float32)  # noqa: E731
    return {
        "attn.qkv.weight": f(3 * c, c, sc=c ** -0.5),
        "attn.qkv.bias": f(3 * c, sc=0.1),
        "attn.logit_scale": rng.uniform(0.0, 5.0, n_heads).astype(np.float32),
        "attn.cpb.fc1.weight": f(hidden, 2),
        "attn.cpb.fc1.bias": f(hidden, sc=0.1),
        "attn.cpb.fc2.weight": f(n_heads, hidden, sc=hidden ** -0.5),
        "attn.proj.weight": f(c, c, sc=c ** -0.5),
        "attn.proj.bias": f(c, sc=0.1),
    }


@register("window roundtrip")
def _window_roundtrip(seed: int):
    rng = np.random.default_rng(seed)
    m = int(rng.choice([2, 4, 8]))
    x = rng.standard_normal((int(rng.integers(1, 3)), m * int(rng.integers(1, 4)),
                             m * int(rng.integers(1, 4)), int(rng.integers(1, 6)))).astype(np.float32)
    back = window_reverse(window_partition(x, m), m, x.shape[1], x.shape[2])
    return bool(np.array_equal(back, x)), {"x": x}


@register("pad crop roundtrip")
def _pad_crop(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, int(rng.integers(1, 30)), int(rng.integers(1, 30)), 3)).astype(np.float32)
    m = int(rng.choice([4, 8]))
    p, spec = pad_to_window(x, m)
    ok = p.shape[1] % m == 0 and p.shape[2] % m == 0 and np.array_equal(crop(p, spec), x)
    ok = ok and not p[:, x.shape[1]:].any() and not p[:, :, x.shape[2]:].any()
    return bool(ok), {"x": x}


@register("matmul oracle")
def _matmul(seed: int):
    rng = np.random.default_rng(seed)
    m, k, n = (int(v) for v in rng.integers(1, 12, 3))
    a = rng.standard_normal((m, k)).astype(np.float32)
    b = rng.standard_normal((k, n)).astype(np.float32)
    return bool(np.abs(T.matmul(a, b) - oracle.naive_matmul(a, b)).max() <= 1e-5), {"a": a, "b": b}


@register("softmax rows")
def _softmax(seed: int):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((5, int(rng.integers(1, 40)))) * 10).astype(np.float32)
    y = T.softmax(x)
    ok = np.abs(y.sum(-1) - 1).max() <= 1e-6 and np.abs(y - oracle.naive_softmax(x)).max() <= 1e-6
    return bool(ok), {"x": x}


@register("attention oracle")
def _attention(seed: int):
    rng = np.random.default_rng(seed)
    n_heads = int(rng.choice([2, 4]))
    window = 8
    w = random_attention_weights(rng, n_heads, window)
    x = rng.standard_normal((1, window * window, n_heads * 32)).astype(np.float32)
    aw = AttentionWeights.from_store(w, "attn", n_heads * 32, 32, window)
    fast = cosine_window_attention(x, aw)
    ref = oracle.naive_attention(x, w, "attn", n_heads, window)
    return bool(np.abs(fast - ref).max() <= 1e-5), {"x": x, **w}


def random_grouping_case(rng: np.random.Generator):
    h, w = (int(v) for v in rng.integers(1, 33, 2))
    k = int(rng.integers(0, 7))
    centers = [(int(rng.integers(0, h)), int(rng.integers(0, w)), float(rng.random()))
               for _ in range(k)]
    offsets = rng.normal(0.0, 4.0, (h, w, 2)).astype(np.float32)
    # Integer offsets create exact distance ties.
    if rng.random() < 0.5:
        offsets = np.round(offsets)
    fg = rng.random((h, w)) < rng.uniform(0.0, 1.0)
    return centers, offsets, fg


@register("group pixels oracle")
def _group(seed: int):
    rng = np.random.default_rng(seed)
    centers, offsets, fg = random_grouping_case(rng)
    ok = np.array_equal(group_pixels(centers, offsets, fg),
                        oracle.naive_group_pixels(centers, offsets, fg))
    return bool(ok), {"centers": np.array(centers).reshape(-1, 3), "offsets": offsets, "fg": fg}


@register("centers oracle")
def _centers(seed: int):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(1, 25, 2))
    heat = np.round(rng.random((h, w)) * 8) / 8  # coarse levels force plateaus
    heat = heat.astype(np.float32)
    k = int(rng.choice([1, 3, 5, 7]))
    ok = extract_centers(heat, 0.1, k, 64) == oracle.naive_extract_centers(heat, 0.1, k, 64)
    return bool(ok), {"heat": heat}


def random_panoptic_pair(rng: np.random.Generator, spec: ThingStuffSpec, size: int = 16,
                         max_segments: int = 6):
    def one():
        sem = np.zeros((size, size), dtype=np.int64)
        inst = np.zeros((size, size), dtype=np.int64)
        classes = sorted(spec.stuff_class_ids) + sorted(spec.thing_class_ids)[:3]
        for k in range(int(rng.integers(1, max_segments + 1))):
            y0, x0 = (int(v) for v in rng.integers(0, size - 2, 2))
            y1 = int(rng.integers(y0 + 1, size + 1))
            x1 = int(rng.integers(x0 + 1, size + 1))
            cls = int(rng.choice(classes))
            sem[y0:y1, x0:x1] = cls
            inst[y0:y1, x0:x1] = 0 if cls in spec.stuff_class_ids else k + 1
        return sem, inst
    gs, gi = one()
    if rng.random() < 0.5:
        # Perturbed copy of the ground truth gives many true positives.
        ps, pi = gs.copy(), gi.copy()
        ys, xs = rng.integers(0, size, 2)
        ps[ys:ys + 4, xs:xs + 4] = int(rng.choice(sorted(spec.thing_class_ids)[:3]))
        pi[ys:ys + 4, xs:xs + 4] = 9
    else:
        ps, pi = one()
    return PanopticMap(ps, pi), PanopticMap(gs, gi)


@register("pq oracle")
def _pq(seed: int):
    rng = np.random.default_rng(seed)
    spec = ThingStuffSpec.from_stuff(6, (1, 2))
    pred, gt = random_panoptic_pair(rng, spec)
    stat, _ = match_segments(pred, gt, spec)
    ref = oracle.naive_pq(pred.semantic, pred.instance_id, gt.semantic, gt.instance_id,
                          set(spec.stuff_class_ids), set(spec.thing_class_ids), spec.void_id)
    got = {c: (stat.tp.get(c, 0), stat.fp.get(c, 0), stat.fn.get(c, 0), stat.iou.get(c, 0.0))
           for c in stat.classes()}
    ok = set(got) == set(ref) and all(got[c][:3] == ref[c][:3] and got[c][3] == ref[c][3]
                                      for c in got)
    return bool(ok), {"pred_sem": pred.semantic, "pred_inst": pred.instance_id,
                      "gt_sem": gt.semantic, "gt_inst": gt.instance_id}


@register("pq factorization")
def _pq_identity(seed: int):
    rng = np.random.default_rng(seed)
    spec = ThingStuffSpec.from_stuff(6, (1, 2))
    pred, gt = random_panoptic_pair(rng, spec)
    stat: PQStat = match_segments(pred, gt, spec)[0]
    ok = all(abs(v["pq"] - v["sq"] * v["rq"]) <= 1e-9 for v in stat.per_class().values())
    return bool(ok), {"pred_sem": pred.semantic, "gt_sem": gt.semantic}
