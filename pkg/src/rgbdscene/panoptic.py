"""Bottom-up panoptic merging.

Centers are taken from the heatmap, foreground pixels are assigned to the
nearest center after following their predicted offset, and each resulting
instance takes the majority thing class of its pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T

DEFAULT_THRESHOLD = 0.1
DEFAULT_NMS_KERNEL = 7
DEFAULT_TOP_K = 64
DEFAULT_MIN_INSTANCE_PIXELS = 10
LABEL_DIVISOR = 1000


@dataclass(frozen=True)
class ThingStuffSpec:
    """Label ids are 1..num_classes with ``void_id`` (0) for unlabeled pixels."""

    stuff_class_ids: frozenset[int]
    thing_class_ids: frozenset[int]
    void_id: int = 0

    @classmethod
    def from_stuff(cls, num_classes: int, stuff: tuple[int, ...] | set[int],
                   void_id: int = 0) -> "ThingStuffSpec":
        stuff = frozenset(int(s) for s in stuff)
        things = frozenset(range(1, num_classes + 1)) - stuff
        return cls(stuff, things, void_id)

    def thing_mask(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(labels, np.fromiter(self.thing_class_ids, dtype=np.int64))

    def stuff_mask(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(labels, np.fromiter(self.stuff_class_ids, dtype=np.int64))


@dataclass
class Instance:
    id: int
    semantic_class: int
    center: tuple[float, float]
    pixel_count: int
    orientation_deg: float | None = None
    score: float | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "panoptic_id": self.semantic_class * LABEL_DIVISOR + self.id,
            "semantic_class": self.semantic_class,
            "center": [float(self.center[0]), float(self.center[1])],
            "pixel_count": self.pixel_count,
            "orientation_deg": self.orientation_deg,
            "score": self.score,
        }


@dataclass
class PanopticMap:
    semantic: np.ndarray       # [H, W] int labels
    instance_id: np.ndarray    # [H, W] int, 0 = no instance
    instances: list[Instance] = field(default_factory=list)

    def encode(self) -> np.ndarray:
        """``class * 1000 + instance`` id map."""
        return self.semantic.astype(np.int64) * LABEL_DIVISOR + self.instance_id

    @classmethod
    def decode(cls, panoptic: np.ndarray, orientations: dict[int, float | None] | None = None
               ) -> "PanopticMap":
        """Rebuild from an encoded id map; instance ids are renumbered densely
        in order of first appearance by encoded id, and centers are centroids."""
        panoptic = np.asarray(panoptic, dtype=np.int64)
        semantic = panoptic // LABEL_DIVISOR
        inst_raw = panoptic % LABEL_DIVISOR
        instance_id = np.zeros_like(inst_raw)
        instances = []
        ids = np.unique(panoptic[inst_raw > 0])
        for new_id, pid in enumerate(ids, start=1):
            mask = panoptic == pid
            instance_id[mask] = new_id
            ys, xs = np.nonzero(mask)
            ori = None if orientations is None else orientations.get(int(pid))
            instances.append(Instance(new_id, int(pid // LABEL_DIVISOR),
                                      (float(ys.mean()), float(xs.mean())), int(mask.sum()), ori))
        return cls(semantic, instance_id, instances)


# ---------------------------------------------------------------------------
# Centers
# ---------------------------------------------------------------------------

def extract_centers(heatmap: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                    nms_kernel: int = DEFAULT_NMS_KERNEL, top_k: int = DEFAULT_TOP_K
                    ) -> list[tuple[int, int, float]]:
    """Local maxima of ``heatmap [H, W]`` as ``(y, x, score)``, best first.

    A pixel survives if it scores at least ``threshold`` and beats every other
    pixel in its ``nms_kernel`` window under the order (score desc, y asc,
    x asc), so plateaus yield exactly one peak.
    """
    heat = np.asarray(heatmap, dtype=np.float32)
    if heat.ndim == 3:
        heat = heat[..., 0]
    half = nms_kernel // 2
    size = 2 * half + 1
    pooled = ndimage.maximum_filter(heat, size=size, mode="nearest")
    ys, xs = np.nonzero((heat == pooled) & (heat >= threshold))
    h, w = heat.shape
    kept = []
    for y, x in zip(ys.tolist(), xs.tolist()):
        v = heat[y, x]
        y0, x0 = max(0, y - half), max(0, x - half)
        win = heat[y0:min(h, y + half + 1), max(0, x - half):min(w, x + half + 1)]
        ty, tx = np.nonzero(win == v)
        ty = ty + y0
        tx = tx + x0
        # Equal-score neighbours earlier in raster order win the tie.
        if np.any((ty < y) | ((ty == y) & (tx < x))):
            continue
        kept.append((y, x, float(v)))
    kept.sort(key=lambda c: (-c[2], c[0], c[1]))
    return kept[:top_k]


# ---------------------------------------------------------------------------
# Grouping
# ---------------------------------------------------------------------------

def group_pixels(centers, offsets: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    """Assign each foreground pixel to the center nearest ``pixel + offset``.

    Returns an id map where center ``k`` (list order) becomes id ``k + 1``.
    Distances are squared Euclidean in float64; ties go to the lower index.
    """
    foreground = np.asarray(foreground, dtype=bool)
    h, w = foreground.shape
    out = np.zeros((h, w), dtype=np.int64)
    if len(centers) == 0 or not foreground.any():
        return out
    cy = np.array([c[0] for c in centers], dtype=np.float64)
    cx = np.array([c[1] for c in centers], dtype=np.float64)
    off = np.asarray(offsets, dtype=np.float64)
    rows_per_block = max(1, 65536 // (w * len(centers)) or 1)
    spans = T.blocks(h, rows_per_block)

    def work(i: int) -> None:
        s, e = spans[i]
        py = np.arange(s, e, dtype=np.float64)[:, None] + off[s:e, :, 0]
        px = np.arange(w, dtype=np.float64)[None, :] + off[s:e, :, 1]
        dy = py[..., None] - cy
        dx = px[..., None] - cx
        dist = dy * dy + dx * dx
        ids = np.argmin(dist, axis=-1) + 1
        out[s:e] = np.where(foreground[s:e], ids, 0)

    T.parallel_for(work, len(spans))
    return out


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------

def _majority_class(labels: np.ndarray, things: np.ndarray) -> int | None:
    cand = labels[np.isin(labels, things)]
    if cand.size == 0:
        return None
    counts = np.bincount(cand)
    return int(np.argmax(counts))  # first max = lowest class id


def merge_panoptic(semantic: np.ndarray, instance_id: np.ndarray, spec: ThingStuffSpec,
                   min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS,
                   centers=None, class_source: np.ndarray | None = None) -> PanopticMap:
    """Fuse a semantic label map with class-agnostic instance ids.

    Each instance takes the majority thing class of ``class_source`` (default
    ``semantic``) over its pixels, lowest id on ties.  Instances smaller than
    ``min_instance_pixels`` or without thing pixels are dissolved.  Pixels of
    a kept instance whose label is stuff or void drop out of the instance.
    Surviving instances are renumbered 1..K in input id order.
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    instance_id = np.asarray(instance_id, dtype=np.int64)
    class_source = semantic if class_source is None else np.asarray(class_source, np.int64)
    things = np.fromiter(spec.thing_class_ids, dtype=np.int64)
    thing_px = np.isin(class_source, things)
    out_sem = semantic.copy()
    out_ids = np.zeros_like(instance_id)
    instances = []
    n_ids = int(instance_id.max()) if instance_id.size else 0
    counts = np.bincount(instance_id.ravel(), minlength=n_ids + 1)
    next_id = 1
    for k in range(1, n_ids + 1):
        if counts[k] == 0:
            continue
        mask = instance_id == k
        if counts[k] < min_instance_pixels:
            continue
        cls = _majority_class(class_source[mask], things)
        if cls is None:
            continue
        member = mask & thing_px
        n = int(member.sum())
        if n < min_instance_pixels:
            continue
        out_ids[member] = next_id
        out_sem[member] = cls
        if centers is not None and k - 1 < len(centers):
            cy, cx, score = centers[k - 1]
            center, score = (float(cy), float(cx)), float(score)
        else:
            ys, xs = np.nonzero(member)
            center, score = (float(ys.mean()), float(xs.mean())), None
        instances.append(Instance(next_id, cls, center, n, None, score))
        next_id += 1
    return PanopticMap(out_sem, out_ids, instances)


def aggregate_orientation(orientation: np.ndarray, panoptic: PanopticMap,
                          eps: float = 1e-9) -> PanopticMap:
    """Circular mean of per-pixel (sin, cos) predictions per instance, in [0, 360)."""
    field_ = np.asarray(orientation, dtype=np.float64)
    if field_.ndim == 4:
        field_ = field_[0]
    norm = np.hypot(field_[..., 0], field_[..., 1])
    safe = np.where(norm > 0, norm, 1.0)
    s = np.where(norm > 0, field_[..., 0] / safe, 0.0)
    c = np.where(norm > 0, field_[..., 1] / safe, 0.0)
    ids = panoptic.instance_id.ravel()
    n = len(panoptic.instances)
    count = np.bincount(ids, minlength=n + 1)
    sum_s = np.bincount(ids, weights=s.ravel(), minlength=n + 1)
    sum_c = np.bincount(ids, weights=c.ravel(), minlength=n + 1)
    for inst in panoptic.instances:
        k = inst.id
        ms, mc = sum_s[k] / count[k], sum_c[k] / count[k]
        if math.hypot(ms, mc) <= eps:
            inst.orientation_deg = None
        else:
            inst.orientation_deg = wrap_degrees(math.degrees(math.atan2(ms, mc)))
    return panoptic


def wrap_degrees(a: float) -> float:
    a = a % 360.0
    if a >= 360.0 or a == 0.0:  # x % 360 can round up to 360.0; folds -0.0 too
        a = 0.0
    return a


def gt_foreground_mode(gt_semantic: np.ndarray, spec: ThingStuffSpec
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Foreground mask and class source taken from ground truth.

    Returns ``(foreground, class_source)`` for :func:`group_pixels` and
    :func:`merge_panoptic`.
    """
    gt = np.asarray(gt_semantic, dtype=np.int64)
    return spec.thing_mask(gt), gt


def predicted_foreground(semantic: np.ndarray, spec: ThingStuffSpec) -> np.ndarray:
    return spec.thing_mask(semantic)


def panoptic_from_outputs(semantic: np.ndarray, heatmap: np.ndarray, offsets: np.ndarray,
                          orientation: np.ndarray | None, spec: ThingStuffSpec,
                          threshold: float = DEFAULT_THRESHOLD,
                          nms_kernel: int = DEFAULT_NMS_KERNEL, top_k: int = DEFAULT_TOP_K,
                          min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS,
                          gt_semantic: np.ndarray | None = None) -> PanopticMap:
    """Full post-processing for one image (dense inputs without batch axis)."""
    if gt_semantic is not None:
        fg, class_source = gt_foreground_mode(gt_semantic, spec)
    else:
        fg, class_source = predicted_foreground(semantic, spec), semantic
    centers = extract_centers(heatmap, threshold, nms_kernel, top_k)
    ids = group_pixels(centers, offsets, fg)
    pan = merge_panoptic(semantic, ids, spec, min_instance_pixels, centers, class_source)
    if orientation is not None:
        aggregate_orientation(orientation, pan)
    return pan
