"""Evaluation: mIoU, panoptic quality, orientation error and balanced accuracy.

All accumulators are plain counters, so per-image results can be merged in any
order with identical totals.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .panoptic import LABEL_DIVISOR, PanopticMap, ThingStuffSpec

MATCH_IOU = 0.5


# ---------------------------------------------------------------------------
# Semantic segmentation
# ---------------------------------------------------------------------------

class ConfusionMatrix:
    """Rows are ground truth, columns prediction; labels 1..num_classes, void skipped."""

    def __init__(self, num_classes: int, void_id: int = 0):
        self.num_classes = num_classes
        self.void_id = void_id
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred, dtype=np.int64).ravel()
        gt = np.asarray(gt, dtype=np.int64).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction and ground truth differ in size: {pred.shape} vs {gt.shape}")
        valid = (gt != self.void_id) & (gt >= 1) & (gt <= self.num_classes)
        valid &= (pred >= 1) & (pred <= self.num_classes)
        idx = (gt[valid] - 1) * self.num_classes + (pred[valid] - 1)
        self.matrix += np.bincount(idx, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.matrix += other.matrix

    def per_class_iou(self) -> list[float | None]:
        tp = np.diag(self.matrix).astype(np.float64)
        union = self.matrix.sum(0) + self.matrix.sum(1) - tp
        return [None if u == 0 else float(t / u) for t, u in zip(tp, union)]

    def miou(self) -> float | None:
        ious = [v for v in self.per_class_iou() if v is not None]
        if not ious:
            return None
        return 100.0 * float(np.mean(ious))


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, void_id: int = 0
         ) -> tuple[float | None, list[float | None]]:
    cm = ConfusionMatrix(num_classes, void_id)
    cm.update(pred, gt)
    return cm.miou(), cm.per_class_iou()


# ---------------------------------------------------------------------------
# Panoptic quality
# ---------------------------------------------------------------------------

def segment_ids(pan: PanopticMap, spec: ThingStuffSpec) -> np.ndarray:
    """Encoded segment id per pixel, -1 where the pixel belongs to no segment.

    Stuff classes form one segment per class; thing pixels need an instance id.
    """
    sem = np.asarray(pan.semantic, dtype=np.int64)
    inst = np.asarray(pan.instance_id, dtype=np.int64)
    stuff = spec.stuff_mask(sem)
    thing = spec.thing_mask(sem) & (inst > 0)
    ids = np.full(sem.shape, -1, dtype=np.int64)
    ids[stuff] = sem[stuff] * LABEL_DIVISOR
    ids[thing] = sem[thing] * LABEL_DIVISOR + inst[thing]
    return ids


@dataclass
class PQStat:
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    iou: dict = field(default_factory=dict)

    def _add(self, d: dict, cls: int, v) -> None:
        d[cls] = d.get(cls, 0) + v

    def merge(self, other: "PQStat") -> None:
        for name in ("tp", "fp", "fn", "iou"):
            for cls, v in getattr(other, name).items():
                self._add(getattr(self, name), cls, v)

    def classes(self) -> list[int]:
        return sorted(set(self.tp) | set(self.fp) | set(self.fn))

    def per_class(self) -> dict[int, dict[str, float]]:
        out = {}
        for cls in self.classes():
            tp, fp, fn = self.tp.get(cls, 0), self.fp.get(cls, 0), self.fn.get(cls, 0)
            iou = self.iou.get(cls, 0.0)
            denom = tp + 0.5 * fp + 0.5 * fn
            if denom == 0:
                continue
            sq = iou / tp if tp else 0.0
            rq = tp / denom
            out[cls] = {"pq": iou / denom, "sq": sq, "rq": rq, "tp": tp, "fp": fp, "fn": fn}
        return out

    def summary(self, classes: Iterable[int] | None = None) -> dict[str, float | None]:
        """Class-averaged PQ/SQ/RQ in percent over ``classes`` that occur."""
        per = self.per_class()
        keys = [c for c in per if classes is None or c in set(classes)]
        if not keys:
            return {"pq": None, "sq": None, "rq": None, "n": 0}
        return {m: 100.0 * float(np.mean([per[c][m] for c in keys])) for m in ("pq", "sq", "rq")} | {
            "n": len(keys)}


def match_segments(pred: PanopticMap, gt: PanopticMap, spec: ThingStuffSpec
                   ) -> tuple[PQStat, list[tuple[int, int]]]:
    """Match prediction and ground-truth segments of one image.

    Segments match when they share a class and their IoU exceeds 0.5; IoU
    excludes the part of a prediction that falls on void ground truth.
    Unmatched predictions lying mostly on void are not counted as false
    positives.  Returns the counters and matched thing pairs as
    ``(pred_instance_id, gt_instance_id)``.
    """
    if pred.semantic.shape != gt.semantic.shape:
        raise ValueError("prediction and ground truth differ in size")
    g = segment_ids(gt, spec).ravel()
    p = segment_ids(pred, spec).ravel()
    g_ids, g_area = np.unique(g[g >= 0], return_counts=True)
    p_ids, p_area = np.unique(p[p >= 0], return_counts=True)
    g_area = dict(zip(g_ids.tolist(), g_area.tolist()))
    p_area = dict(zip(p_ids.tolist(), p_area.tolist()))
    gt_void = np.asarray(gt.semantic).ravel() == spec.void_id
    void_overlap = {}
    if gt_void.any():
        vi, vc = np.unique(p[gt_void & (p >= 0)], return_counts=True)
        void_overlap = dict(zip(vi.tolist(), vc.tolist()))
    both = (g >= 0) & (p >= 0)
    pairs, inter = np.unique(np.stack([g[both], p[both]]), axis=1, return_counts=True)

    stat = PQStat()
    matched_g, matched_p = set(), set()
    thing_pairs = []
    for (gid, pid), n in zip(pairs.T.tolist(), inter.tolist()):
        if gid // LABEL_DIVISOR != pid // LABEL_DIVISOR:
            continue
        union = p_area[pid] + g_area[gid] - n - void_overlap.get(pid, 0)
        iou = n / union
        if iou <= MATCH_IOU:
            continue
        assert gid not in matched_g and pid not in matched_p, "IoU > 0.5 matches must be unique"
        cls = gid // LABEL_DIVISOR
        matched_g.add(gid)
        matched_p.add(pid)
        stat._add(stat.tp, cls, 1)
        stat._add(stat.iou, cls, iou)
        if gid % LABEL_DIVISOR:
            thing_pairs.append((pid % LABEL_DIVISOR, gid % LABEL_DIVISOR))
    for gid in g_area:
        if gid not in matched_g:
            stat._add(stat.fn, gid // LABEL_DIVISOR, 1)
    for pid, area in p_area.items():
        if pid in matched_p:
            continue
        if void_overlap.get(pid, 0) / area > MATCH_IOU:
            continue
        stat._add(stat.fp, pid // LABEL_DIVISOR, 1)
    thing_pairs.sort()
    return stat, thing_pairs


def panoptic_quality(pred: PanopticMap, gt: PanopticMap, spec: ThingStuffSpec
                     ) -> dict[str, dict[str, float | None]]:
    """PQ/SQ/RQ in percent for all classes, things only and stuff only."""
    stat, _ = match_segments(pred, gt, spec)
    return pq_summary(stat, spec)


def pq_summary(stat: PQStat, spec: ThingStuffSpec) -> dict[str, dict[str, float | None]]:
    return {"all": stat.summary(), "things": stat.summary(spec.thing_class_ids),
            "stuff": stat.summary(spec.stuff_class_ids)}


# ---------------------------------------------------------------------------
# Orientation and scene
# ---------------------------------------------------------------------------

def angular_error(pred_deg: float, gt_deg: float) -> float:
    d = abs(pred_deg - gt_deg) % 360.0
    return min(d, 360.0 - d)


def orientation_errors(pred: PanopticMap, gt: PanopticMap,
                       pairs: Sequence[tuple[int, int]]) -> list[float]:
    """Absolute angular errors for matched pairs that carry an orientation on both sides."""
    p_ori = {i.id: i.orientation_deg for i in pred.instances}
    g_ori = {i.id: i.orientation_deg for i in gt.instances}
    errs = []
    for pid, gid in pairs:
        a, b = p_ori.get(pid), g_ori.get(gid)
        if a is not None and b is not None:
            errs.append(angular_error(a, b))
    return errs


def maae(errors: Sequence[float]) -> float | None:
    return float(np.mean(errors)) if len(errors) else None


def balanced_accuracy(pred: Sequence[int], gt: Sequence[int], num_classes: int
                      ) -> float | None:
    """Mean per-class recall over classes with at least one ground-truth sample."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    recalls = []
    for c in range(num_classes):
        sel = gt == c
        if sel.any():
            recalls.append(float(np.mean(pred[sel] == c)))
    return 100.0 * float(np.mean(recalls)) if recalls else None


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    miou: float | None = None
    per_class_iou: list = field(default_factory=list)
    pq: float | None = None
    sq: float | None = None
    rq: float | None = None
    pq_things: float | None = None
    sq_things: float | None = None
    rq_things: float | None = None
    pq_stuff: float | None = None
    sq_stuff: float | None = None
    rq_stuff: float | None = None
    maae_deg: float | None = None
    bacc: float | None = None
    confusion: list = field(default_factory=list)
    per_class_pq: dict = field(default_factory=dict)
    per_image_pq: list = field(default_factory=list)
    num_images: int = 0
    num_skipped: int = 0
    settings: dict = field(default_factory=dict)

    SCALARS = ("miou", "pq", "sq", "rq", "pq_things", "sq_things", "rq_things",
               "pq_stuff", "sq_stuff", "rq_stuff", "maae_deg", "bacc")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = []
        for name in self.SCALARS:
            v = getattr(self, name)
            lines.append(f"{name}={'absent' if v is None else f'{v:.2f}'}")
        lines.append(f"num_images={self.num_images}")
        lines.append(f"num_skipped={self.num_skipped}")
        return "\n".join(lines) + "\n"


class Evaluator:
    """Accumulates per-image results into an :class:`EvalReport`."""

    def __init__(self, num_classes: int, num_scene_classes: int, spec: ThingStuffSpec):
        self.spec = spec
        self.num_scene_classes = num_scene_classes
        self.confusion = ConfusionMatrix(num_classes, spec.void_id)
        self.pq = PQStat()
        self.errors: list[float] = []
        self.scene_pred: list[int] = []
        self.scene_gt: list[int] = []
        self.per_image_pq: list[float | None] = []
        self.num_images = 0
        self.num_skipped = 0
        self.has_panoptic = False

    def add(self, semantic_pred: np.ndarray | None = None, semantic_gt: np.ndarray | None = None,
            panoptic_pred: PanopticMap | None = None, panoptic_gt: PanopticMap | None = None,
            scene_pred: int | None = None, scene_gt: int | None = None) -> None:
        self.num_images += 1
        if semantic_pred is not None and semantic_gt is not None:
            self.confusion.update(semantic_pred, semantic_gt)
        if panoptic_pred is not None and panoptic_gt is not None:
            self.has_panoptic = True
            stat, pairs = match_segments(panoptic_pred, panoptic_gt, self.spec)
            self.pq.merge(stat)
            self.per_image_pq.append(stat.summary()["pq"])
            self.errors.extend(orientation_errors(panoptic_pred, panoptic_gt, pairs))
        if scene_pred is not None and scene_gt is not None:
            self.scene_pred.append(int(scene_pred))
            self.scene_gt.append(int(scene_gt))

    def report(self, settings: dict | None = None) -> EvalReport:
        r = EvalReport(settings=dict(settings or {}))
        r.num_images = self.num_images
        r.num_skipped = self.num_skipped
        if self.confusion.matrix.sum():
            r.miou = self.confusion.miou()
            r.per_class_iou = [None if v is None else 100.0 * v
                               for v in self.confusion.per_class_iou()]
            r.confusion = self.confusion.matrix.tolist()
        if self.has_panoptic:
            s = pq_summary(self.pq, self.spec)
            r.pq, r.sq, r.rq = s["all"]["pq"], s["all"]["sq"], s["all"]["rq"]
            r.pq_things, r.sq_things, r.rq_things = (s["things"][k] for k in ("pq", "sq", "rq"))
            r.pq_stuff, r.sq_stuff, r.rq_stuff = (s["stuff"][k] for k in ("pq", "sq", "rq"))
            r.per_class_pq = {str(c): {k: (100.0 * v if k in ("pq", "sq", "rq") else v)
                                       for k, v in d.items()}
                              for c, d in self.pq.per_class().items()}
            r.per_image_pq = self.per_image_pq
        r.maae_deg = maae(self.errors)
        if self.scene_gt:
            r.bacc = balanced_accuracy(self.scene_pred, self.scene_gt, self.num_scene_classes)
        return r


def is_percent(v: float | None) -> bool:
    return v is None or (0.0 <= v <= 100.0 + 1e-9 and not math.isnan(v))
