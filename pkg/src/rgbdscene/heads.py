"""Context module, dense decoders and task heads."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import FeaturePyramid
from .errors import ConfigurationError


@dataclass
class TaskOutputs:
    """Raw network outputs; dense maps are at input resolution."""

    semantic_logits: np.ndarray   # [B, H, W, num_classes]
    center_heatmap: np.ndarray    # [B, H, W, 1], in [0, 1]
    offsets: np.ndarray           # [B, H, W, 2], (dy, dx) in input pixels, pixel -> center
    orientation: np.ndarray       # [B, H, W, 2], (sin, cos), not normalized
    scene_logits: np.ndarray      # [B, num_scene_classes]


def bin_edges(n: int, bins: int) -> list[tuple[int, int]]:
    """Adaptive-pooling bin boundaries; every bin covers at least one cell."""
    return [(i * n // bins, -(-(i + 1) * n // bins)) for i in range(bins)]


def adaptive_avg_pool(x: np.ndarray, bins: int) -> np.ndarray:
    b, h, w, c = x.shape
    out = np.empty((b, bins, bins, c), dtype=np.float32)
    for i, (y0, y1) in enumerate(bin_edges(h, bins)):
        for j, (x0, x1) in enumerate(bin_edges(w, bins)):
            out[:, i, j] = x[:, y0:y1, x0:x1].mean(axis=(1, 2))
    return out


def context_module(x: np.ndarray, weights: Mapping[str, np.ndarray],
                   bins=(1, 2, 4, 8)) -> tuple[np.ndarray, np.ndarray]:
    """Pyramid pooling over the deepest features.

    Each bin size gets average pooling, a 1x1 projection with ReLU and a
    bilinear resize back; branches are concatenated after ``x`` and fused by
    a 1x1 projection with ReLU.  Returns ``(features, pooled)`` where
    ``pooled`` is the projected global-average branch ``[B, Cb]``.
    """
    _, h, w, _ = x.shape
    parts = [x]
    pooled = None
    for i, n_bins in enumerate(bins):
        y = T.linear(adaptive_avg_pool(x, n_bins), weights[f"context.branches.{i}.weight"],
                     weights[f"context.branches.{i}.bias"], activation="relu")
        if n_bins == 1:
            pooled = y[:, 0, 0]
        parts.append(T.bilinear_resize(y, h, w))
    fused = T.linear(np.concatenate(parts, axis=-1), weights["context.fuse.weight"],
                     weights["context.fuse.bias"], activation="relu")
    if pooled is None:
        raise ConfigurationError("context bins must include the global bin 1")
    return fused, pooled


def scene_head(pooled: np.ndarray, weights: Mapping[str, np.ndarray]) -> np.ndarray:
    return T.linear(pooled, weights["scene_head.weight"], weights["scene_head.bias"])


def emsanet_decoder(pyramid: FeaturePyramid, cm_features: np.ndarray,
                    weights: Mapping[str, np.ndarray], prefix: str,
                    trace: list | None = None) -> np.ndarray:
    """Three upsampling modules from 1/32 to 1/4 resolution.

    Each module: 3x3 conv + ReLU, bilinear upsample to the next encoder
    stage's size (x2), plus a 1x1-projected skip from that stage.
    """
    x = cm_features
    for i in range(3):
        x = T.conv2d(x, weights[f"{prefix}.blocks.{i}.weight"], weights[f"{prefix}.blocks.{i}.bias"],
                     stride=1, padding=1, activation="relu")
        skip = pyramid[2 - i]
        if skip.shape[0] != x.shape[0]:
            raise ConfigurationError("decoder skip batch mismatch")
        x = T.bilinear_resize(x, skip.shape[1], skip.shape[2])
        x = x + T.linear(skip, weights[f"{prefix}.skips.{i}.weight"],
                         weights[f"{prefix}.skips.{i}.bias"])
        if trace is not None:
            trace.append(x.shape)
    return x


def segformer_decoder(pyramid: FeaturePyramid, weights: Mapping[str, np.ndarray],
                      prefix: str) -> np.ndarray:
    """MLP decoder: per-stage linear embedding, resize to 1/4, concat
    (deepest stage first), then two pointwise layers with ReLU between."""
    h, w = pyramid[0].shape[1:3]
    parts = []
    for s in (3, 2, 1, 0):
        e = T.linear(pyramid[s], weights[f"{prefix}.embed.{s}.weight"],
                     weights[f"{prefix}.embed.{s}.bias"])
        parts.append(T.bilinear_resize(e, h, w))
    x = T.linear(np.concatenate(parts, axis=-1), weights[f"{prefix}.fuse.weight"],
                 weights[f"{prefix}.fuse.bias"], activation="relu")
    return T.linear(x, weights[f"{prefix}.out.weight"], weights[f"{prefix}.out.bias"])


def run_decoder(kind: str, pyramid: FeaturePyramid, cm_features: np.ndarray,
                weights: Mapping[str, np.ndarray], prefix: str) -> np.ndarray:
    if kind == "emsanet":
        return emsanet_decoder(pyramid, cm_features, weights, prefix)
    if kind == "segformer":
        return segformer_decoder(pyramid, weights, prefix)
    raise ConfigurationError(f"unknown decoder {kind!r}")


def dense_heads(features_sem: np.ndarray, features_inst: np.ndarray,
                weights: Mapping[str, np.ndarray], out_h: int, out_w: int):
    """Project decoder features to task channels and upsample to ``out_h x out_w``.

    Returns ``(semantic_logits, center_heatmap, offsets, orientation)``.  Offsets
    are rescaled by the upsampling factor so they stay in output pixels.
    """
    sem = T.linear(features_sem, weights["semantic_head.weight"], weights["semantic_head.bias"])
    sem = T.bilinear_resize(sem, out_h, out_w)
    heads = {}
    for name in ("center", "offset", "orientation"):
        y = T.linear(features_inst, weights[f"instance_head.{name}.weight"],
                     weights[f"instance_head.{name}.bias"])
        heads[name] = T.bilinear_resize(y, out_h, out_w)
    heat = T.sigmoid(heads["center"])
    h, w = features_inst.shape[1:3]
    offsets = heads["offset"] * np.array([out_h / h, out_w / w], dtype=np.float32)
    return sem, heat, offsets, heads["orientation"]


def decode(pyramid: FeaturePyramid, config: ModelConfig, weights: Mapping[str, np.ndarray],
           out_h: int, out_w: int, timings: dict | None = None) -> TaskOutputs:
    """Context module, both dense decoders and all heads."""
    t0 = time.perf_counter()
    cm, pooled = context_module(pyramid[3], weights, config.context.bins)
    scene = scene_head(pooled, weights)
    t1 = time.perf_counter()
    f_sem = run_decoder(config.decoder.semantic, pyramid, cm, weights, "semantic_decoder")
    f_ins = run_decoder(config.decoder.instance, pyramid, cm, weights, "instance_decoder")
    sem, heat, off, ori = dense_heads(f_sem, f_ins, weights, out_h, out_w)
    t2 = time.perf_counter()
    if timings is not None:
        timings["context"] = t1 - t0
        timings["decoders"] = t2 - t1
    return TaskOutputs(sem, heat, off, ori, scene)
