"""End-to-end network and post-processing for RGB-D scene analysis."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .config import ModelConfig, Variant
from .encoder import FeaturePyramid, encode, stage_attention_weights
from .errors import ConfigurationError
from .heads import TaskOutputs, decode
from .panoptic import (
    DEFAULT_MIN_INSTANCE_PIXELS,
    DEFAULT_NMS_KERNEL,
    DEFAULT_THRESHOLD,
    DEFAULT_TOP_K,
    PanopticMap,
    ThingStuffSpec,
    panoptic_from_outputs,
)

# Input extents are padded to a multiple of the total downsampling.
INPUT_ALIGN = 32


@dataclass(frozen=True)
class PostprocessSettings:
    center_threshold: float = DEFAULT_THRESHOLD
    nms_kernel: int = DEFAULT_NMS_KERNEL
    top_k: int = DEFAULT_TOP_K
    min_instance_pixels: int = DEFAULT_MIN_INSTANCE_PIXELS


@dataclass
class Prediction:
    outputs: TaskOutputs
    semantic: np.ndarray          # [H, W] labels 1..num_classes
    panoptic: PanopticMap
    scene: int
    timings: dict = field(default_factory=dict)


def preprocess(rgb: np.ndarray, depth: np.ndarray | None, config: ModelConfig):
    """uint8 RGB ``[H, W, 3]`` and depth in millimeters ``[H, W]`` to network input.

    RGB is scaled to [0, 1] and standardized per channel; depth is multiplied
    by ``depth_scale`` and standardized with ``depth_mean``/``depth_std``.
    Missing depth readings (0) stay at the standardized value of 0 m.
    """
    pre = config.preprocess
    x = np.asarray(rgb, dtype=np.float32) / 255.0
    x = (x - np.asarray(pre.rgb_mean, np.float32)) / np.asarray(pre.rgb_std, np.float32)
    x = x[None].astype(np.float32)
    d = None
    if depth is not None:
        d = np.asarray(depth, dtype=np.float32) * np.float32(pre.depth_scale)
        d = (d - np.float32(pre.depth_mean)) / np.float32(pre.depth_std)
        d = d[None, :, :, None].astype(np.float32)
    return x, d


def pad_input(x: np.ndarray, align: int = INPUT_ALIGN) -> np.ndarray:
    _, h, w, _ = x.shape
    ph, pw = -h % align, -w % align
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
    return x


class Model:
    """Network with prepared weights; reentrant across threads."""

    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray]):
        config.validate()
        self.config = config
        self.weights = weights
        self.attention = stage_attention_weights(weights, config.encoder)
        self.spec = ThingStuffSpec.from_stuff(config.num_classes, config.stuff_classes)

    @property
    def uses_depth(self) -> bool:
        return Variant(self.config.encoder.variant).uses_depth

    def encode(self, rgb: np.ndarray, depth: np.ndarray | None) -> FeaturePyramid:
        return encode(rgb, depth, self.config.encoder, self.weights,
                      self.config.layer_norm_eps, self.attention)

    def forward(self, rgb: np.ndarray, depth: np.ndarray | None,
                timings: dict | None = None) -> TaskOutputs:
        """Network forward on standardized ``[B, H, W, 3]`` / ``[B, H, W, 1]`` input."""
        if self.uses_depth and depth is None:
            raise ConfigurationError(
                f"variant {Variant(self.config.encoder.variant).value} requires depth")
        if not self.uses_depth:
            depth = None
        _, h, w, _ = rgb.shape
        if h < INPUT_ALIGN or w < INPUT_ALIGN:
            raise ConfigurationError(f"input {h}x{w} smaller than {INPUT_ALIGN}x{INPUT_ALIGN}")
        rgb_p = pad_input(rgb)
        depth_p = None if depth is None else pad_input(depth)
        t0 = time.perf_counter()
        pyramid = self.encode(rgb_p, depth_p)
        t1 = time.perf_counter()
        out = decode(pyramid, self.config, self.weights, rgb_p.shape[1], rgb_p.shape[2], timings)
        if timings is not None:
            timings["encoder"] = t1 - t0
        if rgb_p.shape[1:3] != (h, w):
            out = TaskOutputs(out.semantic_logits[:, :h, :w], out.center_heatmap[:, :h, :w],
                              out.offsets[:, :h, :w], out.orientation[:, :h, :w],
                              out.scene_logits)
        return out

    def predict(self, rgb: np.ndarray, depth: np.ndarray | None,
                settings: PostprocessSettings = PostprocessSettings(),
                gt_semantic: np.ndarray | None = None) -> Prediction:
        """Full pipeline for one raw image (uint8 RGB, depth in mm)."""
        if self.uses_depth and depth is None:
            raise ConfigurationError(
                f"variant {Variant(self.config.encoder.variant).value} requires depth")
        timings: dict = {}
        x, d = preprocess(rgb, depth if self.uses_depth else None, self.config)
        t_start = time.perf_counter()
        out = self.forward(x, d, timings)
        t0 = time.perf_counter()
        semantic = np.argmax(out.semantic_logits[0], axis=-1).astype(np.int64) + 1
        pan = panoptic_from_outputs(
            semantic, out.center_heatmap[0, ..., 0], out.offsets[0], out.orientation[0],
            self.spec, settings.center_threshold, settings.nms_kernel, settings.top_k,
            settings.min_instance_pixels, gt_semantic)
        scene = int(np.argmax(out.scene_logits[0]))
        t1 = time.perf_counter()
        timings["postprocess"] = t1 - t0
        timings["total"] = t1 - t_start
        return Prediction(out, semantic, pan, scene, timings)
