"""SwinV2 backbone for RGB-D input.

Four stages of post-norm SwinV2 blocks with scaled cosine window attention,
alternating plain and half-window-shifted windows.  Attention heads are
head-grouped: each head projects, attends and writes back only its own
contiguous ``head_dim`` channel slice, so heads fed from depth-only embedding
channels stay depth-only until the first MLP.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import EncoderConfig, Variant
from .errors import ConfigurationError

MASK_VALUE = -100.0
MAX_LOGIT_SCALE = math.log(100.0)
NORM_GUARD = 1e-6
# Windows per attention work block.
WINDOW_BLOCK = 32


@dataclass
class FeaturePyramid:
    """Stage outputs at 1/4, 1/8, 1/16 and 1/32 of the input resolution."""

    stages: list[np.ndarray]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.stages[i]

    def __len__(self) -> int:
        return len(self.stages)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [s.shape for s in self.stages]


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

def pad_to_window(x: np.ndarray, window: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad bottom and right so H and W become multiples of ``window``.

    Returns the padded tensor and the original ``(H, W)`` for :func:`crop`.
    """
    _, h, w, _ = x.shape
    ph = -h % window
    pw = -w % window
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
    return x, (h, w)


def crop(x: np.ndarray, pad_spec: tuple[int, int]) -> np.ndarray:
    h, w = pad_spec
    if x.shape[1] == h and x.shape[2] == w:
        return x
    return np.ascontiguousarray(x[:, :h, :w])


def window_partition(x: np.ndarray, window: int) -> np.ndarray:
    """``[B, H, W, C] -> [B * H/M * W/M, M, M, C]``, windows in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ConfigurationError(f"extent {h}x{w} is not a multiple of window {window}")
    x = x.reshape(b, h // window, window, w // window, window, c)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4, 5)).reshape(-1, window, window, c)


def window_reverse(windows: np.ndarray, window: int, h: int, w: int) -> np.ndarray:
    c = windows.shape[-1]
    x = windows.reshape(-1, h // window, w // window, window, window, c)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4, 5)).reshape(-1, h, w, c)


@functools.lru_cache(maxsize=64)
def attention_mask(hp: int, wp: int, h: int, w: int, window: int,
                   shift: int) -> np.ndarray | None:
    """Additive mask ``[nW, M*M, M*M]`` for one image, or None if nothing is masked.

    Tokens attend only within the same region; regions are the wrapped strips
    created by the cyclic shift, and bottom-right padding is its own region.
    """
    if shift == 0 and (hp, wp) == (h, w):
        return None
    region = np.zeros((hp, wp), dtype=np.int64)
    if shift:
        cnt = 0
        for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
                region[hs, ws] = cnt
                cnt += 1
    pad = np.zeros((hp, wp), dtype=np.int64)
    pad[h:, :] = 1
    pad[:, w:] = 1
    if shift:
        pad = np.roll(pad, (-shift, -shift), axis=(0, 1))
    ids = region * 2 + pad
    ids = window_partition(ids[None, :, :, None], window).reshape(-1, window * window)
    mask = np.where(ids[:, :, None] == ids[:, None, :], 0.0, MASK_VALUE).astype(np.float32)
    mask.setflags(write=False)
    return mask


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def relative_coords_table(window: int) -> np.ndarray:
    """Signed-log relative offsets ``[(2M-1)^2, 2]`` fed to the bias MLP."""
    r = np.arange(-(window - 1), window, dtype=np.float32)
    table = np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)
    table = table / max(window - 1, 1) * 8.0
    return (np.sign(table) * np.log2(np.abs(table) + 1.0) / np.log2(8.0)).astype(np.float32)


def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    coords = coords.reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


@dataclass
class AttentionWeights:
    """Parameters of one window attention module, pre-arranged per head."""

    n_heads: int
    head_dim: int
    qkv: np.ndarray         # [heads, d, 3d], float64
    qkv_bias: np.ndarray    # [heads, 1, 3d], float64
    scale: np.ndarray       # [heads, 1, 1], exp(logit_scale) clamped, float64
    bias: np.ndarray        # [heads, M*M, M*M], continuous position bias
    proj: np.ndarray        # [heads, d, d]
    proj_bias: np.ndarray   # [heads, 1, d]

    @classmethod
    def from_store(cls, weights: Mapping[str, np.ndarray], prefix: str, channels: int,
                   head_dim: int, window: int) -> "AttentionWeights":
        if channels % head_dim:
            raise ConfigurationError(f"{channels} channels not divisible by head_dim {head_dim}")
        n = channels // head_dim
        d = head_dim
        w_qkv = weights[f"{prefix}.qkv.weight"]
        b_qkv = weights[f"{prefix}.qkv.bias"]
        w_proj = weights[f"{prefix}.proj.weight"]
        b_proj = weights[f"{prefix}.proj.bias"]
        qkv = np.empty((n, d, 3 * d), dtype=np.float64)
        qkv_bias = np.empty((n, 1, 3 * d), dtype=np.float64)
        proj = np.empty((n, d, d), dtype=np.float32)
        for h in range(n):
            cols = slice(h * d, (h + 1) * d)
            for part in range(3):
                rows = slice(part * channels + h * d, part * channels + (h + 1) * d)
                qkv[h, :, part * d:(part + 1) * d] = w_qkv[rows, cols].T
                qkv_bias[h, 0, part * d:(part + 1) * d] = b_qkv[rows]
            proj[h] = w_proj[cols, cols].T
        proj_bias = b_proj.reshape(n, 1, d).astype(np.float32)
        tau = weights[f"{prefix}.logit_scale"]
        scale = np.exp(np.minimum(tau.astype(np.float64), MAX_LOGIT_SCALE)).reshape(n, 1, 1)
        hidden = T.linear(relative_coords_table(window), weights[f"{prefix}.cpb.fc1.weight"],
                          weights[f"{prefix}.cpb.fc1.bias"], activation="relu")
        table = T.linear(hidden, weights[f"{prefix}.cpb.fc2.weight"])
        idx = relative_position_index(window)
        bias = 16.0 * T.sigmoid(table[idx.reshape(-1)])
        bias = bias.reshape(window * window, window * window, n).transpose(2, 0, 1)
        return cls(n, d, qkv, qkv_bias, scale, np.ascontiguousarray(bias), proj, proj_bias)


def _attend(x: np.ndarray, aw: AttentionWeights, mask: np.ndarray | None) -> np.ndarray:
    """Attention for a block of windows ``x [N, L, C]``; mask is ``[N, L, L]`` or None."""
    n_win, length, _ = x.shape
    d = aw.head_dim
    # The logit scale reaches 100, which turns float32 rounding of q and k
    # into ~1e-5 logit error, so everything up to the softmax runs in float64.
    xh = x.reshape(n_win * length, aw.n_heads, d).transpose(1, 0, 2).astype(np.float64)
    qkv = np.matmul(xh, aw.qkv)
    qkv += aw.qkv_bias
    qkv = qkv.reshape(aw.n_heads, n_win, length, 3 * d)
    q = qkv[..., :d]
    k = qkv[..., d:2 * d]
    v = qkv[..., 2 * d:].astype(np.float32)
    q = q / (np.sqrt(np.sum(q * q, axis=-1, keepdims=True)) + NORM_GUARD)
    k = k / (np.sqrt(np.sum(k * k, axis=-1, keepdims=True)) + NORM_GUARD)
    logits = np.matmul(q, k.transpose(0, 1, 3, 2))
    logits *= aw.scale[:, None]
    logits += aw.bias[:, None]
    if mask is not None:
        logits += mask[None]
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    out = np.matmul(logits.astype(np.float32), v).reshape(aw.n_heads, n_win * length, d)
    out = np.matmul(out, aw.proj)
    out += aw.proj_bias
    return out.transpose(1, 0, 2).reshape(n_win, length, aw.n_heads * d)


def cosine_window_attention(windows: np.ndarray, aw: AttentionWeights,
                            mask: np.ndarray | None = None) -> np.ndarray:
    """Scaled cosine multi-head attention within each window.

    ``windows`` is ``[N, M*M, C]``.  ``mask`` is ``[nW, M*M, M*M]`` with
    ``N`` a multiple of ``nW`` (window ``i`` uses ``mask[i % nW]``).  Logits are
    ``cos(q, k) * min(exp(tau), 100) + bias``; masked pairs get -100.
    """
    windows = T.as_tensor(windows)
    n_win, length, c = windows.shape
    if c != aw.n_heads * aw.head_dim:
        raise ConfigurationError(
            f"{c} channels do not match {aw.n_heads} heads of {aw.head_dim}")
    if aw.bias.shape[-1] != length:
        raise ConfigurationError(f"window of {length} tokens does not match position bias")
    if mask is not None:
        if n_win % mask.shape[0]:
            raise ConfigurationError("window count is not a multiple of the mask count")
        mask_full = np.broadcast_to(mask[None], (n_win // mask.shape[0],) + mask.shape)
        mask_full = mask_full.reshape(n_win, length, length)
    out = np.empty_like(windows)
    spans = T.blocks(n_win, WINDOW_BLOCK)

    def work(i: int) -> None:
        s, e = spans[i]
        out[s:e] = _attend(windows[s:e], aw, None if mask is None else mask_full[s:e])

    T.parallel_for(work, len(spans))
    return T.check_finite(out, "attention output")


def window_msa(x: np.ndarray, aw: AttentionWeights, shifted: bool, window: int) -> np.ndarray:
    """(Shifted) window attention module on a feature map, with internal padding."""
    b, h, w, c = x.shape
    xp, pad_spec = pad_to_window(x, window)
    hp, wp = xp.shape[1:3]
    shift = window // 2 if shifted else 0
    if shift:
        xp = np.roll(xp, (-shift, -shift), axis=(1, 2))
    mask = attention_mask(hp, wp, h, w, window, shift)
    win = window_partition(xp, window).reshape(-1, window * window, c)
    out = cosine_window_attention(win, aw, mask)
    out = window_reverse(out.reshape(-1, window, window, c), window, hp, wp)
    if shift:
        out = np.roll(out, (shift, shift), axis=(1, 2))
    return crop(out, pad_spec)


# ---------------------------------------------------------------------------
# Blocks and stages
# ---------------------------------------------------------------------------

def swinv2_block(x: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str,
                 cfg: EncoderConfig, shifted: bool, eps: float = 1e-5,
                 attn: AttentionWeights | None = None) -> np.ndarray:
    """Post-norm SwinV2 block: ``x + LN(attn(x))`` then ``x + LN(mlp(x))``."""
    c = x.shape[-1]
    if attn is None:
        attn = AttentionWeights.from_store(weights, f"{prefix}.attn", c, cfg.head_dim,
                                           cfg.window_size)
    a = window_msa(x, attn, shifted, cfg.window_size)
    x = x + T.layer_norm(a, weights[f"{prefix}.norm1.weight"], weights[f"{prefix}.norm1.bias"], eps)
    hid = T.linear(x, weights[f"{prefix}.mlp.fc1.weight"], weights[f"{prefix}.mlp.fc1.bias"],
                   activation="gelu")
    m = T.linear(hid, weights[f"{prefix}.mlp.fc2.weight"], weights[f"{prefix}.mlp.fc2.bias"])
    return x + T.layer_norm(m, weights[f"{prefix}.norm2.weight"], weights[f"{prefix}.norm2.bias"], eps)


def merge_gather(x: np.ndarray) -> np.ndarray:
    """Concatenate each 2x2 neighbourhood: ``[B,H,W,C] -> [B,H/2,W/2,4C]``."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        x = np.pad(x, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)))
    return np.concatenate(
        [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], axis=-1)


def patch_merge(x: np.ndarray, weights: Mapping[str, np.ndarray], prefix: str,
                eps: float = 1e-5, normalize: bool = True) -> np.ndarray:
    y = T.linear(merge_gather(x), weights[f"{prefix}.reduction.weight"])
    if not normalize:
        return y
    return T.layer_norm(y, weights[f"{prefix}.norm.weight"], weights[f"{prefix}.norm.bias"], eps)


def patch_embed(rgb: np.ndarray, depth: np.ndarray | None, cfg: EncoderConfig,
                weights: Mapping[str, np.ndarray], eps: float = 1e-5,
                normalize: bool = True) -> np.ndarray:
    """Strided 4x4 patch embedding for the configured variant.

    Split variants embed RGB and depth with separate convolutions into
    disjoint channel ranges and normalize each range on its own.
    """
    variant = Variant(cfg.variant)
    p = cfg.patch_size
    rgb = T.as_tensor(rgb)
    if rgb.ndim != 4 or rgb.shape[-1] != 3:
        raise ConfigurationError(f"rgb must be [B,H,W,3], got {rgb.shape}")
    if rgb.shape[1] % p or rgb.shape[2] % p:
        raise ConfigurationError(f"input {rgb.shape[1]}x{rgb.shape[2]} not divisible by {p}")
    if variant.uses_depth:
        if depth is None:
            raise ConfigurationError(f"variant {variant.value} requires a depth input")
        depth = T.as_tensor(depth)
        if depth.shape != rgb.shape[:3] + (1,):
            raise ConfigurationError(f"depth shape {depth.shape} does not match rgb {rgb.shape}")

    if variant is Variant.RGB_ONLY:
        x = T.conv2d(rgb, weights["encoder.embed.rgb.weight"], weights["encoder.embed.rgb.bias"], p)
    elif variant is Variant.SWINV2_T_4CH:
        x = T.conv2d(np.concatenate([rgb, depth], axis=-1), weights["encoder.embed.rgbd.weight"],
                     weights["encoder.embed.rgbd.bias"], p)
    else:
        xr = T.conv2d(rgb, weights["encoder.embed.rgb.weight"], weights["encoder.embed.rgb.bias"], p)
        xd = T.conv2d(depth, weights["encoder.embed.depth.weight"],
                      weights["encoder.embed.depth.bias"], p)
        x = np.concatenate([xr, xd], axis=-1)
    if not normalize:
        return x
    return T.group_layer_norm(x, weights["encoder.embed.norm.weight"],
                              weights["encoder.embed.norm.bias"], cfg.embed_groups(), eps)


def stage_attention_weights(weights: Mapping[str, np.ndarray],
                            cfg: EncoderConfig) -> dict[str, AttentionWeights]:
    """Pre-arranged attention parameters for every block, keyed by block prefix."""
    out = {}
    for s, (c, depth) in enumerate(zip(cfg.stage_channels(), cfg.depths_per_stage)):
        for b in range(depth):
            prefix = f"encoder.stages.{s}.blocks.{b}"
            out[prefix] = AttentionWeights.from_store(weights, f"{prefix}.attn", c,
                                                      cfg.head_dim, cfg.window_size)
    return out


def encode(rgb: np.ndarray, depth: np.ndarray | None, cfg: EncoderConfig,
           weights: Mapping[str, np.ndarray], eps: float = 1e-5,
           attention: dict[str, AttentionWeights] | None = None) -> FeaturePyramid:
    """Run the backbone; stage outputs are taken after each stage's blocks."""
    cfg.validate()
    if attention is None:
        attention = stage_attention_weights(weights, cfg)
    x = patch_embed(rgb, depth, cfg, weights, eps)
    stages = []
    for s, depth_s in enumerate(cfg.depths_per_stage):
        if s > 0:
            x = patch_merge(x, weights, f"encoder.stages.{s}.merge", eps)
        for b in range(depth_s):
            prefix = f"encoder.stages.{s}.blocks.{b}"
            x = swinv2_block(x, weights, prefix, cfg, shifted=b % 2 == 1, eps=eps,
                             attn=attention[prefix])
        stages.append(x)
    return FeaturePyramid(stages)
