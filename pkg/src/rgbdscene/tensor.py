"""Dense float32 kernels over NHWC arrays.

Tensors are plain ``numpy.ndarray`` objects in float32, channels last.  Every
public kernel returns a fresh array and raises :class:`NumericError` if the
result is not finite.

Parallel kernels split their work into blocks whose boundaries depend only on
the operand shapes, never on the thread count.  Each block is computed by the
same single-threaded code whichever worker runs it, so results are bitwise
identical for any ``set_num_threads`` value.
"""
from __future__ import annotations

import contextlib
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf
from threadpoolctl import threadpool_limits

from .errors import ConfigurationError, NumericError

Tensor = np.ndarray

# Rows per work block for row-parallel kernels.
ROW_BLOCK = 2048

_lock = threading.Lock()
_num_threads = 1
_executor: ThreadPoolExecutor | None = None
_blas_limited = False


def _default_threads() -> int:
    env = os.environ.get("EMSF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _limit_blas() -> None:
    # Inner BLAS threading would make block results depend on its own
    # scheduling; the engine owns parallelism instead.
    global _blas_limited
    if not _blas_limited:
        threadpool_limits(limits=1, user_api="blas")
        _blas_limited = True


def set_num_threads(n: int) -> None:
    """Set the worker count used by parallel kernels."""
    global _num_threads, _executor
    if n < 1:
        raise ConfigurationError(f"thread count must be >= 1, got {n}")
    with _lock:
        if n == _num_threads:
            return
        if _executor is not None:
            _executor.shutdown(wait=True)
            _executor = None
        _num_threads = n


def get_num_threads() -> int:
    return _num_threads


@contextlib.contextmanager
def num_threads(n: int) -> Iterator[None]:
    previous = get_num_threads()
    set_num_threads(n)
    try:
        yield
    finally:
        set_num_threads(previous)


def _get_executor() -> ThreadPoolExecutor:
    global _executor
    with _lock:
        if _executor is None:
            _executor = ThreadPoolExecutor(max_workers=_num_threads,
                                           thread_name_prefix="rgbdscene")
        return _executor


def parallel_for(fn: Callable[[int], None], n_tasks: int) -> None:
    """Run ``fn(i)`` for ``i in range(n_tasks)``; order of side effects is free."""
    _limit_blas()
    if _num_threads == 1 or n_tasks <= 1:
        for i in range(n_tasks):
            fn(i)
        return
    futures = [_get_executor().submit(fn, i) for i in range(n_tasks)]
    for f in futures:
        f.result()


def blocks(n: int, size: int) -> list[tuple[int, int]]:
    return [(s, min(s + size, n)) for s in range(0, n, size)]


_set_default = _default_threads()
if _set_default != 1:
    set_num_threads(_set_default)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(x).all():
        raise NumericError(f"{what} contains non-finite values")
    return x


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float32)


# ---------------------------------------------------------------------------
# Elementwise and normalization kernels
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    out = np.empty_like(x)
    _gelu_into(x, out)
    return check_finite(out, "gelu output")


def _gelu_into(x: Tensor, out: Tensor) -> None:
    np.multiply(x, np.float32(1.0 / np.sqrt(2.0)), out=out)
    erf(out, out=out)
    out += np.float32(1.0)
    out *= x
    out *= np.float32(0.5)


def relu(x: Tensor) -> Tensor:
    return np.maximum(as_tensor(x), np.float32(0.0))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    x = as_tensor(x)
    out = x - x.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return check_finite(out, "softmax output")


def _layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    centered *= 1.0 / np.sqrt(var + np.float32(eps))
    centered *= gamma
    centered += beta
    return centered


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel (last) axis."""
    x = as_tensor(x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(
            f"layer_norm parameters {gamma.shape}/{beta.shape} do not match {c} channels")
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    rows = x.reshape(-1, c)
    out = np.empty_like(rows)
    spans = blocks(rows.shape[0], ROW_BLOCK)

    def work(i: int) -> None:
        s, e = spans[i]
        out[s:e] = _layer_norm_rows(rows[s:e], gamma, beta, eps)

    parallel_for(work, len(spans))
    return check_finite(out.reshape(x.shape), "layer_norm output")


def group_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: Sequence[int],
                     eps: float = 1e-5) -> Tensor:
    """Layer norm applied independently to consecutive channel groups."""
    x = as_tensor(x)
    if sum(groups) != x.shape[-1]:
        raise ConfigurationError(f"channel groups {list(groups)} do not cover {x.shape[-1]}")
    parts = []
    start = 0
    for g in groups:
        sl = slice(start, start + g)
        parts.append(layer_norm(x[..., sl], gamma[sl], beta[sl], eps))
        start += g
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# Matrix products
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading dims.

    Work is split into (batch, row-block) tiles; each tile is one
    single-threaded BLAS call.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigurationError("matmul operands need at least two dims")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    m, n = a.shape[-2], b.shape[-1]
    a3 = np.broadcast_to(a, batch + a.shape[-2:]).reshape(-1, m, a.shape[-1])
    b3 = np.broadcast_to(b, batch + b.shape[-2:]).reshape(-1, b.shape[-2], n)
    out = np.empty((a3.shape[0], m, n), dtype=np.float32)
    tiles = [(i, s, e) for i in range(a3.shape[0]) for s, e in blocks(m, ROW_BLOCK)]

    def work(t: int) -> None:
        i, s, e = tiles[t]
        np.matmul(a3[i, s:e], b3[i], out=out[i, s:e])

    parallel_for(work, len(tiles))
    return check_finite(out.reshape(batch + (m, n)), "matmul output")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           activation: str | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis, with optional fused activation.

    ``weight`` is ``[out, in]``.  ``activation`` is one of None, "relu", "gelu".
    """
    x = as_tensor(x)
    k = x.shape[-1]
    if weight.ndim != 2 or weight.shape[1] != k:
        raise ConfigurationError(f"linear weight {weight.shape} does not accept {k} inputs")
    n_out = weight.shape[0]
    if bias is not None and bias.shape != (n_out,):
        raise ConfigurationError(f"linear bias {bias.shape} does not match {n_out} outputs")
    rows = x.reshape(-1, k)
    out = np.empty((rows.shape[0], n_out), dtype=np.float32)
    wt = weight.T
    spans = blocks(rows.shape[0], ROW_BLOCK)

    def work(i: int) -> None:
        s, e = spans[i]
        dst = out[s:e]
        np.matmul(rows[s:e], wt, out=dst)
        if bias is not None:
            dst += bias
        if activation == "relu":
            np.maximum(dst, 0.0, out=dst)
        elif activation == "gelu":
            _gelu_into(dst.copy(), dst)

    parallel_for(work, len(spans))
    return check_finite(out.reshape(x.shape[:-1] + (n_out,)), "linear output")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0, activation: str | None = None) -> Tensor:
    """2-D convolution on NHWC input with ``weight`` laid out ``[out, kH, kW, in]``.

    Lowered to im2col + GEMM per block of output rows.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ConfigurationError(f"conv2d expects NHWC input, got shape {x.shape}")
    out_c, kh, kw, in_c = weight.shape
    if x.shape[-1] != in_c:
        raise ConfigurationError(f"conv2d weight expects {in_c} channels, input has {x.shape[-1]}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d needs stride >= 1 and padding >= 0")
    if bias is not None and bias.shape != (out_c,):
        raise ConfigurationError(f"conv2d bias {bias.shape} does not match {out_c} filters")
    b, h, w, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    wmat = weight.reshape(out_c, kh * kw * in_c).T
    out = np.empty((b, ho, wo, out_c), dtype=np.float32)
    rows_per_block = max(1, ROW_BLOCK // wo)
    tiles = [(i, s, e) for i in range(b) for s, e in blocks(ho, rows_per_block)]
    patchify = kh == stride and kw == stride

    def work(t: int) -> None:
        i, s, e = tiles[t]
        if patchify:
            src = x[i, s * stride:e * stride, :wo * stride]
            cols = src.reshape(e - s, kh, wo, kw, in_c).transpose(0, 2, 1, 3, 4)
        else:
            src = x[i, s * stride:(e - 1) * stride + kh]
            win = np.lib.stride_tricks.sliding_window_view(src, (kh, kw), axis=(0, 1))
            cols = win[::stride, ::stride][:, :wo].transpose(0, 1, 3, 4, 2)
        cols = cols.reshape((e - s) * wo, kh * kw * in_c)
        dst = out[i, s:e].reshape((e - s) * wo, out_c)
        np.matmul(cols, wmat, out=dst)
        if bias is not None:
            dst += bias
        if activation == "relu":
            np.maximum(dst, 0.0, out=dst)

    parallel_for(work, len(tiles))
    return check_finite(out, "conv2d output")


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _interp_axis(n_in: int, n_out: int, align_corners: bool):
    dst = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = dst * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(n_out)
    else:
        src = (dst + 0.5) * (n_in / n_out) - 0.5
        src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(np.float32)
    return i0, i1, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear resize of an NHWC tensor (half-pixel centers unless ``align_corners``)."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError("resize target must be at least 1x1")
    _, h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, fy = _interp_axis(h, out_h, align_corners)
    x0, x1, fx = _interp_axis(w, out_w, align_corners)
    top = x[:, y0]
    rows = top + (x[:, y1] - top) * fy[None, :, None, None]
    left = rows[:, :, x0]
    out = left + (rows[:, :, x1] - left) * fx[None, None, :, None]
    return check_finite(np.ascontiguousarray(out, dtype=np.float32), "resize output")
