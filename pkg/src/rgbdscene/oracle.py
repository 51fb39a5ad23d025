"""Slow, loop-based float64 reference implementations.

Nothing here imports the optimized kernels; only numpy scalars/vectors and the
standard library are used, so agreement with the fast paths is evidence
rather than tautology.
"""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def naive_matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv2d(x, weight, bias, stride: int, padding: int) -> np.ndarray:
    """Per-output-pixel dot products on NHWC input, weight ``[out, kH, kW, in]``."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    b, h, w, c = x.shape
    oc, kh, kw, ic = weight.shape
    assert ic == c
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, ho, wo, oc))
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                for f in range(oc):
                    s = 0.0 if bias is None else float(bias[f])
                    for dy in range(kh):
                        iy = oy * stride + dy - padding
                        if iy < 0 or iy >= h:
                            continue
                        for dx in range(kw):
                            ix = ox * stride + dx - padding
                            if ix < 0 or ix >= w:
                                continue
                            s += float(np.dot(weight[f, dy, dx], x[n, iy, ix]))
                    out[n, oy, ox, f] = s
    return out


def naive_layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    c = flat.shape[1]
    for r in range(flat.shape[0]):
        mean = sum(flat[r]) / c
        var = sum((v - mean) ** 2 for v in flat[r]) / c
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(c):
            out[r, j] = (flat[r, j] - mean) * inv * float(gamma[j]) + float(beta[j])
    return out.reshape(x.shape)


def naive_gelu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def naive_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    for r in range(flat.shape[0]):
        m = max(flat[r])
        e = [math.exp(v - m) for v in flat[r]]
        s = sum(e)
        out[r] = [v / s for v in e]
    return out.reshape(x.shape)


def _src_coord(dst: int, n_in: int, n_out: int, align_corners: bool) -> float:
    if align_corners:
        return dst * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
    return max((dst + 0.5) * n_in / n_out - 0.5, 0.0)


def naive_bilinear_resize(x, out_h: int, out_w: int, align_corners: bool = False) -> np.ndarray:
    """Explicit four-neighbour interpolation weights per output pixel."""
    x = np.asarray(x, dtype=np.float64)
    b, h, w, c = x.shape
    out = np.zeros((b, out_h, out_w, c))
    for oy in range(out_h):
        sy = _src_coord(oy, h, out_h, align_corners)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for ox in range(out_w):
            sx = _src_coord(ox, w, out_w, align_corners)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            out[:, oy, ox] = ((1 - ly) * (1 - lx) * x[:, y0, x0] + (1 - ly) * lx * x[:, y0, x1]
                              + ly * (1 - lx) * x[:, y1, x0] + ly * lx * x[:, y1, x1])
    return out


def naive_adaptive_avg_pool(x, bins: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    b, h, w, c = x.shape
    out = np.zeros((b, bins, bins, c))
    for i in range(bins):
        y0, y1 = (i * h) // bins, math.ceil((i + 1) * h / bins)
        for j in range(bins):
            x0, x1 = (j * w) // bins, math.ceil((j + 1) * w / bins)
            acc = np.zeros((b, c))
            for yy in range(y0, y1):
                for xx in range(x0, x1):
                    acc += x[:, yy, xx]
            out[:, i, j] = acc / ((y1 - y0) * (x1 - x0))
    return out


# ---------------------------------------------------------------------------
# Attention and encoder
# ---------------------------------------------------------------------------

def _signed_log(v: float) -> float:
    return math.copysign(math.log2(abs(v) + 1.0) / 3.0, v) if v else 0.0


def naive_position_bias(weights: Mapping[str, np.ndarray], prefix: str, n_heads: int,
                        window: int) -> dict[tuple[int, int], list[float]]:
    """Continuous position bias per relative offset ``(dy, dx)`` and head."""
    w1 = np.asarray(weights[f"{prefix}.cpb.fc1.weight"], np.float64)
    b1 = np.asarray(weights[f"{prefix}.cpb.fc1.bias"], np.float64)
    w2 = np.asarray(weights[f"{prefix}.cpb.fc2.weight"], np.float64)
    table = {}
    span = max(window - 1, 1)
    for dy in range(-(window - 1), window):
        for dx in range(-(window - 1), window):
            coord = np.array([_signed_log(dy / span * 8.0), _signed_log(dx / span * 8.0)])
            hidden = np.maximum(w1 @ coord + b1, 0.0)
            raw = w2 @ hidden
            table[(dy, dx)] = [16.0 / (1.0 + math.exp(-r)) for r in raw]
    return table


def naive_attention(windows, weights: Mapping[str, np.ndarray], prefix: str, n_heads: int,
                    window: int, mask=None, head_dim: int = 32) -> np.ndarray:
    """Per-pair scaled cosine attention in float64.

    Head ``h`` reads input channels ``[h*d, (h+1)*d)`` through the diagonal
    blocks of the qkv and output projections.
    """
    x = np.asarray(windows, dtype=np.float64)
    n_win, length, c = x.shape
    d = head_dim
    assert c == n_heads * d and length == window * window
    w_qkv = np.asarray(weights[f"{prefix}.qkv.weight"], np.float64)
    b_qkv = np.asarray(weights[f"{prefix}.qkv.bias"], np.float64)
    w_proj = np.asarray(weights[f"{prefix}.proj.weight"], np.float64)
    b_proj = np.asarray(weights[f"{prefix}.proj.bias"], np.float64)
    tau = np.asarray(weights[f"{prefix}.logit_scale"], np.float64)
    bias = naive_position_bias(weights, prefix, n_heads, window)
    pos = [(i // window, i % window) for i in range(length)]
    out = np.zeros_like(x)
    for n in range(n_win):
        for h in range(n_heads):
            ch = slice(h * d, (h + 1) * d)
            scale = math.exp(min(float(tau[h]), math.log(100.0)))
            q, k, v = [], [], []
            for i in range(length):
                xi = x[n, i, ch]
                q.append(w_qkv[h * d:(h + 1) * d, ch] @ xi + b_qkv[h * d:(h + 1) * d])
                k.append(w_qkv[c + h * d:c + (h + 1) * d, ch] @ xi + b_qkv[c + h * d:c + (h + 1) * d])
                v.append(w_qkv[2 * c + h * d:2 * c + (h + 1) * d, ch] @ xi
                         + b_qkv[2 * c + h * d:2 * c + (h + 1) * d])
            qn = [qi / (math.sqrt(float(qi @ qi)) + 1e-6) for qi in q]
            kn = [kj / (math.sqrt(float(kj @ kj)) + 1e-6) for kj in k]
            for i in range(length):
                logits = []
                for j in range(length):
                    rel = (pos[i][0] - pos[j][0], pos[i][1] - pos[j][1])
                    val = float(qn[i] @ kn[j]) * scale + bias[rel][h]
                    if mask is not None:
                        val += float(mask[n % len(mask)][i][j])
                    logits.append(val)
                m = max(logits)
                e = [math.exp(val - m) for val in logits]
                s = sum(e)
                acc = np.zeros(d)
                for j in range(length):
                    acc += (e[j] / s) * v[j]
                out[n, i, ch] = w_proj[ch, ch] @ acc + b_proj[ch]
    return out


def _ln_vec(v, gamma, beta, eps):
    mean = float(np.sum(v)) / len(v)
    var = float(np.sum((v - mean) ** 2)) / len(v)
    return (v - mean) / math.sqrt(var + eps) * gamma + beta


def naive_window_msa(x, weights: Mapping[str, np.ndarray], prefix: str, n_heads: int,
                     window: int, shifted: bool, head_dim: int = 32) -> np.ndarray:
    """Window attention on ``[H, W, C]`` by explicit index arithmetic.

    Coordinates are padded to window multiples; for shifted windows, token at
    shifted position ``(r, c)`` is original pixel ``((r + s) % Hp, (c + s) % Wp)``.
    Two tokens attend freely iff they share a window and a region label.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    s = window // 2 if shifted else 0

    def band(r: int, n: int) -> int:
        if not s:
            return 0
        return 0 if r < n - window else (1 if r < n - s else 2)

    out = np.zeros((h, w, c))
    for wy in range(hp // window):
        for wx in range(wp // window):
            toks, labels, origin = [], [], []
            for i in range(window * window):
                r = wy * window + i // window
                cc = wx * window + i % window
                oy, ox = (r + s) % hp, (cc + s) % wp
                padded = oy >= h or ox >= w
                toks.append(np.zeros(c) if padded else x[oy, ox])
                labels.append((band(r, hp), band(cc, wp), padded))
                origin.append((oy, ox, padded))
            mask = [[0.0 if labels[i] == labels[j] else -100.0 for j in range(len(toks))]
                    for i in range(len(toks))]
            res = naive_attention(np.array([toks]), weights, prefix, n_heads, window,
                                  [mask], head_dim)[0]
            for i, (oy, ox, padded) in enumerate(origin):
                if not padded:
                    out[oy, ox] = res[i]
    return out


def naive_encoder(rgb, depth, cfg, weights: Mapping[str, np.ndarray], eps: float = 1e-5
                  ) -> list[np.ndarray]:
    """Straight-line backbone for a single image; returns the four stage outputs."""
    variant = getattr(cfg.variant, "value", cfg.variant)
    rgb = np.asarray(rgb, dtype=np.float64)[0]
    depth = None if depth is None else np.asarray(depth, dtype=np.float64)[0]
    p = cfg.patch_size
    g = lambda name: np.asarray(weights[name], dtype=np.float64)  # noqa: E731
    if variant == "rgb":
        convs = [(rgb, "encoder.embed.rgb")]
    elif variant == "swinv2-t":
        convs = [(np.concatenate([rgb, depth], axis=-1), "encoder.embed.rgbd")]
    else:
        convs = [(rgb, "encoder.embed.rgb"), (depth, "encoder.embed.depth")]
    h, w = rgb.shape[0] // p, rgb.shape[1] // p
    feats = []
    for src, name in convs:
        wt, bs = g(f"{name}.weight"), g(f"{name}.bias")
        f = np.zeros((h, w, wt.shape[0]))
        for y in range(h):
            for xx in range(w):
                patch = src[y * p:(y + 1) * p, xx * p:(xx + 1) * p].reshape(-1)
                f[y, xx] = wt.reshape(wt.shape[0], -1) @ patch + bs
        feats.append(f)
    x = np.concatenate(feats, axis=-1)
    gamma, beta = g("encoder.embed.norm.weight"), g("encoder.embed.norm.bias")
    groups = ([cfg.rgb_embed_channels, cfg.depth_embed_channels]
              if variant in ("swinv2-t-multi", "swinv2-t-128-multi") else [cfg.stem_channels])
    normed = np.zeros_like(x)
    for y in range(h):
        for xx in range(w):
            start = 0
            for n in groups:
                sl = slice(start, start + n)
                normed[y, xx, sl] = _ln_vec(x[y, xx, sl], gamma[sl], beta[sl], eps)
                start += n
    x = normed

    outputs = []
    for s, n_blocks in enumerate(cfg.depths_per_stage):
        if s > 0:
            hh, ww, c = x.shape
            nh, nw = -(-hh // 2), -(-ww // 2)
            red = g(f"encoder.stages.{s}.merge.reduction.weight")
            mg, mb = g(f"encoder.stages.{s}.merge.norm.weight"), g(f"encoder.stages.{s}.merge.norm.bias")
            merged = np.zeros((nh, nw, red.shape[0]))
            for y in range(nh):
                for xx in range(nw):
                    parts = []
                    for dy, dx in ((0, 0), (1, 0), (0, 1), (1, 1)):
                        yy, xq = 2 * y + dy, 2 * xx + dx
                        parts.append(x[yy, xq] if yy < hh and xq < ww else np.zeros(c))
                    merged[y, xx] = _ln_vec(red @ np.concatenate(parts), mg, mb, eps)
            x = merged
        c = x.shape[-1]
        n_heads = c // cfg.head_dim
        for b in range(n_blocks):
            pre = f"encoder.stages.{s}.blocks.{b}"
            a = naive_window_msa(x, weights, f"{pre}.attn", n_heads, cfg.window_size,
                                 shifted=b % 2 == 1, head_dim=cfg.head_dim)
            n1g, n1b = g(f"{pre}.norm1.weight"), g(f"{pre}.norm1.bias")
            n2g, n2b = g(f"{pre}.norm2.weight"), g(f"{pre}.norm2.bias")
            f1w, f1b = g(f"{pre}.mlp.fc1.weight"), g(f"{pre}.mlp.fc1.bias")
            f2w, f2b = g(f"{pre}.mlp.fc2.weight"), g(f"{pre}.mlp.fc2.bias")
            y_out = np.zeros_like(x)
            for y in range(x.shape[0]):
                for xx in range(x.shape[1]):
                    t = x[y, xx] + _ln_vec(a[y, xx], n1g, n1b, eps)
                    hid = f1w @ t + f1b
                    hid = np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in hid])
                    y_out[y, xx] = t + _ln_vec(f2w @ hid + f2b, n2g, n2b, eps)
            x = y_out
        outputs.append(x[None])
    return outputs


# ---------------------------------------------------------------------------
# Post-processing and metrics
# ---------------------------------------------------------------------------

def naive_extract_centers(heatmap, threshold: float, nms_kernel: int, top_k: int):
    heat = np.asarray(heatmap, dtype=np.float64)
    h, w = heat.shape
    half = nms_kernel // 2
    found = []
    for y in range(h):
        for x in range(w):
            v = heat[y, x]
            if v < threshold:
                continue
            ok = True
            for yy in range(max(0, y - half), min(h, y + half + 1)):
                for xx in range(max(0, x - half), min(w, x + half + 1)):
                    if (yy, xx) == (y, x):
                        continue
                    u = heat[yy, xx]
                    if u > v or (u == v and (yy, xx) < (y, x)):
                        ok = False
            if ok:
                found.append((y, x, float(np.float32(v))))
    found.sort(key=lambda t: (-t[2], t[0], t[1]))
    return found[:top_k]


def naive_group_pixels(centers: Sequence, offsets, foreground) -> np.ndarray:
    off = np.asarray(offsets)
    fg = np.asarray(foreground)
    h, w = fg.shape
    out = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            if not fg[y, x] or not len(centers):
                continue
            py = float(y) + float(off[y, x, 0])
            px = float(x) + float(off[y, x, 1])
            best, best_d = 0, None
            for k, c in enumerate(centers):
                dy = py - float(c[0])
                dx = px - float(c[1])
                dist = dy * dy + dx * dx
                if best_d is None or dist < best_d:
                    best, best_d = k, dist
            out[y, x] = best + 1
    return out


def naive_pq(pred_sem, pred_inst, gt_sem, gt_inst, stuff: set, things: set, void_id: int = 0):
    """Per-class ``{cls: (tp, fp, fn, iou_sum)}`` by enumerating segment pairs."""
    pred_sem, pred_inst = np.asarray(pred_sem), np.asarray(pred_inst)
    gt_sem, gt_inst = np.asarray(gt_sem), np.asarray(gt_inst)

    def segments(sem, inst):
        segs = {}
        for (y, x), cls in np.ndenumerate(sem):
            cls = int(cls)
            if cls in stuff:
                key = (cls, 0)
            elif cls in things and inst[y, x] > 0:
                key = (cls, int(inst[y, x]))
            else:
                continue
            segs.setdefault(key, set()).add((y, x))
        return segs

    gsegs = segments(gt_sem, gt_inst)
    psegs = segments(pred_sem, pred_inst)
    void = {(y, x) for (y, x), v in np.ndenumerate(gt_sem) if v == void_id}
    stats: dict[int, list] = {}

    def add(cls, i, v):
        stats.setdefault(cls, [0, 0, 0, 0.0])[i] += v

    gm, pm = set(), set()
    for gk, gpx in sorted(gsegs.items()):
        for pk, ppx in sorted(psegs.items()):
            if gk[0] != pk[0]:
                continue
            inter = len(gpx & ppx)
            union = len(gpx | ppx) - len(ppx & void)
            if inter and inter / union > 0.5:
                gm.add(gk)
                pm.add(pk)
                add(gk[0], 0, 1)
                add(gk[0], 3, inter / union)
    for gk in gsegs:
        if gk not in gm:
            add(gk[0], 2, 1)
    for pk, ppx in psegs.items():
        if pk not in pm and not len(ppx & void) / len(ppx) > 0.5:
            add(pk[0], 1, 1)
    return {c: tuple(v) for c, v in stats.items()}
