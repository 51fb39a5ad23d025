"""Weight container, parameter-shape table and deterministic reference weights.

Container layout (all integers little-endian)::

    b"EMSF" | u32 version | u64 manifest_len | manifest (UTF-8 JSON)
    | zero padding to a 64-byte boundary | tensor blobs (float32 LE)

The manifest holds ``format_version``, the full model ``config`` and a
``tensors`` list of ``{name, shape, offset}`` where ``offset`` is an absolute,
64-byte-aligned file offset.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from collections.abc import Mapping
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import ModelConfig, Variant
from .errors import (
    ConfigurationError,
    ContainerError,
    MissingTensorError,
    NonFiniteTensorError,
    ShapeMismatchError,
    TruncatedFileError,
    UnexpectedTensorError,
    VersionError,
)

MAGIC = b"EMSF"
FORMAT_VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


# ---------------------------------------------------------------------------
# Parameter table
# ---------------------------------------------------------------------------

def feature_channels(config: ModelConfig, decoder: str) -> int:
    if decoder == "emsanet":
        return config.decoder.emsanet_channels[-1]
    return config.decoder.segformer_out


def _decoder_shapes(prefix: str, kind: str, config: ModelConfig) -> dict[str, tuple]:
    widths = config.encoder.stage_channels()
    dec = config.decoder
    shapes: dict[str, tuple] = {}
    if kind == "emsanet":
        c_in = config.context.out_channels
        for i, c in enumerate(dec.emsanet_channels):
            shapes[f"{prefix}.blocks.{i}.weight"] = (c, 3, 3, c_in)
            shapes[f"{prefix}.blocks.{i}.bias"] = (c,)
            shapes[f"{prefix}.skips.{i}.weight"] = (c, widths[2 - i])
            shapes[f"{prefix}.skips.{i}.bias"] = (c,)
            c_in = c
    else:
        embed = dec.segformer_channels[::-1]  # per stage, shallow to deep
        for s in range(4):
            shapes[f"{prefix}.embed.{s}.weight"] = (embed[s], widths[s])
            shapes[f"{prefix}.embed.{s}.bias"] = (embed[s],)
        shapes[f"{prefix}.fuse.weight"] = (dec.segformer_hidden, sum(embed))
        shapes[f"{prefix}.fuse.bias"] = (dec.segformer_hidden,)
        shapes[f"{prefix}.out.weight"] = (dec.segformer_out, dec.segformer_hidden)
        shapes[f"{prefix}.out.bias"] = (dec.segformer_out,)
    return shapes


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter the configured network reads, with its exact shape."""
    config.validate()
    enc = config.encoder
    variant = Variant(enc.variant)
    p = enc.patch_size
    shapes: dict[str, tuple[int, ...]] = {}
    if variant is Variant.RGB_ONLY:
        shapes["encoder.embed.rgb.weight"] = (enc.stem_channels, p, p, 3)
        shapes["encoder.embed.rgb.bias"] = (enc.stem_channels,)
    elif variant is Variant.SWINV2_T_4CH:
        shapes["encoder.embed.rgbd.weight"] = (enc.stem_channels, p, p, 4)
        shapes["encoder.embed.rgbd.bias"] = (enc.stem_channels,)
    else:
        shapes["encoder.embed.rgb.weight"] = (enc.rgb_embed_channels, p, p, 3)
        shapes["encoder.embed.rgb.bias"] = (enc.rgb_embed_channels,)
        shapes["encoder.embed.depth.weight"] = (enc.depth_embed_channels, p, p, 1)
        shapes["encoder.embed.depth.bias"] = (enc.depth_embed_channels,)
    shapes["encoder.embed.norm.weight"] = (enc.stem_channels,)
    shapes["encoder.embed.norm.bias"] = (enc.stem_channels,)

    widths = enc.stage_channels()
    heads = enc.stage_heads()
    for s, (c, n_heads, depth) in enumerate(zip(widths, heads, enc.depths_per_stage)):
        pre = f"encoder.stages.{s}"
        if s > 0:
            shapes[f"{pre}.merge.reduction.weight"] = (c, 4 * widths[s - 1])
            shapes[f"{pre}.merge.norm.weight"] = (c,)
            shapes[f"{pre}.merge.norm.bias"] = (c,)
        hidden = enc.mlp_ratio * c
        for b in range(depth):
            bp = f"{pre}.blocks.{b}"
            shapes.update({
                f"{bp}.attn.qkv.weight": (3 * c, c),
                f"{bp}.attn.qkv.bias": (3 * c,),
                f"{bp}.attn.logit_scale": (n_heads,),
                f"{bp}.attn.cpb.fc1.weight": (enc.cpb_hidden, 2),
                f"{bp}.attn.cpb.fc1.bias": (enc.cpb_hidden,),
                f"{bp}.attn.cpb.fc2.weight": (n_heads, enc.cpb_hidden),
                f"{bp}.attn.proj.weight": (c, c),
                f"{bp}.attn.proj.bias": (c,),
                f"{bp}.norm1.weight": (c,),
                f"{bp}.norm1.bias": (c,),
                f"{bp}.mlp.fc1.weight": (hidden, c),
                f"{bp}.mlp.fc1.bias": (hidden,),
                f"{bp}.mlp.fc2.weight": (c, hidden),
                f"{bp}.mlp.fc2.bias": (c,),
                f"{bp}.norm2.weight": (c,),
                f"{bp}.norm2.bias": (c,),
            })

    ctx = config.context
    for i, _ in enumerate(ctx.bins):
        shapes[f"context.branches.{i}.weight"] = (ctx.branch_channels, widths[3])
        shapes[f"context.branches.{i}.bias"] = (ctx.branch_channels,)
    shapes["context.fuse.weight"] = (ctx.out_channels,
                                     widths[3] + len(ctx.bins) * ctx.branch_channels)
    shapes["context.fuse.bias"] = (ctx.out_channels,)
    shapes["scene_head.weight"] = (config.num_scene_classes, ctx.branch_channels)
    shapes["scene_head.bias"] = (config.num_scene_classes,)

    shapes.update(_decoder_shapes("semantic_decoder", config.decoder.semantic, config))
    shapes.update(_decoder_shapes("instance_decoder", config.decoder.instance, config))
    f_sem = feature_channels(config, config.decoder.semantic)
    f_ins = feature_channels(config, config.decoder.instance)
    shapes["semantic_head.weight"] = (config.num_classes, f_sem)
    shapes["semantic_head.bias"] = (config.num_classes,)
    for name, n in (("center", 1), ("offset", 2), ("orientation", 2)):
        shapes[f"instance_head.{name}.weight"] = (n, f_ins)
        shapes[f"instance_head.{name}.bias"] = (n,)
    return shapes


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

class WeightStore(Mapping):
    """Immutable name -> float32 array mapping.

    ``recording()`` collects the names looked up, which tests use to check that
    the shape table covers exactly what inference reads.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self._tensors = {}
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype=np.float32)
            a.setflags(write=False)
            self._tensors[name] = a
        self._reads: set[str] | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        if self._reads is not None:
            self._reads.add(name)
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def start_recording(self) -> None:
        self._reads = set()

    def stop_recording(self) -> set[str]:
        reads, self._reads = self._reads or set(), None
        return reads


def validate_store(config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
    expected = expected_shapes(config)
    for name in expected:
        if name not in tensors:
            raise MissingTensorError(name)
    for name in tensors:
        if name not in expected:
            raise UnexpectedTensorError(name)
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise ShapeMismatchError(name, shape, tensors[name].shape)
    for name in expected:
        if not np.isfinite(tensors[name]).all():
            raise NonFiniteTensorError(name)


# ---------------------------------------------------------------------------
# Reference initialization
# ---------------------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def _head_block_mask(rows: int, cols: int, head_dim: int) -> np.ndarray:
    r = (np.arange(rows) % cols) // head_dim
    c = np.arange(cols) // head_dim
    return r[:, None] == c[None, :]


def reference_init(config: ModelConfig, seed: int = 0) -> WeightStore:
    """Deterministic weights for any valid configuration.

    Each tensor draws from its own PCG64 stream seeded with ``(seed,
    crc32(name))``: truncated normal (std 0.02) for projections, zeros for
    biases, ones for norm gains, ``log(10)`` for attention logit scales.  Head
    projections are generated block-diagonal, matching what attention reads.
    """
    head_dim = config.encoder.head_dim
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("logit_scale"):
            arr = np.full(shape, math.log(10.0), dtype=np.float32)
        elif name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        elif "norm" in name.rsplit(".", 2)[-2]:
            arr = np.ones(shape, dtype=np.float32)
        else:
            rng = np.random.Generator(np.random.PCG64([seed, zlib.crc32(name.encode())]))
            arr = _trunc_normal(rng, shape, 0.02)
            if name.endswith(("attn.qkv.weight", "attn.proj.weight")):
                arr *= _head_block_mask(shape[0], shape[1], head_dim)
        tensors[name] = arr
    return WeightStore(tensors)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save(path: str | Path, config: ModelConfig, store: Mapping[str, np.ndarray]) -> None:
    validate_store(config, store)
    names = list(store.keys())
    entries = []
    # Offsets depend on the manifest length, which depends on the offsets'
    # digits; iterate until the layout is stable.
    data_start = 0
    for _ in range(8):
        offset = data_start
        entries = []
        for name in names:
            arr = store[name]
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset = _align(offset + arr.size * 4)
        manifest = json.dumps({"format_version": FORMAT_VERSION,
                               "config": config.to_dict(),
                               "tensors": entries}, sort_keys=True).encode("utf-8")
        new_start = _align(_HEADER.size + len(manifest))
        if new_start == data_start:
            break
        data_start = new_start
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        f.write(manifest)
        for entry, name in zip(entries, names):
            f.write(b"\0" * (entry["offset"] - f.tell()))
            f.write(np.ascontiguousarray(store[name], dtype="<f4").tobytes())


def load(path: str | Path) -> tuple[ModelConfig, WeightStore]:
    """Read and fully validate a container; nothing partial is returned."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from None
    if len(raw) < _HEADER.size:
        raise TruncatedFileError("file shorter than the container header")
    magic, version, manifest_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version}")
    end = _HEADER.size + manifest_len
    if end > len(raw):
        raise TruncatedFileError("manifest extends past end of file")
    try:
        manifest = json.loads(raw[_HEADER.size:end].decode("utf-8"))
        if manifest["format_version"] != FORMAT_VERSION:
            raise VersionError(f"unsupported manifest version {manifest['format_version']}")
        config = ModelConfig.from_dict(manifest["config"])
        entries = [(e["name"], tuple(int(n) for n in e["shape"]), int(e["offset"]))
                   for e in manifest["tensors"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ContainerError(f"malformed manifest: {exc}") from None

    names = [n for n, _, _ in entries]
    if len(set(names)) != len(names):
        raise ContainerError("duplicate tensor names in manifest")
    expected = expected_shapes(config)
    declared = {n: s for n, s, _ in entries}
    for name in expected:
        if name not in declared:
            raise MissingTensorError(name)
    for name in declared:
        if name not in expected:
            raise UnexpectedTensorError(name)
    for name, shape in expected.items():
        if declared[name] != shape:
            raise ShapeMismatchError(name, shape, declared[name])

    data_start = _align(end)
    spans = []
    for name, shape, offset in entries:
        nbytes = 4 * math.prod(shape)
        if offset % ALIGN or offset < data_start:
            raise ContainerError(f"tensor {name!r} has invalid offset {offset}")
        if offset + nbytes > len(raw):
            raise TruncatedFileError(f"tensor {name!r} extends past end of file")
        spans.append((offset, offset + nbytes, name))
    spans.sort()
    for (_, a_end, a), (b_start, _, b) in zip(spans, spans[1:]):
        if b_start < a_end:
            raise ContainerError(f"tensors {a!r} and {b!r} overlap")

    tensors = {}
    for name, shape, offset in entries:
        arr = np.frombuffer(raw, dtype="<f4", count=math.prod(shape), offset=offset)
        arr = arr.reshape(shape).astype(np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteTensorError(name)
        tensors[name] = arr
    return config, WeightStore(tensors)
