"""Byte-level edits of weight containers, shared by the model-io and acceptance tests."""
import json
import struct

import numpy as np

from rgbdscene.errors import (
    MissingTensorError,
    NonFiniteTensorError,
    ShapeMismatchError,
    TruncatedFileError,
)

HEADER = struct.Struct("<4sIQ")


def _align(n):
    return (n + 63) // 64 * 64


def split(raw: bytes):
    magic, version, mlen = HEADER.unpack_from(raw)
    manifest = json.loads(raw[HEADER.size:HEADER.size + mlen])
    start = _align(HEADER.size + mlen)
    return magic, version, manifest, start


def rewrite_manifest(raw: bytes, edit) -> bytes:
    """Apply ``edit(manifest)`` and re-lay the file so blobs stay addressable."""
    magic, version, manifest, start = split(raw)
    blobs = raw[start:]
    edit(manifest)
    for _ in range(8):
        body = json.dumps(manifest, sort_keys=True).encode()
        new_start = _align(HEADER.size + len(body))
        if new_start == start:
            break
        for e in manifest["tensors"]:
            e["offset"] += new_start - start
        start = new_start
    head = HEADER.pack(magic, version, len(body)) + body
    return head + b"\0" * (start - len(head)) + blobs


def truncate(raw, frac):
    return raw[:int(len(raw) * frac)], TruncatedFileError, None


def shape_edit(raw, name):
    def edit(m):
        for e in m["tensors"]:
            if e["name"] == name:
                e["shape"][0] += 1
    return rewrite_manifest(raw, edit), ShapeMismatchError, name


def name_edit(raw, name):
    def edit(m):
        for e in m["tensors"]:
            if e["name"] == name:
                e["name"] = name + "_renamed"
    return rewrite_manifest(raw, edit), MissingTensorError, name


def nan_inject(raw, name, index=0):
    _, _, manifest, _ = split(raw)
    entry = next(e for e in manifest["tensors"] if e["name"] == name)
    buf = bytearray(raw)
    pos = entry["offset"] + 4 * index
    buf[pos:pos + 4] = np.float32(np.nan).tobytes()
    return bytes(buf), NonFiniteTensorError, name


def twenty_mutations(raw: bytes):
    """Five each of truncation, shape edit, name edit and NaN injection."""
    _, _, manifest, _ = split(raw)
    names = [e["name"] for e in manifest["tensors"]]
    picks = [names[i] for i in np.linspace(0, len(names) - 1, 5).astype(int)]
    out = []
    for frac in (0.0001, 0.01, 0.3, 0.7, 0.9999):
        out.append(("truncate", frac) + truncate(raw, frac))
    for n in picks:
        out.append(("shape", n) + shape_edit(raw, n))
    for n in picks:
        out.append(("name", n) + name_edit(raw, n))
    for i, n in enumerate(picks):
        out.append(("nan", n) + nan_inject(raw, n, index=i % 2))
    return out
