"""On-disk formats shared by inference outputs and ground-truth datasets.

Per sample directory:

* ``rgb.png``        8-bit RGB
* ``depth.png``      16-bit single channel, millimeters
* ``semantic.png``   8-bit paletted, class labels (0 = void)
* ``panoptic.png``   16-bit, ``class * 1000 + instance``
* ``instances.json`` ``{"instances": [{id, panoptic_id, semantic_class, center,
  pixel_count, orientation_deg, score}, ...]}``
* ``scene.txt``      ``label=<int>`` and optionally ``logits=<comma list>``
"""
from __future__ import annotations

import colorsys
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .panoptic import PanopticMap


class FormatError(Exception):
    """An input file is missing, unreadable or has the wrong encoding."""


def _palette() -> list[int]:
    pal = [0, 0, 0]
    for i in range(1, 256):
        r, g, b = colorsys.hsv_to_rgb((i * 0.618034) % 1.0, 0.65, 0.95)
        pal += [int(r * 255), int(g * 255), int(b * 255)]
    return pal


PALETTE = _palette()


def _open(path: Path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
        return im
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None


def read_rgb(path) -> np.ndarray:
    im = _open(Path(path))
    if im.mode != "RGB":
        raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
    return np.array(im, dtype=np.uint8)


def read_depth(path) -> np.ndarray:
    im = _open(Path(path))
    if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"{path}: expected 16-bit depth, got mode {im.mode}")
    arr = np.array(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: depth must be single channel")
    return arr.astype(np.uint16)


def write_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def write_depth(path, depth: np.ndarray) -> None:
    Image.fromarray(np.asarray(depth, dtype=np.uint16)).save(path)


def write_semantic(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise FormatError("semantic labels must fit in 8 bits")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(PALETTE)
    im.save(path)


def read_semantic(path) -> np.ndarray:
    im = _open(Path(path))
    if im.mode not in ("P", "L"):
        raise FormatError(f"{path}: expected paletted or 8-bit labels, got mode {im.mode}")
    return np.array(im, dtype=np.int64)


def write_panoptic(path, panoptic: PanopticMap) -> None:
    enc = panoptic.encode()
    if enc.max(initial=0) > 65535:
        raise FormatError("panoptic ids exceed 16 bits")
    Image.fromarray(enc.astype(np.uint16)).save(path)


def read_panoptic_ids(path) -> np.ndarray:
    im = _open(Path(path))
    if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"{path}: expected 16-bit panoptic ids, got mode {im.mode}")
    return np.array(im).astype(np.int64)


def write_instances(path, panoptic: PanopticMap) -> None:
    doc = {"instances": [i.to_dict() for i in panoptic.instances]}
    Path(path).write_text(json.dumps(doc, indent=2))


def read_instances(path) -> list[dict]:
    try:
        doc = json.loads(Path(path).read_text())
        return list(doc["instances"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None


def read_panoptic(sample_dir) -> PanopticMap:
    """Panoptic map from ``panoptic.png`` plus orientations from ``instances.json`` if present."""
    sample_dir = Path(sample_dir)
    ids = read_panoptic_ids(sample_dir / "panoptic.png")
    orientations = None
    inst_path = sample_dir / "instances.json"
    if inst_path.exists():
        orientations = {int(d["panoptic_id"]): d.get("orientation_deg")
                        for d in read_instances(inst_path)}
    return PanopticMap.decode(ids, orientations)


def write_scene(path, label: int, logits: np.ndarray | None = None) -> None:
    lines = [f"label={int(label)}"]
    if logits is not None:
        lines.append("logits=" + ",".join(f"{float(v):.6g}" for v in np.ravel(logits)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path) -> int:
    try:
        for line in Path(path).read_text().splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "label":
                return int(value)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    raise FormatError(f"{path}: no label line")


def write_prediction(out_dir, semantic: np.ndarray, panoptic: PanopticMap, scene: int,
                     scene_logits: np.ndarray | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_semantic(out / "semantic.png", semantic)
    write_panoptic(out / "panoptic.png", panoptic)
    write_instances(out / "instances.json", panoptic)
    write_scene(out / "scene.txt", scene, scene_logits)

