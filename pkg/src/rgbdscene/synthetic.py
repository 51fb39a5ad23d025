"""Seeded synthetic RGB-D samples with panoptic ground truth."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import formats
from .panoptic import Instance, PanopticMap, ThingStuffSpec


def make_sample(seed: int, height: int = 64, width: int = 64, num_classes: int = 40,
                stuff: tuple[int, ...] = (1, 2, 22), num_scene_classes: int = 10,
                max_objects: int = 4):
    """Room-like scene: wall above, floor below, a few box-shaped things.

    Returns ``(rgb uint8, depth uint16 mm, PanopticMap, scene_label)``.
    """
    rng = np.random.default_rng(seed)
    spec = ThingStuffSpec.from_stuff(num_classes, stuff)
    things = sorted(spec.thing_class_ids)
    semantic = np.full((height, width), stuff[0], dtype=np.int64)
    horizon = int(rng.integers(height // 3, 2 * height // 3))
    semantic[horizon:] = stuff[1]
    semantic[: max(1, height // 16)] = stuff[2] if len(stuff) > 2 else stuff[0]
    depth = np.empty((height, width), dtype=np.float64)
    depth[:horizon] = 4000.0
    depth[horizon:] = np.linspace(3500.0, 800.0, height - horizon)[:, None]
    instance_id = np.zeros((height, width), dtype=np.int64)
    instances = []
    for k in range(int(rng.integers(1, max_objects + 1))):
        h = int(rng.integers(height // 8, height // 3))
        w = int(rng.integers(width // 8, width // 3))
        y = int(rng.integers(0, height - h))
        x = int(rng.integers(0, width - w))
        cls = int(rng.choice(things))
        semantic[y:y + h, x:x + w] = cls
        instance_id[y:y + h, x:x + w] = k + 1
        depth[y:y + h, x:x + w] = float(rng.uniform(900.0, 3000.0))
    # Void border stripe.
    semantic[:, :1] = 0
    instance_id[:, :1] = 0
    for k in range(1, int(instance_id.max()) + 1):
        mask = instance_id == k
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        instances.append(Instance(k, int(semantic[mask][0]), (float(ys.mean()), float(xs.mean())),
                                  int(mask.sum()), float(rng.uniform(0.0, 360.0))))
    # Renumber densely after occlusion.
    pan = PanopticMap(semantic, instance_id, instances)
    pan = PanopticMap.decode(pan.encode(), {i.semantic_class * 1000 + i.id: i.orientation_deg
                                            for i in instances})
    palette = rng.integers(30, 226, size=(num_classes + 1, 3))
    rgb = palette[semantic] + rng.normal(0.0, 6.0, size=(height, width, 3))
    rgb = np.clip(rgb, 0, 255).astype(np.uint8)
    depth = np.clip(depth + rng.normal(0.0, 10.0, size=depth.shape), 0, 65535).astype(np.uint16)
    scene = int(rng.integers(0, num_scene_classes))
    return rgb, depth, pan, scene


def write_dataset(root, n: int, seed: int = 0, height: int = 64, width: int = 64,
                  **kwargs) -> Path:
    """Write ``n`` samples plus ``split.txt`` under ``root``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n):
        name = f"sample_{i:04d}"
        rgb, depth, pan, scene = make_sample(seed + i, height, width, **kwargs)
        d = root / name
        d.mkdir(exist_ok=True)
        formats.write_rgb(d / "rgb.png", rgb)
        formats.write_depth(d / "depth.png", depth)
        formats.write_semantic(d / "semantic.png", pan.semantic)
        formats.write_panoptic(d / "panoptic.png", pan)
        formats.write_instances(d / "instances.json", pan)
        formats.write_scene(d / "scene.txt", scene)
        names.append(name)
    manifest = root / "split.txt"
    manifest.write_text("\n".join(names) + "\n")
    return manifest
