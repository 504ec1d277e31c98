"""Synthetic dataset generation for desk-scale experiments and acceptance runs.

Pixel datasets partition each image into smooth class regions; the feature
volume carries one indicator channel per class (1 inside the class region)
plus pure-noise channels, with Gaussian noise of configurable strength on
everything. Object datasets scatter non-overlapping disks whose class sets
both the in-mask feature mean and the disk radius. Images are rendered with
class-dependent gray levels so the classical filter bank also has signal.

Outputs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .filters import gaussian_smooth
from .store import (FeatureVolume, write_feature_volume, write_instance_mask,
                    write_label_image, write_object_labels)

MODEL_KEY = "synth"


def _split_tag(index: int, n_images: int) -> str:
    n_val = max(1, n_images // 8)
    n_test = max(1, n_images // 5)
    if index < n_images - n_val - n_test:
        return "train"
    if index < n_images - n_test:
        return "val"
    return "test"


def _region_labels(rng, n_classes: int, side: int) -> np.ndarray:
    """Smooth random partition of a side x side grid into 1..K regions."""
    while True:
        fields = np.stack([
            gaussian_smooth(rng.normal(size=(side, side)), side / 6.0)
            for _ in range(n_classes)
        ])
        labels = np.argmax(fields, axis=0).astype(np.uint16) + 1
        if len(np.unique(labels)) == n_classes:
            return labels


def _render_image(labels: np.ndarray, n_classes: int, rng,
                  upsample: int) -> np.ndarray:
    levels = 40.0 + 175.0 * (labels.astype(np.float64) - 1) / max(1, n_classes - 1)
    big = levels.repeat(upsample, axis=0).repeat(upsample, axis=1)
    big = big + rng.normal(0.0, 6.0, size=big.shape)
    return np.clip(big, 0, 255).astype(np.uint8)


def generate_pixel_dataset(out_dir, n_classes: int = 3, n_images: int = 50,
                           seed: int = 0, noise: float = 0.5,
                           image_size: int = 64, feature_size: int = 16,
                           extra_channels: int = 2,
                           amplitude: float = 0.5) -> Path:
    """Write images, dense labels, feature volumes and a manifest; returns its path.

    ``amplitude`` scales the class-indicator channels relative to the noise;
    low amplitude with spatially smooth regions makes single cells weakly
    informative while neighborhoods stay decodable.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if image_size % feature_size != 0:
        raise ValueError("image_size must be a multiple of feature_size")
    out = Path(out_dir)
    for sub in ("images", "labels", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    upsample = image_size // feature_size
    records = []
    for i in range(n_images):
        grid_labels = _region_labels(rng, n_classes, feature_size)
        labels = grid_labels.repeat(upsample, axis=0).repeat(upsample, axis=1)
        channels = np.zeros((feature_size, feature_size, n_classes + extra_channels),
                            dtype=np.float64)
        for c in range(n_classes):
            channels[:, :, c] = amplitude * (grid_labels == c + 1)
        channels += rng.normal(0.0, noise, size=channels.shape)
        image = _render_image(grid_labels, n_classes, rng, upsample)

        stem = f"img_{i:04d}"
        Image.fromarray(image, mode="L").save(out / "images" / f"{stem}.png")
        write_label_image(labels, out / "labels" / f"{stem}.lbl")
        write_feature_volume(FeatureVolume(channels.astype(np.float32),
                                           provenance=json.dumps({"model": MODEL_KEY})),
                             out / "features" / f"{stem}.fvol")
        records.append({
            "image": f"images/{stem}.png",
            "features": {MODEL_KEY: f"features/{stem}.fvol"},
            "labels": f"labels/{stem}.lbl",
            "split": _split_tag(i, n_images),
        })
    manifest = {"classes": [f"class_{c + 1}" for c in range(n_classes)],
                "records": records}
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def _place_disks(rng, n_classes: int, image_size: int, cell: int):
    """Non-overlapping disks on a jittered grid; returns (center, radius, class)."""
    per_side = image_size // cell
    disks = []
    for gr in range(per_side):
        for gc in range(per_side):
            if rng.random() < 0.35:
                continue
            cls = int(rng.integers(1, n_classes + 1))
            radius = 3.0 + 1.5 * (cls - 1) + rng.uniform(-0.5, 0.5)
            radius = min(radius, cell / 2 - 1)
            lo = radius + 1
            center = (gr * cell + rng.uniform(lo, cell - lo),
                      gc * cell + rng.uniform(lo, cell - lo))
            disks.append((center, radius, cls))
    return disks


def generate_object_dataset(out_dir, n_classes: int = 4, n_images: int = 50,
                            seed: int = 0, noise: float = 0.3,
                            image_size: int = 64, feature_size: int = 16,
                            extra_channels: int = 2) -> Path:
    """Write images, instance masks, object labels, features and a manifest."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if image_size % feature_size != 0:
        raise ValueError("image_size must be a multiple of feature_size")
    out = Path(out_dir)
    for sub in ("images", "labels", "instances", "objects", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scale = image_size // feature_size
    cell = max(16, image_size // 4)
    rr, cc = np.mgrid[0:image_size, 0:image_size]
    frr, fcc = np.mgrid[0:feature_size, 0:feature_size]
    records = []
    for i in range(n_images):
        disks = _place_disks(rng, n_classes, image_size, cell)
        while not disks:
            disks = _place_disks(rng, n_classes, image_size, cell)
        mask = np.zeros((image_size, image_size), dtype=np.uint32)
        labels = np.zeros((image_size, image_size), dtype=np.uint16)
        table = {}
        channels = np.zeros((feature_size, feature_size, n_classes + extra_channels),
                            dtype=np.float64)
        for oid, ((cy, cx), radius, cls) in enumerate(disks, start=1):
            inside = (rr - cy) ** 2 + (cc - cx) ** 2 <= radius ** 2
            mask[inside] = oid
            labels[inside] = cls
            table[oid] = cls
            finside = (frr - cy / scale) ** 2 + (fcc - cx / scale) ** 2 \
                <= max(1.0, radius / scale) ** 2
            channels[finside, cls - 1] += 1.0
        channels += rng.normal(0.0, noise, size=channels.shape)
        image = np.clip(
            40.0 + labels.astype(np.float64) * (200.0 / n_classes)
            + rng.normal(0.0, 6.0, size=mask.shape), 0, 255).astype(np.uint8)

        stem = f"img_{i:04d}"
        Image.fromarray(image, mode="L").save(out / "images" / f"{stem}.png")
        write_label_image(labels, out / "labels" / f"{stem}.lbl")
        write_instance_mask(mask, out / "instances" / f"{stem}.inst")
        write_object_labels(table, out / "objects" / f"{stem}.csv")
        write_feature_volume(FeatureVolume(channels.astype(np.float32),
                                           provenance=json.dumps({"model": MODEL_KEY})),
                             out / "features" / f"{stem}.fvol")
        records.append({
            "image": f"images/{stem}.png",
            "features": {MODEL_KEY: f"features/{stem}.fvol"},
            "labels": f"labels/{stem}.lbl",
            "instances": f"instances/{stem}.inst",
            "object_labels": f"objects/{stem}.csv",
            "split": _split_tag(i, n_images),
        })
    manifest = {"classes": [f"class_{c + 1}" for c in range(n_classes)],
                "records": records}
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path
