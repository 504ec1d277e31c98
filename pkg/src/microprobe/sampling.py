"""Label-budget sampling for shallow and probe training.

All samplers are deterministic given (input order, seed), never emit
duplicates, and draw sequentially without replacement so a larger budget
with the same seed extends the smaller one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PixelBudget:
    n_pixels: int
    seed: int = 0

    def __post_init__(self):
        if self.n_pixels < 1:
            raise ValueError(f"n_pixels must be >= 1, got {self.n_pixels}")


@dataclass(frozen=True)
class ObjectBudget:
    """Number of annotated objects to train on; None means all of them."""

    n_objects: int | None
    seed: int = 0

    def __post_init__(self):
        if self.n_objects is not None and self.n_objects < 1:
            raise ValueError(f"n_objects must be >= 1, got {self.n_objects}")


@dataclass
class LabeledSample:
    """Training rows drawn under a budget: (n, C) features and (n,) labels."""

    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def inverse_frequency_indices(classes: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Draw up to n pool indices, each draw weighted by 1/count(remaining class).

    Items of one class share a weight, so each draw is equivalent to picking a
    class uniformly among classes that still have items, then a uniform item of
    that class. If n >= pool size the whole pool is returned (original order).
    """
    classes = np.asarray(classes)
    total = len(classes)
    if total == 0:
        raise ValueError("pool is empty")
    if n >= total:
        return np.arange(total)
    rng = np.random.default_rng(seed)
    values = np.unique(classes)
    stacks = []  # per class, shuffled indices consumed from the end
    for v in values:
        idx = np.flatnonzero(classes == v)
        stacks.append(list(idx[rng.permutation(len(idx))]))
    alive = list(range(len(values)))
    picked = np.empty(n, dtype=np.int64)
    for i in range(n):
        j = alive[rng.integers(len(alive))]
        picked[i] = stacks[j].pop()
        if not stacks[j]:
            alive.remove(j)
    return picked


def sample_pixels_rf(features: np.ndarray, labels: np.ndarray,
                     budget: PixelBudget) -> LabeledSample:
    """Class-balanced subsample of labeled pixel feature vectors."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    if len(features) != len(labels):
        raise ValueError("features and labels disagree in length")
    idx = inverse_frequency_indices(labels, budget.n_pixels, budget.seed)
    return LabeledSample(features[idx], labels[idx])


def sample_objects(object_ids: np.ndarray, classes: np.ndarray,
                   budget: ObjectBudget) -> np.ndarray:
    """Class-balanced subsample of annotated object ids ("all" returns every id)."""
    object_ids = np.asarray(object_ids)
    classes = np.asarray(classes)
    if len(object_ids) != len(classes):
        raise ValueError("object ids and classes disagree in length")
    if budget.n_objects is None:
        return object_ids.copy()
    idx = inverse_frequency_indices(classes, budget.n_objects, budget.seed)
    return object_ids[idx]


def _pick_class_pixels(label_map: np.ndarray, cls: int, count: int,
                       rng: np.random.Generator) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(label_map == cls)
    if count >= len(rows):
        chosen = np.arange(len(rows))  # fall back to every pixel of the class
    else:
        chosen = rng.choice(len(rows), size=count, replace=False)
    return [(int(rows[i]), int(cols[i])) for i in chosen]


def sample_pixels_probe(label_maps: dict, budget: PixelBudget) -> dict:
    """Distribute a pixel budget across images for probe training.

    With fewer pixels than images, one labeled pixel is taken from each of
    n_pixels randomly drawn images; its class is uniform over the classes
    present in that image. Otherwise every image receives an equal share
    (plus a remainder spread over a random image subset), and within an
    image pixels are split equally across its present classes, capped at
    each class's availability.

    Returns {image_key: [(row, col), ...]} with keys in input order for the
    images that received pixels.
    """
    keys = list(label_maps)
    if not keys:
        raise ValueError("no label maps given")
    for key in keys:
        if not (np.asarray(label_maps[key]) > 0).any():
            raise ValueError(f"image {key!r} has no labeled pixels")
    rng = np.random.default_rng(budget.seed)
    n_images = len(keys)
    quotas = {}
    if budget.n_pixels < n_images:
        for ki in rng.choice(n_images, size=budget.n_pixels, replace=False):
            quotas[keys[ki]] = 1
    else:
        base, extra = divmod(budget.n_pixels, n_images)
        bonus = set(rng.choice(n_images, size=extra, replace=False).tolist()) if extra else set()
        for ki, key in enumerate(keys):
            quotas[key] = base + (1 if ki in bonus else 0)

    picked: dict = {}
    for key in keys:
        if key not in quotas or quotas[key] == 0:
            continue
        label_map = np.asarray(label_maps[key])
        present = np.unique(label_map[label_map > 0])
        quota = quotas[key]
        pixels: list[tuple[int, int]] = []
        if quota == 1:
            cls = int(present[rng.integers(len(present))])
            pixels += _pick_class_pixels(label_map, cls, 1, rng)
        else:
            base, extra = divmod(quota, len(present))
            bonus = set(rng.choice(len(present), size=extra, replace=False).tolist()) if extra else set()
            for ci, cls in enumerate(present):
                count = base + (1 if ci in bonus else 0)
                if count:
                    pixels += _pick_class_pixels(label_map, int(cls), count, rng)
        picked[key] = pixels
    return picked
