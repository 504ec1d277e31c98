"""Object-guided attentive probing: one query per segmented instance.

Each object contributes a query at its mask centroid, sinusoidally encoded
in feature-grid coordinates. Queries live in a fixed-size tensor padded to
a maximum object count; padded slots are zeroed by a validity mask before
cross-attention, excluded from the loss, and provably cannot influence the
valid slots (no operation mixes query rows). The Gaussian locality prior
uses an independently learned bandwidth per attention head. A two-layer
MLP maps each attended token to class logits.
"""

from __future__ import annotations

import time

import numpy as np

from ..autodiff import Adam, FeedForward, Linear, Module, Tensor
from ..metrics import evaluate_objects, macro_f1
from ..sampling import ObjectBudget, sample_objects
from ..store import FeatureVolume
from .attention import (GaussianMaskedCrossAttention, image_to_feature_coords,
                        sinusoidal_encoding)
from .config import TrainConfig
from .deap import _feature_positions


def object_centroids(instance_mask: np.ndarray) -> list[tuple[int, float, float]]:
    """(id, centroid_row, centroid_col) per instance, ascending id.

    The centroid is the coordinate mean of the instance's pixels, which can
    fall outside the mask for non-convex shapes; that is accepted.
    """
    instance_mask = np.asarray(instance_mask)
    out = []
    for oid in np.unique(instance_mask):
        if oid == 0:
            continue
        rows, cols = np.nonzero(instance_mask == oid)
        out.append((int(oid), float(rows.mean()), float(cols.mean())))
    return out


def object_labels_from_pixels(labels: np.ndarray, instance_mask: np.ndarray) -> dict[int, int]:
    """Majority vote of labeled pixels inside each instance mask (ties: lowest class)."""
    labels = np.asarray(labels)
    instance_mask = np.asarray(instance_mask)
    table = {}
    for oid in np.unique(instance_mask):
        if oid == 0:
            continue
        inside = labels[instance_mask == oid]
        inside = inside[inside > 0]
        if inside.size == 0:
            continue
        counts = np.bincount(inside)
        table[int(oid)] = int(np.argmax(counts))
    return table


class ObapProbe(Module):
    """Fixed-capacity object classifier over feature volumes."""

    def __init__(self, n_classes: int, feature_channels: int, n_max: int = 256,
                 width: int = 256, heads: int = 4, mlp_hidden: int | None = None,
                 sigma_init: float = 8.0, seed: int = 0):
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        if n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {n_max}")
        self.n_classes = n_classes
        self.feature_channels = feature_channels
        self.n_max = n_max
        self.width = width
        self.heads = heads
        self.mlp_hidden = mlp_hidden or width
        self.sigma_init = sigma_init
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.feat_proj = Linear(feature_channels, width, rng, name="feat_proj")
        self.query_proj = Linear(width, width, rng, name="query_proj")
        self.attention = GaussianMaskedCrossAttention(width, heads, rng,
                                                      sigma_init=sigma_init)
        self.head = FeedForward(width, self.mlp_hidden, n_classes, rng, name="head")

    def config(self) -> dict:
        return {"kind": "obap", "n_classes": self.n_classes,
                "feature_channels": self.feature_channels, "n_max": self.n_max,
                "width": self.width, "heads": self.heads,
                "mlp_hidden": self.mlp_hidden, "sigma_init": self.sigma_init,
                "seed": self.seed}

    @classmethod
    def from_config(cls, cfg: dict) -> "ObapProbe":
        cfg = {k: v for k, v in cfg.items() if k != "kind"}
        return cls(**cfg)

    def build_queries(self, centroids, image_size,
                      feature_size) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Query encodings (n_max, width), positions (n_max, 2), validity (n_max,)."""
        n = len(centroids)
        if n > self.n_max:
            raise ValueError(
                f"{n} objects exceed the query capacity n_max={self.n_max}; "
                "raise n_max or tile the image")
        validity = np.zeros(self.n_max, dtype=bool)
        validity[:n] = True
        positions = np.zeros((self.n_max, 2), dtype=np.float64)
        encodings = np.zeros((self.n_max, self.width), dtype=np.float64)
        if n:
            pos_img = np.array([[r, c] for _, r, c in centroids], dtype=np.float64)
            positions[:n] = image_to_feature_coords(pos_img, image_size, feature_size)
            encodings[:n] = sinusoidal_encoding(positions[:n], self.width)
        return encodings, positions, validity

    def forward_from_queries(self, queries: Tensor, positions_q: np.ndarray,
                             validity: np.ndarray, values: np.ndarray) -> Tensor:
        """Logits (n_max, K) from an explicit query tensor.

        The validity mask is applied to the queries before cross-attention,
        so padded slots carry no information and receive no gradient.
        """
        fh, fw, fc = values.shape
        if fc != self.feature_channels:
            raise ValueError(
                f"volume has {fc} channels, probe expects {self.feature_channels}")
        invalid = ~np.asarray(validity, dtype=bool)
        masked = queries.masked_fill(invalid[:, None], 0.0)
        projected = self.query_proj(masked)
        feats = self.feat_proj(Tensor(values.reshape(fh * fw, fc)))
        pos_f = _feature_positions(fh, fw)
        tokens = self.attention(projected, feats, positions_q, pos_f)
        return self.head(tokens)

    def forward(self, volume, centroids, image_size) -> tuple[Tensor, np.ndarray]:
        """Logits (n_max, K) and validity (n_max,) for one image's objects.

        ``image_size`` is the (H, W) of the image the centroids live in;
        centroid coordinates are mapped into the feature grid's frame.
        """
        values = volume.values if isinstance(volume, FeatureVolume) else np.asarray(volume)
        encodings, positions, validity = self.build_queries(
            centroids, image_size, values.shape[:2])
        queries = Tensor(encodings)
        return self.forward_from_queries(queries, positions, validity, values), validity

    def predict(self, volume, centroids, image_size) -> dict[int, int]:
        """Class in 1..K per instance id."""
        logits, validity = self.forward(volume, centroids, image_size)
        picks = np.argmax(logits.data, axis=1) + 1
        return {oid: int(picks[i]) for i, (oid, _, _) in enumerate(centroids)}

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for p, data in zip(self.parameters(), snapshot):
            p.data = data.copy()


def masked_ce_loss(logits: Tensor, class_vector: np.ndarray, sampled: np.ndarray,
                   eps: float = 1e-12) -> Tensor:
    """Cross-entropy averaged over the sampled (valid) object slots."""
    n_max, k = logits.shape
    class_vector = np.asarray(class_vector).reshape(n_max)
    sampled = np.asarray(sampled, dtype=bool).reshape(n_max)
    if not sampled.any():
        raise ValueError("no sampled objects in this image")
    if (class_vector[sampled] < 1).any():
        raise ValueError("sampled objects must be labeled")
    onehot = np.zeros((n_max, k), dtype=logits.data.dtype)
    rows = np.flatnonzero(sampled)
    onehot[rows, class_vector[rows] - 1] = 1.0
    probs = logits.softmax()
    log_probs = (probs + eps).log()
    ce_rows = -((Tensor(onehot, dtype=logits.data.dtype) * log_probs)
                .sum(axes=-1, keepdims=True))
    mask_col = Tensor(sampled.astype(logits.data.dtype)[:, None],
                      dtype=logits.data.dtype)
    return (ce_rows * mask_col).sum() * (1.0 / float(sampled.sum()))


def obap_train(manifest, model_key: str, budget: ObjectBudget,
               cfg: TrainConfig = TrainConfig(), n_max: int = 256,
               width: int = 256, heads: int = 4, sigma_init: float = 8.0,
               progress=None):
    """Train an object probe on a manifest's train split under an object budget.

    Object labels come from each record's label table when present, else by
    majority vote of pixel labels inside each instance mask. Returns
    (probe, history) with the best-on-validation parameters restored.
    """
    from ..features import load_feature_volume
    from ..store import read_instance_mask, read_label_image, read_object_labels

    def collect(split):
        items = []
        for rec in manifest.split(split):
            if rec.instances is None:
                continue
            mask = read_instance_mask(manifest.resolve(rec.instances))
            centroids = object_centroids(mask)
            if rec.object_labels is not None:
                table = read_object_labels(manifest.resolve(rec.object_labels),
                                           manifest.n_classes)
            elif rec.labels is not None:
                table = object_labels_from_pixels(
                    read_label_image(manifest.resolve(rec.labels)), mask)
            else:
                table = {}
            vol = load_feature_volume(manifest, rec, model_key)
            items.append({"volume": vol.values, "centroids": centroids,
                          "labels": table, "image_size": mask.shape})
        return items

    train = collect("train")
    if not train:
        raise ValueError("train split has no records with instance masks")

    pool_classes, pool_slots = [], []
    for i, item in enumerate(train):
        for slot, (oid, _, _) in enumerate(item["centroids"]):
            if oid in item["labels"]:
                pool_slots.append((i, slot))
                pool_classes.append(item["labels"][oid])
    if not pool_slots:
        raise ValueError("no labeled objects in the train split")
    chosen = sample_objects(np.arange(len(pool_slots)), np.array(pool_classes),
                            budget)
    if len(np.unique(np.array(pool_classes)[chosen])) == 1:
        import warnings
        warnings.warn("sampled budget covers a single class; training anyway")

    probe = ObapProbe(n_classes=manifest.n_classes,
                      feature_channels=train[0]["volume"].shape[2],
                      n_max=n_max, width=width, heads=heads,
                      sigma_init=sigma_init, seed=cfg.seed)

    sampled_by_image: dict[int, np.ndarray] = {}
    class_by_image: dict[int, np.ndarray] = {}
    for pool_idx in chosen:
        img, slot = pool_slots[pool_idx]
        if img not in sampled_by_image:
            sampled_by_image[img] = np.zeros(n_max, dtype=bool)
            vec = np.zeros(n_max, dtype=np.int64)
            for s, (oid, _, _) in enumerate(train[img]["centroids"]):
                vec[s] = train[img]["labels"].get(oid, 0)
            class_by_image[img] = vec
        sampled_by_image[img][slot] = True

    val = collect("val")

    optimizer = Adam(probe.parameters(), lr=cfg.learning_rate)
    train_ids = sorted(sampled_by_image)
    rng = np.random.default_rng(cfg.seed)
    best_f1, best_state = -1.0, None
    history = []
    iteration = 0
    started = time.perf_counter()
    while iteration < cfg.iterations:
        epoch = rng.permutation(train_ids)
        for start in range(0, len(epoch), cfg.batch_size):
            if iteration >= cfg.iterations:
                break
            batch = epoch[start:start + cfg.batch_size]
            optimizer.zero_grad()
            total = None
            for i in batch:
                item = train[i]
                logits, _ = probe.forward(item["volume"], item["centroids"],
                                          item["image_size"])
                loss = masked_ce_loss(logits, class_by_image[i], sampled_by_image[i])
                total = loss if total is None else total + loss
            (total * (1.0 / len(batch))).backward()
            optimizer.step()
            iteration += 1
            if val and (iteration % cfg.val_interval == 0 or iteration == cfg.iterations):
                f1 = _validation_f1(probe, val)
                history.append((iteration, f1))
                if progress is not None:
                    progress(iteration, f1)
                if f1 is not None and f1 > best_f1:
                    best_f1, best_state = f1, probe.snapshot()
    if best_state is not None:
        probe.restore(best_state)
    report = {"history": history, "train_seconds": time.perf_counter() - started,
              "best_val_f1": best_f1 if best_f1 >= 0 else None}
    return probe, report


def _validation_f1(probe: ObapProbe, items) -> float | None:
    truth, pred = {}, {}
    for i, item in enumerate(items):
        if not item["labels"]:
            continue
        predictions = probe.predict(item["volume"], item["centroids"],
                                    item["image_size"])
        for oid, cls in item["labels"].items():
            truth[(i, oid)] = cls
            pred[(i, oid)] = predictions[oid]
    if not truth:
        return None
    cm = evaluate_objects(pred, truth, probe.n_classes)
    return macro_f1(cm)
