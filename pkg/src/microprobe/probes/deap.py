"""Dense attentive probing: per-pixel classification from a frozen feature volume.

A fixed grid of queries (one per 8x8 block of the input image, sinusoidally
encoded and linearly projected) cross-attends to the feature volume under a
per-head Gaussian locality prior, passes a two-layer FFN, and is decoded by
a small convolutional network (three bilinear-2x + conv stages, then 1x1)
back to full image resolution with one channel per class.

Training minimizes a weighted sum of Dice and cross-entropy restricted to a
sampled set of labeled pixels; everything outside the sampled mask is
excluded from the objective and receives exactly zero gradient.
"""

from __future__ import annotations

import time

import numpy as np

from ..autodiff import (Adam, Conv2d, FeedForward, Linear, Module, Tensor,
                        div, upsample2x_bilinear)
from ..metrics import ConfusionMatrix, evaluate_pixels, macro_f1
from ..sampling import PixelBudget, sample_pixels_probe
from ..store import FeatureVolume, project_labels
from .attention import (GaussianMaskedCrossAttention, image_to_feature_coords,
                        sinusoidal_encoding)
from .config import TrainConfig

DOWNSCALE = 8  # query grid cells cover 8x8 image pixels; the decoder undoes it


def _grid_positions(side: int, cell: float) -> np.ndarray:
    """Image-space centers of a side x side grid with the given cell size."""
    centers = (np.arange(side) + 0.5) * cell - 0.5
    rr, cc = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def _feature_positions(h: int, w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


class DeapProbe(Module):
    """Dense probe over feature volumes of a fixed input size.

    input_size is the side length of the (square) images the features were
    computed from; the feature volume itself may live at any resolution.
    """

    def __init__(self, n_classes: int, feature_channels: int,
                 input_size: int = 1024, width: int = 256, heads: int = 4,
                 ffn_hidden: int | None = None, sigma_init: float = 8.0,
                 seed: int = 0):
        if input_size % DOWNSCALE != 0:
            raise ValueError(f"input_size must be divisible by {DOWNSCALE}, got {input_size}")
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        self.n_classes = n_classes
        self.feature_channels = feature_channels
        self.input_size = input_size
        self.width = width
        self.heads = heads
        self.ffn_hidden = ffn_hidden or 2 * width
        self.sigma_init = sigma_init
        self.seed = seed
        self.grid = input_size // DOWNSCALE

        rng = np.random.default_rng(seed)
        self.feat_proj = Linear(feature_channels, width, rng, name="feat_proj")
        self.query_proj = Linear(width, width, rng, name="query_proj")
        self.attention = GaussianMaskedCrossAttention(width, heads, rng,
                                                      sigma_init=sigma_init)
        self.ffn = FeedForward(width, self.ffn_hidden, width, rng)
        widths = [width]
        for _ in range(3):
            widths.append(max(widths[-1] // 2, min(width, 16)))
        self.decoder = [
            Conv2d(widths[i], widths[i + 1], 3, rng, padding=1, name=f"dec{i}")
            for i in range(3)
        ]
        self.classify = Conv2d(widths[3], n_classes, 1, rng, padding=0, name="classify")

    def config(self) -> dict:
        return {"kind": "deap", "n_classes": self.n_classes,
                "feature_channels": self.feature_channels,
                "input_size": self.input_size, "width": self.width,
                "heads": self.heads, "ffn_hidden": self.ffn_hidden,
                "sigma_init": self.sigma_init, "seed": self.seed}

    @classmethod
    def from_config(cls, cfg: dict) -> "DeapProbe":
        cfg = {k: v for k, v in cfg.items() if k != "kind"}
        return cls(**cfg)

    def forward(self, volume) -> Tensor:
        """Per-pixel class logits of shape (K, input_size, input_size)."""
        values = volume.values if isinstance(volume, FeatureVolume) else np.asarray(volume)
        fh, fw, fc = values.shape
        if fc != self.feature_channels:
            raise ValueError(
                f"volume has {fc} channels, probe expects {self.feature_channels}")
        pos_q_img = _grid_positions(self.grid, float(DOWNSCALE))
        pos_q = image_to_feature_coords(pos_q_img, (self.input_size, self.input_size),
                                        (fh, fw))
        pos_f = _feature_positions(fh, fw)

        feats = self.feat_proj(Tensor(values.reshape(fh * fw, fc)))
        queries = self.query_proj(Tensor(sinusoidal_encoding(pos_q, self.width)))
        tokens = self.attention(queries, feats, pos_q, pos_f)
        tokens = self.ffn(tokens)
        spatial = tokens.transpose_last2().reshape(self.width, self.grid, self.grid)
        x = spatial
        for conv in self.decoder:
            x = conv(upsample2x_bilinear(x)).relu()
        return self.classify(x)

    def predict(self, volume) -> np.ndarray:
        """Class raster (input_size, input_size) uint16 with labels in 1..K."""
        logits = self.forward(volume)
        return (np.argmax(logits.data, axis=0) + 1).astype(np.uint16)

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for p, data in zip(self.parameters(), snapshot):
            p.data = data.copy()


def masked_dice_ce_loss(logits: Tensor, labels: np.ndarray, sampled: np.ndarray,
                        dice_weight: float = 0.5, ce_weight: float = 0.5,
                        eps: float = 1e-12) -> Tensor:
    """Dice + cross-entropy over the sampled pixel positions only.

    Dice is computed per class over softmax probabilities and averaged over
    the classes present among the sampled pixels. Positions outside the
    sampled mask contribute nothing: their label content cannot change the
    loss value and their logits receive exactly zero gradient.
    """
    k, h, w = logits.shape
    labels = np.asarray(labels).reshape(h * w)
    sampled = np.asarray(sampled, dtype=bool).reshape(h * w)
    if not sampled.any():
        raise ValueError("sampled mask is empty")
    if (labels[sampled] < 1).any():
        raise ValueError("sampled positions must be labeled")

    flat = logits.reshape(k, h * w).transpose_last2()
    probs = flat.softmax()
    onehot = np.zeros((h * w, k), dtype=logits.data.dtype)
    rows = np.flatnonzero(sampled)
    onehot[rows, labels[rows] - 1] = 1.0
    targets = Tensor(onehot, dtype=logits.data.dtype)
    mask_col = Tensor(sampled.astype(logits.data.dtype)[:, None],
                      dtype=logits.data.dtype)
    n_sel = float(sampled.sum())

    loss = None
    if ce_weight > 0:
        log_probs = (probs + eps).log()
        ce_rows = -((targets * log_probs).sum(axes=-1, keepdims=True))
        ce = (ce_rows * mask_col).sum() * (1.0 / n_sel)
        loss = ce * ce_weight
    if dice_weight > 0:
        present = np.zeros(k, dtype=logits.data.dtype)
        present[np.unique(labels[rows]) - 1] = 1.0
        overlap = (probs * targets * mask_col).sum(axes=0)
        pred_mass = (probs * mask_col).sum(axes=0)
        true_mass = (targets * mask_col).sum(axes=0)
        denom = pred_mass + true_mass + Tensor(1.0 - present, dtype=logits.data.dtype)
        dice_per_class = (1.0 - div(overlap * 2.0, denom)) * Tensor(present, dtype=logits.data.dtype)
        dice = dice_per_class.sum() * (1.0 / float(present.sum()))
        term = dice * dice_weight
        loss = term if loss is None else loss + term
    return loss


def _validation_f1(probe: DeapProbe, volumes: list, label_maps: list,
                   n_classes: int) -> float | None:
    cm = None
    for values, labels in zip(volumes, label_maps):
        pred = probe.predict(values)
        part = evaluate_pixels(pred, labels, n_classes)
        cm = part if cm is None else cm.merge(part)
    if cm is None:
        return None
    return macro_f1(cm)


def deap_train(manifest, model_key: str, budget: PixelBudget,
               cfg: TrainConfig = TrainConfig(), input_size: int | None = None,
               width: int = 256, heads: int = 4, sigma_init: float = 8.0,
               progress=None):
    """Train a dense probe on a manifest's train split under a pixel budget.

    Returns (probe, history). The checkpoint with the best validation macro
    F1 (evaluated every cfg.val_interval iterations) is restored at the end;
    without a validation split the final parameters are kept.
    """
    from ..features import load_feature_volume  # local import: avoids a cycle

    train = [r for r in manifest.split("train") if r.labels is not None]
    if not train:
        raise ValueError("train split has no labeled records")

    volumes, label_maps = [], []
    for rec in train:
        vol = load_feature_volume(manifest, rec, model_key)
        labels = _load_projected_labels(manifest, rec, input_size)
        if input_size is None:
            input_size = labels.shape[0]
        volumes.append(vol.values)
        label_maps.append(labels)

    label_dict = {i: m for i, m in enumerate(label_maps)}
    picked = sample_pixels_probe(label_dict, budget)
    sampled_masks = {}
    for i, pixels in picked.items():
        mask = np.zeros_like(label_maps[i], dtype=bool)
        for r, c in pixels:
            mask[r, c] = True
        sampled_masks[i] = mask
    sampled_classes = np.unique(np.concatenate(
        [label_maps[i][m] for i, m in sampled_masks.items()]))
    if len(sampled_classes) == 1:
        import warnings
        warnings.warn("sampled budget covers a single class; training anyway")

    probe = DeapProbe(n_classes=manifest.n_classes,
                      feature_channels=volumes[0].shape[2],
                      input_size=input_size, width=width, heads=heads,
                      sigma_init=sigma_init, seed=cfg.seed)

    val = [r for r in manifest.split("val") if r.labels is not None]
    val_volumes = [load_feature_volume(manifest, r, model_key).values for r in val]
    val_labels = [_load_projected_labels(manifest, r, input_size) for r in val]

    optimizer = Adam(probe.parameters(), lr=cfg.learning_rate)
    train_ids = sorted(sampled_masks)
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
                logits = probe.forward(volumes[i])
                loss = masked_dice_ce_loss(logits, label_maps[i], sampled_masks[i],
                                           cfg.dice_weight, cfg.ce_weight)
                total = loss if total is None else total + loss
            (total * (1.0 / len(batch))).backward()
            optimizer.step()
            iteration += 1
            if val and (iteration % cfg.val_interval == 0 or iteration == cfg.iterations):
                f1 = _validation_f1(probe, val_volumes, val_labels, manifest.n_classes)
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


def _load_projected_labels(manifest, record, input_size: int | None) -> np.ndarray:
    from ..store import read_label_image

    labels = read_label_image(manifest.resolve(record.labels))
    if input_size is not None and labels.shape != (input_size, input_size):
        labels = project_labels(labels, input_size, input_size)
    return labels
