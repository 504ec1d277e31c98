"""Training configuration shared by both probe trainers."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10_000
    learning_rate: float = 1e-3
    dice_weight: float = 0.5
    ce_weight: float = 0.5
    batch_size: int = 1
    seed: int = 0
    val_interval: int = 250

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.dice_weight < 0 or self.ce_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dice_weight == 0 and self.ce_weight == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
