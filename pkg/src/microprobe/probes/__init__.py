"""Attentive probing adapters for pixel and object classification."""

from .attention import (GaussianMaskedCrossAttention, gaussian_attention_mask,
                        image_to_feature_coords, sinusoidal_encoding,
                        squared_distances)
from .checkpoint import load_probe, save_probe
from .config import TrainConfig
from .deap import DeapProbe, deap_train, masked_dice_ce_loss
from .obap import (ObapProbe, masked_ce_loss, obap_train, object_centroids,
                   object_labels_from_pixels)

__all__ = [
    "DeapProbe",
    "GaussianMaskedCrossAttention",
    "ObapProbe",
    "TrainConfig",
    "deap_train",
    "gaussian_attention_mask",
    "image_to_feature_coords",
    "load_probe",
    "masked_ce_loss",
    "masked_dice_ce_loss",
    "obap_train",
    "object_centroids",
    "object_labels_from_pixels",
    "save_probe",
    "sinusoidal_encoding",
    "squared_distances",
]
