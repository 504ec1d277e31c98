"""Resolution of feature sources named in manifests.

A model key selects a per-record feature volume file; the reserved key
"filterbank" computes the classical multiscale features from the record's
image instead.
"""

from __future__ import annotations

from .filters import FilterBankConfig, pixel_filter_bank
from .store import (DatasetManifest, FeatureVolume, ManifestRecord,
                    read_feature_volume, read_image, to_grayscale)

FILTERBANK_KEY = "filterbank"


def load_feature_volume(manifest: DatasetManifest, record: ManifestRecord,
                        model_key: str,
                        filterbank_cfg: FilterBankConfig = FilterBankConfig()
                        ) -> FeatureVolume:
    if model_key == FILTERBANK_KEY:
        image = to_grayscale(read_image(manifest.resolve(record.image)))
        return pixel_filter_bank(image, filterbank_cfg)
    if model_key not in record.features:
        raise KeyError(
            f"record {record.image!r} has no feature volume for model {model_key!r}; "
            f"available: {sorted(record.features)} or {FILTERBANK_KEY!r}")
    return read_feature_volume(manifest.resolve(record.features[model_key]))
