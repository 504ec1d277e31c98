"""Feature-volume and raster file formats, dataset manifests, resampling.

Binary layout shared by all three raster formats, little-endian throughout:

    magic (4 bytes) | version u32 | dtype code u32 | dims u32 ... | payload

Feature volumes ("FVOL", dtype 0 = float32, dims H,W,C, payload row-major
with channels fastest) may carry trailing provenance: a u32 byte length
followed by that many bytes of UTF-8 JSON. Label rasters ("LBLS", dtype
2 = uint16, dims H,W) use 0 for unlabeled and 1..K for classes. Instance
rasters ("INST", dtype 3 = uint32, dims H,W) use 0 for background.
Round-trips are bit-exact.

Labels may alternatively live in single-channel 8/16-bit PNG files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FVOL_MAGIC = b"FVOL"
LABEL_MAGIC = b"LBLS"
INSTANCE_MAGIC = b"INST"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 2: np.dtype("<u2"), 3: np.dtype("<u4")}


class FormatError(ValueError):
    """Malformed binary file; message carries the byte offset of the problem."""


@dataclass
class FeatureVolume:
    """Dense per-pixel embeddings, shape (H, W, C) float32."""

    values: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"feature volume must be (H,W,C), got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ValueError(f"feature volume dims must be >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature volume contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def _read_exact(fh, n: int, what: str):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated file at offset {fh.tell() - len(data)}: "
            f"expected {n} bytes for {what}, got {len(data)}"
        )
    return data


def _read_header(fh, magic: bytes, dtype_code: int, n_dims: int) -> tuple:
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise FormatError(f"bad magic at offset 0: expected {magic!r}, got {got!r}")
    version, code = struct.unpack("<II", _read_exact(fh, 8, "version/dtype"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if code != dtype_code:
        raise FormatError(f"unsupported dtype code {code} at offset 8")
    dims = struct.unpack(f"<{n_dims}I", _read_exact(fh, 4 * n_dims, "dims"))
    if min(dims) < 1:
        raise FormatError(f"dims must be >= 1, got {dims}")
    return dims


def write_feature_volume(volume: FeatureVolume, path) -> None:
    h, w, c = volume.values.shape
    with open(path, "wb") as fh:
        fh.write(FVOL_MAGIC)
        fh.write(struct.pack("<IIIII", FORMAT_VERSION, 0, h, w, c))
        fh.write(volume.values.astype("<f4", copy=False).tobytes())
        if volume.provenance:
            blob = volume.provenance.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_feature_volume(path) -> FeatureVolume:
    with open(path, "rb") as fh:
        h, w, c = _read_header(fh, FVOL_MAGIC, 0, 3)
        payload = _read_exact(fh, h * w * c * 4, f"{h}x{w}x{c} float32 payload")
        values = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
        provenance = ""
        tail = fh.read(4)
        if tail:
            if len(tail) != 4:
                raise FormatError(f"truncated provenance length at offset {fh.tell() - len(tail)}")
            (n,) = struct.unpack("<I", tail)
            provenance = _read_exact(fh, n, "provenance").decode("utf-8")
            extra = fh.read(1)
            if extra:
                raise FormatError(f"trailing garbage at offset {fh.tell() - 1}")
    return FeatureVolume(values.copy(), provenance=provenance)


def _write_raster(array: np.ndarray, path, magic: bytes, code: int) -> None:
    h, w = array.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, code, h, w))
        fh.write(array.astype(_DTYPE_CODES[code], copy=False).tobytes())


def _read_raster(path, magic: bytes, code: int) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = _read_header(fh, magic, code, 2)
        dt = _DTYPE_CODES[code]
        payload = _read_exact(fh, h * w * dt.itemsize, f"{h}x{w} payload")
        extra = fh.read(1)
        if extra:
            raise FormatError(f"trailing garbage at offset {fh.tell() - 1}")
        return np.frombuffer(payload, dtype=dt).reshape(h, w).copy()


def write_label_image(labels: np.ndarray, path) -> None:
    """Write a uint16 class raster (0 = unlabeled) as .lbl or single-channel PNG."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label image must be 2-D, got {labels.shape}")
    if labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max:
        raise ValueError("labels out of uint16 range")
    if str(path).lower().endswith(".png"):
        Image.fromarray(labels.astype(np.uint16), mode="I;16").save(path)
    else:
        _write_raster(labels.astype(np.uint16), path, LABEL_MAGIC, 2)


def read_label_image(path) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        img = Image.open(path)
        if img.mode not in ("L", "I", "I;16", "P"):
            raise FormatError(f"label PNG must be single-channel, got mode {img.mode}")
        arr = np.asarray(img)
        if arr.ndim != 2:
            raise FormatError("label PNG must be single-channel")
        return arr.astype(np.uint16)
    return _read_raster(path, LABEL_MAGIC, 2)


def write_instance_mask(ids: np.ndarray, path) -> None:
    """Write a uint32 instance-id raster (0 = background)."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"instance mask must be 2-D, got {ids.shape}")
    _write_raster(ids.astype(np.uint32), path, INSTANCE_MAGIC, 3)


def read_instance_mask(path) -> np.ndarray:
    return _read_raster(path, INSTANCE_MAGIC, 3)


def read_image(path) -> np.ndarray:
    """Load an 8/16-bit grayscale or RGB PNG as float32, (H,W) or (H,W,3)."""
    img = Image.open(path)
    if img.mode in ("L", "I", "I;16"):
        return np.asarray(img).astype(np.float32)
    if img.mode == "RGB":
        return np.asarray(img).astype(np.float32)
    if img.mode == "RGBA":
        return np.asarray(img.convert("RGB")).astype(np.float32)
    raise FormatError(f"unsupported image mode {img.mode} for {path}")


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Collapse an (H,W,3) image to (H,W) by channel mean; pass 2-D through."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        return image
    if image.ndim == 3:
        return image.mean(axis=2)
    raise ValueError(f"expected 2-D or 3-D image, got shape {image.shape}")


# -- resampling ---------------------------------------------------------------


def _nearest_source_indices(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel-centers convention: output center mapped into input grid
    src = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def resize_features(volume: FeatureVolume, height: int, width: int,
                    mode: str = "bilinear") -> FeatureVolume:
    """Per-channel resize with independent per-axis scaling (half-pixel centers)."""
    if height < 1 or width < 1:
        raise ValueError(f"target dims must be >= 1, got {height}x{width}")
    v = volume.values
    h, w, _ = v.shape
    if mode == "nearest":
        rows = _nearest_source_indices(height, h)
        cols = _nearest_source_indices(width, w)
        out = v[rows][:, cols]
    elif mode == "bilinear":
        out = _bilinear_resize(v, height, width)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return FeatureVolume(out, provenance=volume.provenance)


def _linear_coeffs(n_out: int, n_in: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = (src - lo).astype(np.float32)
    return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), frac


def _bilinear_resize(values: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = values.shape[:2]
    rlo, rhi, rf = _linear_coeffs(height, h)
    clo, chi, cf = _linear_coeffs(width, w)
    rows = values[rlo] * (1 - rf)[:, None, None] + values[rhi] * rf[:, None, None]
    return rows[:, clo] * (1 - cf)[None, :, None] + rows[:, chi] * cf[None, :, None]


def resize_nearest_raster(raster: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize of an integer raster; never invents a value."""
    if height < 1 or width < 1:
        raise ValueError(f"target dims must be >= 1, got {height}x{width}")
    raster = np.asarray(raster)
    rows = _nearest_source_indices(height, raster.shape[0])
    cols = _nearest_source_indices(width, raster.shape[1])
    return raster[rows][:, cols]


def project_labels(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Project a sparse class raster onto a new grid (nearest neighbor)."""
    return resize_nearest_raster(labels, height, width)


# -- dataset manifests ----------------------------------------------------------


@dataclass
class ManifestRecord:
    image: str
    features: dict[str, str] = field(default_factory=dict)
    labels: str | None = None
    instances: str | None = None
    object_labels: str | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """Enumeration of images, rasters and feature volumes with fixed splits."""

    classes: list[str]
    records: list[ManifestRecord]
    base_dir: Path

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split(self, tag: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == tag]

    def resolve(self, relpath: str) -> Path:
        return self.base_dir / relpath


VALID_SPLITS = ("train", "val", "test")


def read_object_labels(path, n_classes: int) -> dict[int, int]:
    """Parse an 'instance_id,class_index' CSV into an id -> class map."""
    table = {}
    with open(path, newline="") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or (ln == 1 and line.lower().startswith("instance_id")):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{ln}: expected 'instance_id,class_index'")
            oid, cls = int(parts[0]), int(parts[1])
            if not (1 <= cls <= n_classes):
                raise ValueError(f"{path}:{ln}: class index {cls} out of range 1..{n_classes}")
            table[oid] = cls
    return table


def write_object_labels(table: dict[int, int], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("instance_id,class_index\n")
        for oid in sorted(table):
            fh.write(f"{oid},{table[oid]}\n")


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    """Load and validate a manifest JSON file.

    Validation checks that every referenced file exists, split tags are
    known, and label values stay within the declared class count.
    """
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    classes = doc.get("classes")
    if not isinstance(classes, list) or not classes:
        raise ValueError("manifest must declare a non-empty 'classes' list")
    records = []
    problems = []
    for i, rec in enumerate(doc.get("records", [])):
        split = rec.get("split", "train")
        if split not in VALID_SPLITS:
            raise ValueError(f"record {i}: unknown split tag {split!r}")
        record = ManifestRecord(
            image=rec["image"],
            features=dict(rec.get("features", {})),
            labels=rec.get("labels"),
            instances=rec.get("instances"),
            object_labels=rec.get("object_labels"),
            split=split,
        )
        records.append(record)
        if validate:
            refs = [record.image, record.labels, record.instances, record.object_labels]
            refs += list(record.features.values())
            for ref in refs:
                if ref is not None and not (path.parent / ref).exists():
                    problems.append(f"record {i}: missing file {ref}")
    if problems:
        raise FileNotFoundError("manifest references missing files:\n  " + "\n  ".join(problems))
    manifest = DatasetManifest(classes=list(classes), records=records, base_dir=path.parent)
    if validate:
        k = manifest.n_classes
        for i, rec in enumerate(records):
            if rec.labels is not None:
                lbl = read_label_image(manifest.resolve(rec.labels))
                if lbl.max(initial=0) > k:
                    raise ValueError(
                        f"record {i}: label value {int(lbl.max())} exceeds class count {k}"
                    )
            if rec.object_labels is not None:
                read_object_labels(manifest.resolve(rec.object_labels), k)
    return manifest
