"""Hand-crafted baseline features: multiscale filter bank and region properties.

The pixel filter bank computes, per Gaussian scale: smoothing, Laplacian,
gradient magnitude, difference of smoothings between consecutive scales,
and the ordered eigenvalues of the structure tensor and of the Hessian.
Smoothing uses a separable sampled-Gaussian kernel truncated at ceil(3*sigma)
with reflect boundary handling; derivatives are central differences of the
smoothed image, so a linear ramp has unit gradient in the interior at every
scale and constant images produce exactly zero derivative channels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import ConvexHull, QhullError

from .store import FeatureVolume

FILTER_NAMES = (
    "gaussian",
    "laplacian",
    "gradient_magnitude",
    "difference_of_gaussians",
    "structure_tensor_eigenvalues",
    "hessian_eigenvalues",
)

DEFAULT_SCALES = (0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class FilterBankConfig:
    scales: tuple[float, ...] = DEFAULT_SCALES
    filters: tuple[str, ...] = FILTER_NAMES

    def __post_init__(self):
        if not self.scales:
            raise ValueError("need at least one scale")
        if any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if any(a >= b for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly ascending, got {self.scales}")
        unknown = set(self.filters) - set(FILTER_NAMES)
        if unknown:
            raise ValueError(f"unknown filters {sorted(unknown)}")
        if not self.filters:
            raise ValueError("need at least one filter")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian, truncated at ceil(3*sigma), normalized to sum 1."""
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with reflect boundary handling."""
    k = gaussian_kernel(sigma)
    out = correlate1d(np.asarray(image, dtype=np.float64), k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def _central_diff(image: np.ndarray, axis: int) -> np.ndarray:
    return correlate1d(image, np.array([0.5, 0.0, -0.5]), axis=axis, mode="reflect")


def _second_diff(image: np.ndarray, axis: int) -> np.ndarray:
    return correlate1d(image, np.array([1.0, -2.0, 1.0]), axis=axis, mode="reflect")


def _eigenvalues_2x2(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Ordered eigenvalues (large, small) of the symmetric matrix [[a, b], [b, c]]."""
    half_trace = 0.5 * (a + c)
    root = np.sqrt(np.square(0.5 * (a - c)) + np.square(b))
    return half_trace + root, half_trace - root


def channel_names(cfg: FilterBankConfig = FilterBankConfig()) -> list[str]:
    """Channel labels in output order, e.g. 'gaussian(s=1.0)'."""
    names = []
    for f in cfg.filters:
        if f == "difference_of_gaussians":
            for lo, hi in zip(cfg.scales, cfg.scales[1:]):
                names.append(f"difference_of_gaussians(s={lo}-{hi})")
        elif f in ("structure_tensor_eigenvalues", "hessian_eigenvalues"):
            for s in cfg.scales:
                names.append(f"{f}.l1(s={s})")
                names.append(f"{f}.l2(s={s})")
        else:
            for s in cfg.scales:
                names.append(f"{f}(s={s})")
    return names


def pixel_filter_bank(image: np.ndarray,
                      cfg: FilterBankConfig = FilterBankConfig()) -> FeatureVolume:
    """Multiscale filter responses of a single-channel image as a feature volume.

    Difference-of-Gaussians pairs consecutive configured scales, so it
    contributes len(scales) - 1 channels; every other filter contributes one
    (or two, for eigenvalue pairs) channel per scale.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"filter bank expects a single-channel image, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")

    smoothed = {s: gaussian_smooth(image, s) for s in cfg.scales}
    channels: list[np.ndarray] = []
    for f in cfg.filters:
        if f == "gaussian":
            channels.extend(smoothed[s] for s in cfg.scales)
        elif f == "laplacian":
            for s in cfg.scales:
                channels.append(_second_diff(smoothed[s], 0) + _second_diff(smoothed[s], 1))
        elif f == "gradient_magnitude":
            for s in cfg.scales:
                gr = _central_diff(smoothed[s], 0)
                gc = _central_diff(smoothed[s], 1)
                channels.append(np.sqrt(gr * gr + gc * gc))
        elif f == "difference_of_gaussians":
            for lo, hi in zip(cfg.scales, cfg.scales[1:]):
                channels.append(smoothed[hi] - smoothed[lo])
        elif f == "structure_tensor_eigenvalues":
            for s in cfg.scales:
                gr = _central_diff(smoothed[s], 0)
                gc = _central_diff(smoothed[s], 1)
                # integrate the outer product at the same scale
                a = gaussian_smooth(gr * gr, s)
                b = gaussian_smooth(gr * gc, s)
                c = gaussian_smooth(gc * gc, s)
                hi_ev, lo_ev = _eigenvalues_2x2(a, b, c)
                channels.extend((hi_ev, lo_ev))
        elif f == "hessian_eigenvalues":
            for s in cfg.scales:
                frr = _second_diff(smoothed[s], 0)
                fcc = _second_diff(smoothed[s], 1)
                frc = _central_diff(_central_diff(smoothed[s], 0), 1)
                hi_ev, lo_ev = _eigenvalues_2x2(frr, frc, fcc)
                channels.extend((hi_ev, lo_ev))
    return FeatureVolume(np.stack(channels, axis=-1).astype(np.float32))


# -- region properties ------------------------------------------------------------

REGION_FEATURE_NAMES = (
    "area", "mean_intensity", "max_intensity", "min_intensity", "perimeter",
    "eccentricity", "solidity", "extent", "major_axis_length",
    "minor_axis_length", "orientation", "centroid_row", "centroid_col",
)


@dataclass(frozen=True)
class RegionFeatures:
    """Shape and intensity descriptors of one labeled region."""

    area: float
    mean_intensity: float
    max_intensity: float
    min_intensity: float
    perimeter: float
    eccentricity: float
    solidity: float
    extent: float
    major_axis_length: float
    minor_axis_length: float
    orientation: float
    centroid_row: float
    centroid_col: float

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in REGION_FEATURE_NAMES],
                        dtype=np.float32)


def _perimeter(rows: np.ndarray, cols: np.ndarray) -> float:
    """Count of exposed unit pixel edges (4-connectivity boundary length)."""
    r = rows - rows.min() + 1
    c = cols - cols.min() + 1
    box = np.zeros((r.max() + 2, c.max() + 2), dtype=bool)
    box[r, c] = True
    vertical = (box[1:, :] != box[:-1, :]).sum()
    horizontal = (box[:, 1:] != box[:, :-1]).sum()
    return float(vertical + horizontal)


def _convex_area(rows: np.ndarray, cols: np.ndarray) -> float:
    """Area of the convex hull of the pixel squares (corners at +-0.5)."""
    corners = np.empty((4 * len(rows), 2), dtype=np.float64)
    for i, (dr, dc) in enumerate(((-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5))):
        corners[i::4, 0] = rows + dr
        corners[i::4, 1] = cols + dc
    try:
        return float(ConvexHull(corners).volume)
    except QhullError:
        # degenerate input cannot happen for unit squares, but stay safe
        return float(len(rows))


def region_props(image: np.ndarray, instance_mask: np.ndarray,
                 ids=None) -> dict[int, RegionFeatures]:
    """Per-instance region features; centroid is the pixel-coordinate mean.

    Axis lengths, orientation and eccentricity come from the second central
    moments of the pixel coordinates with the unit-square correction (+1/12
    per axis), so even single-pixel or collinear regions have a positive
    minor axis and eccentricity strictly below 1. Orientation is the angle
    in radians between the major axis and the column axis, in (-pi/2, pi/2].

    `ids` restricts the computation; a requested id absent from the mask is
    skipped with a warning.
    """
    image = np.asarray(image, dtype=np.float64)
    instance_mask = np.asarray(instance_mask)
    if image.shape != instance_mask.shape:
        raise ValueError(f"image {image.shape} and mask {instance_mask.shape} disagree")
    out: dict[int, RegionFeatures] = {}
    for oid in (np.unique(instance_mask) if ids is None else ids):
        if oid == 0:
            continue
        rows, cols = np.nonzero(instance_mask == oid)
        if len(rows) == 0:
            warnings.warn(f"instance id {oid} has no pixels; skipped")
            continue
        area = len(rows)
        cr, cc = rows.mean(), cols.mean()
        dr, dc = rows - cr, cols - cc
        cov = np.array([
            [dr @ dr / area + 1.0 / 12.0, dr @ dc / area],
            [dr @ dc / area, dc @ dc / area + 1.0 / 12.0],
        ])
        evals, evecs = np.linalg.eigh(cov)  # ascending
        lam_small, lam_big = float(evals[0]), float(evals[1])
        major_vec = evecs[:, 1]
        angle = math.atan2(major_vec[0], major_vec[1])
        if angle <= -math.pi / 2:
            angle += math.pi
        elif angle > math.pi / 2:
            angle -= math.pi
        vals = image[rows, cols]
        r0, r1 = rows.min(), rows.max()
        c0, c1 = cols.min(), cols.max()
        bbox_area = (r1 - r0 + 1) * (c1 - c0 + 1)
        out[int(oid)] = RegionFeatures(
            area=float(area),
            mean_intensity=float(vals.mean()),
            max_intensity=float(vals.max()),
            min_intensity=float(vals.min()),
            perimeter=_perimeter(rows, cols),
            eccentricity=math.sqrt(max(0.0, 1.0 - lam_small / lam_big)),
            solidity=min(1.0, area / _convex_area(rows, cols)),
            extent=area / bbox_area,
            major_axis_length=4.0 * math.sqrt(lam_big),
            minor_axis_length=4.0 * math.sqrt(lam_small),
            orientation=angle,
            centroid_row=float(cr),
            centroid_col=float(cc),
        )
    return out
