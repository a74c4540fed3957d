"""Automated lung segmentation: region growing plus circular dilation.

Masks are plain boolean rasters the same shape as the source slice. The
full pipeline thresholds dark voxels, drops components touching the image
border (ambient air), grows regions from the centroids of the two largest
remaining components, unions them and dilates with a Euclidean disc so
subpleural detail near lobule edges survives masking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import MaskError

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}


@dataclass(frozen=True)
class MaskParams:
    """Knobs of the mask pipeline.

    dilation_radius is specified at a 64-px working resolution and scaled
    proportionally for larger slices.
    """

    tau: float = 250.0
    connectivity: int = 8
    dilation_radius: float = 2.0
    border_margin: int = 1
    dark_threshold: float = -500.0
    reference_size: int = 64

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.dilation_radius < 0:
            raise ValueError(f"dilation_radius must be >= 0, got {self.dilation_radius}")
        if self.border_margin < 0:
            raise ValueError(f"border_margin must be >= 0, got {self.border_margin}")


def seed_neighborhood_mean(slice_hu: np.ndarray, seed: tuple[int, int]) -> float:
    """Mean intensity of the 3x3 neighborhood around the seed (clipped at edges)."""
    r, c = seed
    h, w = slice_hu.shape
    patch = slice_hu[max(r - 1, 0):min(r + 2, h), max(c - 1, 0):min(c + 2, w)]
    return float(np.mean(patch))


def region_grow(slice_hu: np.ndarray, seed: tuple[int, int], tau: float,
                connectivity: int = 8) -> np.ndarray:
    """Maximal connected set containing the seed with |I - mu_seed| <= tau.

    mu_seed is the fixed 3x3 neighborhood mean around the seed, so growth
    is order-independent (no running-mean drift). Returns an all-false
    mask when the seed pixel itself fails the criterion.
    """
    slice_hu = np.asarray(slice_hu)
    if slice_hu.ndim != 2 or slice_hu.size == 0:
        raise ValueError(f"expected nonempty 2D slice, got shape {slice_hu.shape}")
    r, c = seed
    h, w = slice_hu.shape
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"seed {seed} outside raster bounds {slice_hu.shape}")
    mu = seed_neighborhood_mean(slice_hu, seed)
    eligible = np.abs(slice_hu.astype(np.float64) - mu) <= tau
    if not eligible[r, c]:
        return np.zeros_like(eligible)
    labels, _ = ndimage.label(eligible, structure=_STRUCTURES[connectivity])
    return labels == labels[r, c]


def dilate_circular(mask: np.ndarray, radius: float) -> np.ndarray:
    """Dilate with a Euclidean disc: p on iff some true q has dist(p,q) <= radius."""
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    out = mask.copy()
    h, w = mask.shape
    r_int = int(math.floor(radius))
    for dy in range(-r_int, r_int + 1):
        for dx in range(-r_int, r_int + 1):
            if dy == 0 and dx == 0:
                continue
            if dy * dy + dx * dx > radius * radius:
                continue
            src = mask[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
            out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] |= src
    return out


def _component_seed(component: np.ndarray) -> tuple[int, int]:
    """Centroid of a component, snapped to the nearest component pixel."""
    rows, cols = np.nonzero(component)
    cr, cc = float(rows.mean()), float(cols.mean())
    r, c = int(round(cr)), int(round(cc))
    if component[r, c]:
        return r, c
    d2 = (rows - cr) ** 2 + (cols - cc) ** 2
    k = int(np.argmin(d2))
    return int(rows[k]), int(cols[k])


def extract_lung_mask(slice_hu: np.ndarray, params: MaskParams | None = None) -> np.ndarray:
    """Full mask pipeline; raises MaskError when no lung-like region exists."""
    params = params or MaskParams()
    slice_hu = np.asarray(slice_hu)
    if slice_hu.ndim != 2 or slice_hu.size == 0:
        raise ValueError(f"expected nonempty 2D slice, got shape {slice_hu.shape}")
    h, w = slice_hu.shape
    dark = slice_hu < params.dark_threshold
    if not dark.any():
        raise MaskError("no lung region: no pixel below the dark threshold")
    labels, n = ndimage.label(dark, structure=_STRUCTURES[params.connectivity])

    m = params.border_margin
    border = np.zeros((h, w), dtype=bool)
    if m > 0:
        border[:m, :] = border[-m:, :] = True
        border[:, :m] = border[:, -m:] = True
    border_labels = set(np.unique(labels[border])) - {0}

    sizes = ndimage.sum_labels(dark, labels, index=np.arange(1, n + 1))
    candidates = [(int(sizes[i - 1]), i) for i in range(1, n + 1)
                  if i not in border_labels]
    if not candidates:
        raise MaskError("no lung region: all dark components touch the border")
    candidates.sort(key=lambda t: (-t[0], t[1]))

    grown = np.zeros((h, w), dtype=bool)
    for _, label_id in candidates[:2]:
        seed = _component_seed(labels == label_id)
        grown |= region_grow(slice_hu, seed, params.tau, params.connectivity)
    if not grown.any():
        raise MaskError("no lung region: region growing produced an empty mask")

    radius = params.dilation_radius * min(h, w) / params.reference_size
    return dilate_circular(grown, radius)


def mask_path_for(slice_path: str | Path) -> Path:
    """Mask file written next to the source slice with suffix .mask.pgm."""
    return Path(slice_path).with_suffix(".mask.pgm")
