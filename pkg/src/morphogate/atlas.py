"""Region atlases: one-hot masks over a labelled grid and region pooling.

A label volume with values 0..m (0 = outside the brain) induces m binary
masks that partition the in-brain voxels: every in-brain voxel belongs to
exactly one region mask.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyRegion, GeometryMismatch, LabelOutOfRange, ParcellationFailed
from .seeding import stream
from .volume import GridGeometry, LabelVolume, ScalarVolume


class RegionMasks:
    """One-hot region view over a label volume.

    Masks are exposed as boolean arrays; voxel counts per region are
    precomputed. Use build_masks to construct with validation.
    """

    def __init__(self, labels: LabelVolume, m: int, counts: np.ndarray):
        self.labels = labels
        self.m = m
        self.counts = counts  # (m,) voxels per region 1..m
        self.geometry = labels.geometry

    def mask(self, region: int) -> np.ndarray:
        """Boolean mask of region `region` (1-based)."""
        if not 1 <= region <= self.m:
            raise LabelOutOfRange(f"region {region} outside 1..{self.m}")
        return self.labels.labels == region

    def in_brain(self) -> np.ndarray:
        """Boolean mask of all labelled (nonzero) voxels."""
        return self.labels.labels != 0

    def one_hot(self) -> np.ndarray:
        """(m, s, h, w) stack of all region masks as float64."""
        out = np.zeros((self.m,) + self.geometry.dims, dtype=np.float64)
        for r in range(1, self.m + 1):
            out[r - 1] = self.labels.labels == r
        return out


def build_masks(labels: LabelVolume, m: int) -> RegionMasks:
    """Validate the label volume against a declared region count m."""
    if m < 1:
        raise ValueError("m must be >= 1")
    arr = labels.labels
    top = int(arr.max(initial=0))
    if top > m:
        raise LabelOutOfRange(f"label {top} exceeds declared region count {m}")
    counts = np.bincount(arr.ravel().astype(np.int64), minlength=m + 1)[1 : m + 1]
    for r in range(1, m + 1):
        if counts[r - 1] == 0:
            raise EmptyRegion(r)
    return RegionMasks(labels, m, counts.astype(np.int64))


def region_means(vol: ScalarVolume, masks: RegionMasks) -> np.ndarray:
    """Mean of the volume over each region; vector of length m.

    Linear in the input volume, and for a constant in-region weighting
    w the mean of the weighted volume is w times the mean of the volume.
    """
    if vol.geometry != masks.geometry:
        raise GeometryMismatch(
            f"volume grid {vol.geometry.dims} does not match atlas grid {masks.geometry.dims}"
        )
    flat_labels = masks.labels.labels.ravel().astype(np.int64)
    sums = np.bincount(flat_labels, weights=vol.data.ravel(), minlength=masks.m + 1)
    return sums[1 : masks.m + 1] / masks.counts


def ellipsoid_mask(geometry: GridGeometry) -> np.ndarray:
    """Boolean brain stand-in: ellipsoid inscribed in the grid, axes 90% of extent."""
    coords = geometry.coordinate_grid()
    extent = np.array(
        [(d - 1) * s for d, s in zip(geometry.dims, geometry.spacing)], dtype=np.float64
    )
    centre = extent / 2.0
    semi = 0.45 * extent
    normalized = (coords - centre) / semi
    return np.sum(normalized * normalized, axis=-1) <= 1.0


def procedural_parcellation(
    geometry: GridGeometry, m: int, seed: int, max_retries: int = 8
) -> LabelVolume:
    """Seeded Voronoi parcellation of an ellipsoidal brain mask into m regions.

    Seed voxels are drawn inside the mask; every in-brain voxel takes the
    label of its nearest seed in physical coordinates (ties go to the lowest
    region index). Each seed labels at least itself, so no region is empty.
    """
    mask = ellipsoid_mask(geometry)
    n_inside = int(mask.sum())
    if m < 1 or m > n_inside:
        raise ParcellationFailed(f"cannot place {m} regions inside {n_inside} brain voxels")
    coords = geometry.coordinate_grid()[mask]  # (n_inside, 3) in mm
    rng = stream(seed, "parcellation")
    for attempt in range(max_retries):
        picks = rng.choice(n_inside, size=m, replace=False)
        seeds = coords[picks]
        best_d2 = np.full(n_inside, np.inf)
        nearest = np.zeros(n_inside, dtype=np.int64)
        for idx in range(m):
            d2 = np.sum((coords - seeds[idx]) ** 2, axis=1)
            better = d2 < best_d2  # strict, so ties keep the lower region index
            nearest[better] = idx + 1
            best_d2[better] = d2[better]
        labels = np.zeros(geometry.dims, dtype=np.int64)
        labels[mask] = nearest
        vol = LabelVolume(geometry, labels)
        try:
            build_masks(vol, m)
        except EmptyRegion:
            continue
        return vol
    raise ParcellationFailed(f"no valid parcellation after {max_retries} attempts")
