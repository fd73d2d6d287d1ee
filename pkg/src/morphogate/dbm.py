"""Deformation-based morphometry on displacement fields.

The local volume change of a warp phi(x) = x + u(x) is the determinant of its
Jacobian, J(x) = det(I + grad u). Derivatives are taken in physical
coordinates: central differences on interior voxels, one-sided differences on
the boundary faces. The per-voxel log determinant is then smoothed with a
separable Gaussian whose width is given in millimetres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import GridTooSmall, NonDiffeomorphicField
from .volume import DeformationField, GridGeometry, ScalarVolume


@dataclass(frozen=True)
class DbmConfig:
    """Knobs for the morphometry pipeline.

    sigma_mm: Gaussian smoothing width; 0 disables smoothing.
    max_nonpositive_fraction: tolerated fraction of voxels with det <= 0.
    clamp_epsilon: when set, dets are floored at this value before the log.
    """

    sigma_mm: float = 1.0
    max_nonpositive_fraction: float = 0.0
    clamp_epsilon: float | None = None

    def __post_init__(self):
        if self.sigma_mm < 0:
            raise ValueError("sigma_mm must be >= 0")
        if not 0.0 <= self.max_nonpositive_fraction <= 1.0:
            raise ValueError("max_nonpositive_fraction must be in [0, 1]")
        if self.clamp_epsilon is not None and self.clamp_epsilon <= 0:
            raise ValueError("clamp_epsilon must be positive when set")


@dataclass
class JacobianField:
    """Per-voxel Jacobian of a warp; tensor[..., a, b] = d phi_a / d x_b."""

    geometry: GridGeometry
    tensor: np.ndarray  # (s, h, w, 3, 3)

    def __post_init__(self):
        if self.tensor.shape != self.geometry.dims + (3, 3):
            raise ValueError(f"Jacobian tensor shape {self.tensor.shape} does not match grid")


@dataclass
class DbmReport:
    """Summary emitted alongside a log-determinant map."""

    nonpositive_voxels: int
    min_det: float
    max_det: float
    mean_log: float | None = None

    def as_dict(self) -> dict:
        return {
            "nonpositive_voxels": self.nonpositive_voxels,
            "min_J": self.min_det,
            "max_J": self.max_det,
            "mean_lJ": self.mean_log,
        }


def jacobian(field: DeformationField) -> JacobianField:
    """Finite-difference Jacobian of phi = x + u on the field's grid.

    Exact for displacement fields that are linear in x, including at the
    boundary, because one-sided first-order differences are exact on linear
    functions.
    """
    dims = field.geometry.dims
    if any(d < 3 for d in dims):
        raise GridTooSmall(f"Jacobian needs >= 3 voxels per axis, got {dims}")
    spacing = field.geometry.spacing
    tensor = np.zeros(dims + (3, 3), dtype=np.float64)
    for a in range(3):
        grads = np.gradient(field.displacement[a], *spacing, edge_order=1)
        for b in range(3):
            tensor[..., a, b] = grads[b]
        tensor[..., a, a] += 1.0
    return JacobianField(field.geometry, tensor)


def determinant_map(jac: JacobianField) -> np.ndarray:
    """Closed-form 3x3 determinant per voxel."""
    t = jac.tensor
    a, b, c = t[..., 0, 0], t[..., 0, 1], t[..., 0, 2]
    d, e, f = t[..., 1, 0], t[..., 1, 1], t[..., 1, 2]
    g, h, i = t[..., 2, 0], t[..., 2, 1], t[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def log_jacobian(jac: JacobianField, cfg: DbmConfig = DbmConfig()) -> tuple[ScalarVolume, DbmReport]:
    """Per-voxel log determinant plus a report of nonpositive-det voxels.

    Voxels with det <= 0 have no log; they are floored at cfg.clamp_epsilon
    when clamping is enabled. Without clamping any such voxel is fatal once
    the fraction exceeds cfg.max_nonpositive_fraction (and a nonzero fraction
    cannot produce a finite map at all, so it is rejected either way).
    """
    det = determinant_map(jac)
    nonpositive = int(np.count_nonzero(det <= 0.0))
    fraction = nonpositive / det.size
    report = DbmReport(
        nonpositive_voxels=nonpositive,
        min_det=float(det.min()),
        max_det=float(det.max()),
    )
    if cfg.clamp_epsilon is not None:
        safe = np.maximum(det, cfg.clamp_epsilon)
    else:
        if fraction > cfg.max_nonpositive_fraction:
            raise NonDiffeomorphicField(fraction)
        if nonpositive:
            raise NonDiffeomorphicField(
                fraction,
                f"{nonpositive} voxels have nonpositive determinant and clamping is "
                "disabled; set clamp_epsilon to floor them",
            )
        safe = det
    log_map = np.log(safe)
    return ScalarVolume(jac.geometry, log_map), report


def gaussian_kernel_1d(sigma_voxels: float) -> np.ndarray:
    """Normalized Gaussian taps with radius ceil(3 sigma)."""
    radius = math.ceil(3.0 * sigma_voxels)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma_voxels * sigma_voxels))
    return kernel / kernel.sum()


def gaussian_smooth(vol: ScalarVolume, sigma_mm: float) -> ScalarVolume:
    """Separable Gaussian smoothing with replicate-edge boundary handling.

    The width is physical: the per-axis kernel uses sigma_mm / spacing voxels,
    so anisotropic grids smooth isotropically in millimetres. sigma_mm = 0 is
    the identity.
    """
    if sigma_mm < 0:
        raise ValueError("sigma_mm must be >= 0")
    if sigma_mm == 0.0:
        return ScalarVolume(vol.geometry, vol.data.copy())
    out = vol.data
    for axis, spacing in enumerate(vol.geometry.spacing):
        kernel = gaussian_kernel_1d(sigma_mm / spacing)
        out = ndimage.convolve1d(out, kernel, axis=axis, mode="nearest")
    return ScalarVolume(vol.geometry, out)


def dbm_pipeline(field: DeformationField, cfg: DbmConfig = DbmConfig()) -> tuple[ScalarVolume, DbmReport]:
    """Field -> Jacobian -> log determinant -> smoothed map, with report."""
    jac = jacobian(field)
    log_map, report = log_jacobian(jac, cfg)
    smoothed = gaussian_smooth(log_map, cfg.sigma_mm)
    report = replace(report, mean_log=float(smoothed.data.mean()))
    return smoothed, report
