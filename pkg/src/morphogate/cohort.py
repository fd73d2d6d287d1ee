"""Deterministic synthetic cohort generator.

Stands in for a private clinical dataset: every subject gets a synthetic
brain image, a deformation field with an analytically known Jacobian, and a
clinical record whose motor scores reproduce the ground-truth response label.
Responders carry a focal contraction (negative log-det) in the configured
effect regions; non-responders get nuisance warps and noise only. With
clinical coupling on, disease duration modulates the contraction amplitude
and shifts slightly with response, so the text pathway has learnable signal.

All randomness flows from named child streams of the cohort seed, one per
subject, so generation is order-independent and byte-reproducible.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .atlas import RegionMasks, build_masks, procedural_parcellation
from .clinical import ClinicalRecord, SubjectEntry, write_manifest
from .dbm import determinant_map, gaussian_smooth, jacobian
from .errors import (
    GeometryMismatch,
    MalformedHeader,
    NonPositiveJacobianRequested,
    SpecInvalid,
)
from .seeding import stream
from .volume import (
    DeformationField,
    GridGeometry,
    LabelVolume,
    ScalarVolume,
    read_volume,
    sha256_of_file,
    write_volume,
)

# contraction bump J > 0 iff amplitude stays inside this open interval
BUMP_AMPLITUDE_MIN = -1.0
BUMP_AMPLITUDE_MAX = float(np.exp(1.5) / 2.0)

# generator texture constants
RHO_FRACTION = 0.6  # bump radius relative to the region's equivalent-sphere radius
CENTER_JITTER_MM = 2.5
ENVELOPE_JITTER = 0.25  # per-subject relative spread of the effect-bump envelope
PRIOR_PLANTED = 2.5
PRIOR_BACKGROUND = 0.1
TEMPLATE_MEAN = 100.0
TEMPLATE_SD = 10.0
TEMPLATE_SMOOTH_MM = 4.0
SUBJECT_NOISE_SD = 2.0
SUBJECT_NOISE_SMOOTH_MM = 2.0
RESPONDER_IR = (0.35, 0.75)
NONRESPONDER_IR = (-0.10, 0.25)
DEV_FRACTION = 0.8
MAX_FIELD_REDRAWS = 4
TARGET_MEAN_LJ_MAX = 0.5
EXPANSION_RHO_SCALE = 1.75


# ---------------------------------------------------------------------------
# analytic warps


class IdentityWarp:
    """Zero displacement; J = 1 everywhere."""

    def displacement(self, points: np.ndarray) -> np.ndarray:
        return np.zeros_like(points)

    def jacobian_matrix(self, points: np.ndarray) -> np.ndarray:
        return np.zeros(points.shape[:-1] + (3, 3), dtype=np.float64)

    def jacobian_det(self, points: np.ndarray) -> np.ndarray:
        return np.ones(points.shape[:-1], dtype=np.float64)

    def sample(self, geometry: GridGeometry) -> DeformationField:
        return _sample(self, geometry)


@dataclass(frozen=True)
class AffineWarp:
    """x + u(x) = M x + offset; J = det(M), constant."""

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        b = np.asarray(self.offset, dtype=np.float64).reshape(3)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", b)
        if float(np.linalg.det(m)) <= 0.0:
            raise NonPositiveJacobianRequested("affine matrix has nonpositive determinant")

    def displacement(self, points: np.ndarray) -> np.ndarray:
        return points @ (self.matrix - np.eye(3)).T + self.offset

    def jacobian_matrix(self, points: np.ndarray) -> np.ndarray:
        grad = self.matrix - np.eye(3)
        return np.broadcast_to(grad, points.shape[:-1] + (3, 3)).copy()

    def jacobian_det(self, points: np.ndarray) -> np.ndarray:
        return np.full(points.shape[:-1], float(np.linalg.det(self.matrix)))

    def sample(self, geometry: GridGeometry) -> DeformationField:
        return _sample(self, geometry)


@dataclass(frozen=True)
class RadialBumpWarp:
    """Gaussian radial displacement u(x) = a·exp(-r²/(2ρ²))·(x - c).

    The displacement gradient is a·g·(I - ddᵀ/ρ²) with d = x - c, which gives
    the closed-form determinant (1 + a·g·(1 - r²/ρ²))·(1 + a·g)². Positivity
    everywhere requires -1 < a < e^1.5/2.
    """

    center: np.ndarray
    radius: float
    amplitude: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError("bump radius must be positive")
        if not (BUMP_AMPLITUDE_MIN < self.amplitude < BUMP_AMPLITUDE_MAX):
            raise NonPositiveJacobianRequested(
                f"bump amplitude {self.amplitude} leaves J > 0 range "
                f"({BUMP_AMPLITUDE_MIN}, {BUMP_AMPLITUDE_MAX:.4f})"
            )

    def _envelope(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = points - self.center
        s = np.sum(d * d, axis=-1) / (self.radius * self.radius)
        g = np.exp(-0.5 * s)
        return d, s, g

    def displacement(self, points: np.ndarray) -> np.ndarray:
        d, _, g = self._envelope(points)
        return self.amplitude * g[..., None] * d

    def jacobian_matrix(self, points: np.ndarray) -> np.ndarray:
        d, _, g = self._envelope(points)
        outer = d[..., :, None] * d[..., None, :] / (self.radius * self.radius)
        eye = np.eye(3)
        return self.amplitude * g[..., None, None] * (eye - outer)

    def jacobian_det(self, points: np.ndarray) -> np.ndarray:
        _, s, g = self._envelope(points)
        ag = self.amplitude * g
        return (1.0 + ag * (1.0 - s)) * (1.0 + ag) ** 2

    def sample(self, geometry: GridGeometry) -> DeformationField:
        return _sample(self, geometry)


@dataclass(frozen=True)
class CompositeWarp:
    """Sum of displacement fields; determinant from the summed gradients."""

    parts: tuple

    def displacement(self, points: np.ndarray) -> np.ndarray:
        total = np.zeros_like(points)
        for part in self.parts:
            total += part.displacement(points)
        return total

    def jacobian_matrix(self, points: np.ndarray) -> np.ndarray:
        total = np.zeros(points.shape[:-1] + (3, 3), dtype=np.float64)
        for part in self.parts:
            total += part.jacobian_matrix(points)
        return total

    def jacobian_det(self, points: np.ndarray) -> np.ndarray:
        jac = self.jacobian_matrix(points) + np.eye(3)
        return np.linalg.det(jac)

    def sample(self, geometry: GridGeometry) -> DeformationField:
        return _sample(self, geometry)


def _sample(warp, geometry: GridGeometry) -> DeformationField:
    points = geometry.coordinate_grid().reshape(-1, 3)
    disp = warp.displacement(points).reshape(geometry.dims + (3,))
    return DeformationField(geometry, np.moveaxis(disp, -1, 0))


def analytic_warp(kind: str, geometry: GridGeometry, **params):
    """Build one of the named warp families and sample it on the grid.

    Returns (field, warp); the warp object carries the closed-form Jacobian
    determinant for oracle comparisons.
    """
    if kind == "identity":
        warp = IdentityWarp()
    elif kind == "affine":
        warp = AffineWarp(params["matrix"], params.get("offset", np.zeros(3)))
    elif kind == "radial_bump":
        warp = RadialBumpWarp(params["center"], params["radius"], params["amplitude"])
    else:
        raise ValueError(f"unknown warp kind {kind!r}")
    return warp.sample(geometry), warp


# ---------------------------------------------------------------------------
# cohort specification


@dataclass(frozen=True)
class CohortSpec:
    """Knobs of the synthetic cohort.

    The coupling reference/scale stay anchored to the canonical internal
    cohort even when the covariate means are shifted, so a shifted cohort
    really does present a different severity mix to a trained model.
    """

    n_subjects: int
    geometry: GridGeometry = GridGeometry((32, 40, 32), (1.0, 1.0, 1.0))
    m: int = 8
    effect_regions: tuple = (1, 2)
    effect_size: float = 0.15
    noise_sigma: float = 0.02
    label_noise: float = 0.0
    clinical_coupling: bool = True
    seed: int = 0
    age_mean: float = 62.0
    age_sd: float = 8.0
    duration_mean: float = 8.0
    duration_sd: float = 3.0
    coupling_strength: float = 0.5
    coupling_reference_years: float = 8.0
    coupling_scale_years: float = 3.0
    response_duration_shift: float = 1.0
    amplitude_jitter: float = 0.1
    nuisance_bumps: int = 5
    nuisance_amplitude: float = 0.12
    intensity_effect: float = 0.0
    atlas_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "effect_regions", tuple(int(r) for r in self.effect_regions))
        if self.n_subjects < 1:
            raise SpecInvalid("n_subjects must be at least 1")
        if self.m < 1:
            raise SpecInvalid("m must be at least 1")
        if not self.effect_regions:
            raise SpecInvalid("effect_regions must be nonempty")
        if any(r < 1 or r > self.m for r in self.effect_regions):
            raise SpecInvalid("effect_regions must lie in 1..m")
        if len(set(self.effect_regions)) != len(self.effect_regions):
            raise SpecInvalid("effect_regions must be distinct")
        if self.effect_size < 0:
            raise SpecInvalid("effect_size must be nonnegative")
        if self.noise_sigma < 0:
            raise SpecInvalid("noise_sigma must be nonnegative")
        if not 0 <= self.label_noise < 0.5:
            raise SpecInvalid("label_noise must lie in [0, 0.5)")
        if self.nuisance_bumps < 0:
            raise SpecInvalid("nuisance_bumps must be nonnegative")
        if self.nuisance_amplitude < 0:
            raise SpecInvalid("nuisance_amplitude must be nonnegative")
        for name in ("age_sd", "duration_sd", "coupling_scale_years"):
            if getattr(self, name) <= 0:
                raise SpecInvalid(f"{name} must be positive")


_SPEC_JSON_KEYS = {
    "n_subjects",
    "geometry",
    "m",
    "effect_regions",
    "effect_size",
    "noise_sigma",
    "label_noise",
    "clinical_coupling",
    "seed",
    "age_mean",
    "age_sd",
    "duration_mean",
    "duration_sd",
    "coupling_strength",
    "coupling_reference_years",
    "coupling_scale_years",
    "response_duration_shift",
    "amplitude_jitter",
    "nuisance_bumps",
    "nuisance_amplitude",
    "intensity_effect",
    "atlas_path",
}


def cohort_spec_to_dict(spec: CohortSpec) -> dict:
    return {
        "n_subjects": spec.n_subjects,
        "geometry": {
            "dims": list(spec.geometry.dims),
            "spacing_mm": list(spec.geometry.spacing),
        },
        "m": spec.m,
        "effect_regions": list(spec.effect_regions),
        "effect_size": spec.effect_size,
        "noise_sigma": spec.noise_sigma,
        "label_noise": spec.label_noise,
        "clinical_coupling": spec.clinical_coupling,
        "seed": spec.seed,
        "age_mean": spec.age_mean,
        "age_sd": spec.age_sd,
        "duration_mean": spec.duration_mean,
        "duration_sd": spec.duration_sd,
        "coupling_strength": spec.coupling_strength,
        "coupling_reference_years": spec.coupling_reference_years,
        "coupling_scale_years": spec.coupling_scale_years,
        "response_duration_shift": spec.response_duration_shift,
        "amplitude_jitter": spec.amplitude_jitter,
        "nuisance_bumps": spec.nuisance_bumps,
        "nuisance_amplitude": spec.nuisance_amplitude,
        "intensity_effect": spec.intensity_effect,
        "atlas_path": spec.atlas_path,
    }


def cohort_spec_from_dict(raw: dict) -> CohortSpec:
    unknown = set(raw) - _SPEC_JSON_KEYS
    if unknown:
        raise SpecInvalid(f"unknown cohort spec keys: {sorted(unknown)}")
    if "n_subjects" not in raw:
        raise SpecInvalid("cohort spec needs n_subjects")
    kwargs = dict(raw)
    if "geometry" in kwargs:
        g = kwargs["geometry"]
        try:
            kwargs["geometry"] = GridGeometry(tuple(g["dims"]), tuple(g["spacing_mm"]))
        except (KeyError, TypeError) as exc:
            raise SpecInvalid(f"bad geometry block: {exc}") from exc
    if "effect_regions" in kwargs:
        kwargs["effect_regions"] = tuple(kwargs["effect_regions"])
    try:
        return CohortSpec(**kwargs)
    except TypeError as exc:
        raise SpecInvalid(f"bad cohort spec: {exc}") from exc


def read_cohort_spec(path: str | os.PathLike) -> CohortSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise SpecInvalid(f"cannot read cohort spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SpecInvalid(f"unparseable cohort spec {path}: {exc}") from exc
    return cohort_spec_from_dict(raw)


# ---------------------------------------------------------------------------
# region geometry helpers


@dataclass(frozen=True)
class RegionSite:
    """Where and how wide to plant a bump for one region."""

    centroid: np.ndarray
    radius: float
    points: np.ndarray  # (k, 3) mm coordinates of the region's voxels


def region_sites(masks: RegionMasks) -> dict[int, RegionSite]:
    coords = masks.geometry.coordinate_grid()
    voxel_volume = float(np.prod(masks.geometry.spacing))
    sites = {}
    for r in range(1, masks.m + 1):
        sel = masks.mask(r)
        pts = coords[sel]
        centroid = pts.mean(axis=0)
        r_eq = (3.0 * pts.shape[0] * voxel_volume / (4.0 * math.pi)) ** (1.0 / 3.0)
        sites[r] = RegionSite(centroid=centroid, radius=RHO_FRACTION * r_eq, points=pts)
    return sites


def calibrated_bump(
    site: RegionSite,
    center: np.ndarray,
    target_mean_lj: float,
    rho_scale: float = 1.0,
    clamp: bool = False,
) -> RadialBumpWarp | None:
    """Bisect the bump amplitude until the analytic log-det averaged over the
    region's voxels hits the target; sign picks contraction vs expansion.

    An expansion must pull volume from outside the region, so its envelope is
    widened until the compensating compression shell falls mostly beyond the
    region; a same-size interior expansion would average to nearly zero.
    rho_scale spreads the envelope between calls; clamp reduces an out-of-reach
    target to what the envelope supports instead of raising."""
    if target_mean_lj == 0:
        return None
    radius = site.radius if target_mean_lj < 0 else site.radius * EXPANSION_RHO_SCALE
    radius *= rho_scale

    def mean_lj(a: float) -> float:
        det = RadialBumpWarp(center, radius, a).jacobian_det(site.points)
        return float(np.mean(np.log(det)))

    # amplitude bounds stay strictly inside the positive-determinant range
    if target_mean_lj < 0:
        lo, hi = -0.98, 0.0
        extreme = lo
    else:
        lo, hi = 0.0, 0.98 * BUMP_AMPLITUDE_MAX
        extreme = hi
    reach = mean_lj(extreme)
    if abs(reach) < abs(target_mean_lj):
        if not clamp:
            raise SpecInvalid(
                f"requested mean log-det {target_mean_lj:.3f} beyond the reachable "
                f"extreme {reach:.3f} for this region"
            )
        target_mean_lj = 0.95 * reach
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mean_lj(mid) > target_mean_lj:
            hi = mid
        else:
            lo = mid
    return RadialBumpWarp(center, radius, 0.5 * (lo + hi))


# ---------------------------------------------------------------------------
# generation


@dataclass
class _SubjectPlan:
    index: int
    subject_id: str
    y_true: int
    y_observed: int


def _clip(x: float, lo: float, hi: float) -> float:
    return float(min(max(x, lo), hi))


def _draw_labels(spec: CohortSpec) -> list[_SubjectPlan]:
    n = spec.n_subjects
    width = max(3, len(str(n - 1)))
    base = np.array([1] * ((n + 1) // 2) + [0] * (n // 2))
    y_true = base[stream(spec.seed, "labels").permutation(n)]
    flips = stream(spec.seed, "label-noise").random(n) < spec.label_noise
    plans = []
    for i in range(n):
        observed = int(y_true[i] ^ flips[i])
        plans.append(
            _SubjectPlan(
                index=i,
                subject_id=f"sub-{i:0{width}d}",
                y_true=int(y_true[i]),
                y_observed=observed,
            )
        )
    return plans


def _draw_record(plan: _SubjectPlan, spec: CohortSpec, rng: np.random.Generator) -> tuple[ClinicalRecord, float]:
    """Covariates, motor scores consistent with the observed label, and the
    subject's contraction multiplier."""
    age = _clip(rng.normal(spec.age_mean, spec.age_sd), 40.0, 85.0)
    sex = "male" if rng.random() < 0.5 else "female"
    dur_mean = spec.duration_mean
    if spec.clinical_coupling and plan.y_true == 1:
        dur_mean += spec.response_duration_shift
    duration = _clip(rng.normal(dur_mean, spec.duration_sd), 1.0, 25.0)
    pre = _clip(rng.normal(42.0, 9.0), 18.0, 70.0)
    scores = {}
    for name, mu, sd, lo, hi in (
        ("moca", 25.0, 3.0, 5.0, 30.0),
        ("mmse", 27.0, 2.0, 10.0, 30.0),
        ("hamd", 8.0, 4.0, 0.0, 35.0),
    ):
        value = _clip(rng.normal(mu, sd), lo, hi)
        if rng.random() >= 0.15:  # 15% of scale scores are missing
            scores[name] = round(value, 1)

    if spec.clinical_coupling:
        z = _clip(
            (duration - spec.coupling_reference_years) / spec.coupling_scale_years,
            -1.5,
            3.5,
        )
        kappa = math.exp(spec.coupling_strength * z)
    else:
        kappa = 1.0
    kappa *= math.exp(rng.normal(0.0, spec.amplitude_jitter))

    lo, hi = RESPONDER_IR if plan.y_observed == 1 else NONRESPONDER_IR
    rate = rng.uniform(lo, hi)
    post = round(pre * (1.0 - rate), 1)
    record = ClinicalRecord(
        subject_id=plan.subject_id,
        age=round(age, 1),
        sex=sex,
        disease_duration=round(duration, 1),
        updrs3_pre=round(pre, 1),
        scores=scores,
        updrs3_post=post,
    )
    return record, kappa


def _subject_warp(
    plan: _SubjectPlan,
    spec: CohortSpec,
    kappa: float,
    sites: dict[int, RegionSite],
    brain_points: np.ndarray,
    rng: np.random.Generator,
) -> CompositeWarp:
    parts = []
    if plan.y_true == 1 and spec.effect_size > 0:
        # signs alternate across planted regions (contraction, expansion, ...)
        # so the cohort-pooled log-det mean stays at the noise-only baseline
        for position, r in enumerate(spec.effect_regions):
            site = sites[r]
            center = site.centroid + rng.uniform(-CENTER_JITTER_MM, CENTER_JITTER_MM, size=3)
            rho_scale = 1.0 + rng.uniform(-ENVELOPE_JITTER, ENVELOPE_JITTER)
            # cap keeps deep warps positive-definite once voxel noise is added
            target = min(spec.effect_size * kappa, TARGET_MEAN_LJ_MAX)
            sign = -1.0 if position % 2 == 0 else 1.0
            bump = calibrated_bump(site, center, sign * target, rho_scale, clamp=True)
            if bump is not None:
                parts.append(bump)
    else:
        # keep the per-subject draw sequence aligned between classes
        for _ in spec.effect_regions:
            rng.uniform(-CENTER_JITTER_MM, CENTER_JITTER_MM, size=3)
            rng.uniform(-ENVELOPE_JITTER, ENVELOPE_JITTER)
    for _ in range(spec.nuisance_bumps):
        center = brain_points[rng.integers(brain_points.shape[0])]
        radius = rng.uniform(2.5, 6.0)
        amplitude = rng.uniform(-spec.nuisance_amplitude, spec.nuisance_amplitude)
        parts.append(RadialBumpWarp(center, radius, amplitude))
    return CompositeWarp(tuple(parts))


def _noisy_field(
    warp: CompositeWarp, spec: CohortSpec, rng: np.random.Generator
) -> DeformationField:
    base = warp.sample(spec.geometry).displacement
    for _ in range(MAX_FIELD_REDRAWS + 1):
        disp = base
        if spec.noise_sigma > 0:
            disp = base + rng.normal(0.0, spec.noise_sigma, size=base.shape)
        fld = DeformationField(spec.geometry, disp)
        det = determinant_map(jacobian(fld))
        if float(det.min()) > 0.0:
            return fld
    raise SpecInvalid(
        "could not draw a positive-Jacobian field; lower noise_sigma or amplitudes"
    )


def _template(spec: CohortSpec, inside: np.ndarray) -> np.ndarray:
    rng = stream(spec.seed, "template")
    raw = rng.normal(0.0, 1.0, size=spec.geometry.dims)
    smooth = gaussian_smooth(ScalarVolume(spec.geometry, raw), TEMPLATE_SMOOTH_MM).data
    vals = smooth[inside]
    smooth = (smooth - vals.mean()) / vals.std()
    data = np.zeros(spec.geometry.dims)
    data[inside] = TEMPLATE_MEAN + TEMPLATE_SD * smooth[inside]
    return data


def _subject_t1(
    plan: _SubjectPlan,
    spec: CohortSpec,
    template: np.ndarray,
    masks: RegionMasks,
    rng: np.random.Generator,
) -> ScalarVolume:
    inside = masks.in_brain()
    noise = rng.normal(0.0, 1.0, size=spec.geometry.dims)
    noise = gaussian_smooth(ScalarVolume(spec.geometry, noise), SUBJECT_NOISE_SMOOTH_MM).data
    nvals = noise[inside]
    noise = (noise - nvals.mean()) / nvals.std()
    data = template.copy()
    data[inside] += SUBJECT_NOISE_SD * noise[inside]
    if spec.intensity_effect != 0.0 and plan.y_true == 1:
        for r in spec.effect_regions:
            data[masks.mask(r)] -= spec.intensity_effect
    data[~inside] = 0.0
    return ScalarVolume(spec.geometry, data)


def _load_or_build_atlas(spec: CohortSpec) -> LabelVolume:
    if spec.atlas_path is None:
        return procedural_parcellation(spec.geometry, spec.m, spec.seed)
    vol = read_volume(spec.atlas_path)
    if not isinstance(vol, LabelVolume):
        raise MalformedHeader(f"{spec.atlas_path} is not a label volume")
    if vol.geometry != spec.geometry:
        raise GeometryMismatch("atlas grid does not match the cohort geometry")
    if vol.max_label != spec.m:
        raise SpecInvalid(
            f"atlas has {vol.max_label} regions but the cohort spec asks for {spec.m}"
        )
    return vol


def generate_cohort(spec: CohortSpec, out_dir: str | os.PathLike, threads: int = 1) -> dict:
    """Write atlas, prior, volumes, manifests, and ground truth; returns a
    summary dict with the emitted paths."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    atlas = _load_or_build_atlas(spec)
    masks = build_masks(atlas, spec.m)
    inside = masks.in_brain()
    sites = region_sites(masks)
    brain_points = masks.geometry.coordinate_grid()[inside]
    template = _template(spec, inside)
    plans = _draw_labels(spec)

    atlas_path = os.path.join(out_dir, "atlas.vol")
    write_volume(atlas, atlas_path)
    prior_path = os.path.join(out_dir, "prior.json")
    weights = [
        PRIOR_PLANTED if r in spec.effect_regions else PRIOR_BACKGROUND
        for r in range(1, spec.m + 1)
    ]
    with open(prior_path, "w", encoding="utf-8") as fh:
        json.dump({"m": spec.m, "weights": weights}, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")

    def build_subject(plan: _SubjectPlan) -> tuple[SubjectEntry, dict]:
        rng = stream(spec.seed, f"subject-{plan.subject_id}")
        record, kappa = _draw_record(plan, spec, rng)
        warp = _subject_warp(plan, spec, kappa, sites, brain_points, rng)
        fld = _noisy_field(warp, spec, rng)
        t1 = _subject_t1(plan, spec, template, masks, rng)
        t1_path = os.path.join(out_dir, f"{plan.subject_id}_t1.vol")
        field_path = os.path.join(out_dir, f"{plan.subject_id}_warp.vol")
        write_volume(t1, t1_path, dtype="f32")
        write_volume(fld, field_path, dtype="f32")
        truth = {
            "subject_id": plan.subject_id,
            "y_true": plan.y_true,
            "y_observed": plan.y_observed,
            "kappa": kappa if plan.y_true == 1 else None,
        }
        return SubjectEntry(record=record, t1_path=t1_path, field_path=field_path), truth

    if threads > 1 and len(plans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(build_subject, plans))
    else:
        built = [build_subject(p) for p in plans]
    entries = [e for e, _ in built]
    truths = [t for _, t in built]

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(entries, manifest_path)

    rng_split = stream(spec.seed, "split")
    by_label: dict[int, list[int]] = {}
    for i, plan in enumerate(plans):
        by_label.setdefault(plan.y_observed, []).append(i)
    dev_idx: list[int] = []
    for label in sorted(by_label):
        members = np.array(by_label[label])
        k = int(round(DEV_FRACTION * len(members)))
        dev_idx.extend(members[rng_split.choice(len(members), size=k, replace=False)].tolist())
    dev_set = set(dev_idx)
    dev_path = os.path.join(out_dir, "manifest_dev.jsonl")
    test_path = os.path.join(out_dir, "manifest_test.jsonl")
    write_manifest([entries[i] for i in range(len(entries)) if i in dev_set], dev_path)
    write_manifest([entries[i] for i in range(len(entries)) if i not in dev_set], test_path)

    truth_path = os.path.join(out_dir, "ground_truth.json")
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(
            {"effect_regions": list(spec.effect_regions), "subjects": truths},
            fh,
            sort_keys=True,
            separators=(",", ":"),
        )
        fh.write("\n")
    spec_path = os.path.join(out_dir, "cohort_spec.json")
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump(cohort_spec_to_dict(spec), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")

    return {
        "out_dir": out_dir,
        "n_subjects": spec.n_subjects,
        "atlas": atlas_path,
        "atlas_sha256": sha256_of_file(atlas_path),
        "prior": prior_path,
        "prior_sha256": sha256_of_file(prior_path),
        "manifest": manifest_path,
        "manifest_dev": dev_path,
        "manifest_test": test_path,
        "ground_truth": truth_path,
        "cohort_spec": spec_path,
    }
