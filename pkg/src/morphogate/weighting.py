"""Region gating: fixed anatomical priors modulated per patient.

A small two-layer network maps a clinical text embedding to one additive
offset per region. Each region's gate is a logistic squash of
`prior_scale * prior + offset_scale * offset`, so gates stay strictly
between 0 and 1, rise with either input, and touch only their own region.
Broadcasting the gate vector over an atlas yields a voxelwise weight map
(background voxels get weight 0).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .atlas import RegionMasks
from .errors import DimensionMismatch, IoFailure, MalformedHeader, MissingForwardCache
from .seeding import stream
from .volume import ScalarVolume


@dataclass(frozen=True)
class GateParams:
    """Fixed scales applied to the prior and the patient offset inside the gate."""

    prior_scale: float = 1.0
    offset_scale: float = 1.0

    def __post_init__(self):
        if self.prior_scale <= 0 or self.offset_scale <= 0:
            raise ValueError("gate scales must be positive")


@dataclass(frozen=True)
class GateMode:
    """Which gate inputs are active; with both off the caller should bypass
    gating entirely and use an in-brain indicator weight map."""

    use_prior: bool = True
    use_patient: bool = True

    @property
    def gated(self) -> bool:
        return self.use_prior or self.use_patient


class PriorWeights:
    """Per-region positive relevance weights; defaults to uniform ones."""

    def __init__(self, values: np.ndarray):
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("prior weights must be a nonempty vector")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise ValueError("prior weights must be finite and positive")
        self.values = vals

    @property
    def m(self) -> int:
        return self.values.size

    @classmethod
    def uniform(cls, m: int) -> "PriorWeights":
        return cls(np.ones(m, dtype=np.float64))

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "PriorWeights":
        path = os.fspath(path)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read prior {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise MalformedHeader(f"prior {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or "m" not in raw or "weights" not in raw:
            raise MalformedHeader(f"prior {path} must carry keys 'm' and 'weights'")
        weights = np.asarray(raw["weights"], dtype=np.float64)
        if weights.size != int(raw["m"]):
            raise MalformedHeader(
                f"prior {path}: m={raw['m']} but {weights.size} weights given"
            )
        try:
            return cls(weights)
        except ValueError as exc:
            raise MalformedHeader(f"prior {path}: {exc}") from exc

    def to_json(self, path: str | os.PathLike) -> None:
        path = os.fspath(path)
        payload = {"m": self.m, "weights": [float(v) for v in self.values]}
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
                fh.write("\n")
        except OSError as exc:
            raise IoFailure(f"cannot write prior {path}: {exc}") from exc


@dataclass
class MlpParams:
    """Two-layer tanh network mapping an embedding (d) to region offsets (m)."""

    w1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (m, h)
    b2: np.ndarray  # (m,)

    def __post_init__(self):
        h, d = self.w1.shape
        m = self.w2.shape[0]
        if self.b1.shape != (h,) or self.w2.shape != (m, h) or self.b2.shape != (m,):
            raise ValueError("inconsistent MLP parameter shapes")

    @property
    def dims(self) -> tuple[int, int, int]:
        h, d = self.w1.shape
        return d, h, self.w2.shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def init_mlp(d: int, h: int, m: int, seed: int) -> MlpParams:
    """Seeded initialization: Gaussian weights scaled by fan-in, zero biases."""
    rng = stream(seed, "mlp-init")
    w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(h, d))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(m, h))
    return MlpParams(w1=w1, b1=np.zeros(h), w2=w2, b2=np.zeros(m))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (branch form, no overflow)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    expz = np.exp(z[np.logical_not(pos)])
    out[np.logical_not(pos)] = expz / (1.0 + expz)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) computed without overflow at large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(z: np.ndarray) -> np.ndarray:
    """log of the logistic function; stays finite where sigmoid underflows."""
    return -softplus(-np.asarray(z, dtype=np.float64))


def offsets(embedding: np.ndarray, mlp: MlpParams) -> np.ndarray:
    """Patient-specific additive offsets, one per region."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (mlp.dims[0],):
        raise DimensionMismatch(
            f"embedding has shape {embedding.shape}, MLP expects ({mlp.dims[0]},)"
        )
    hidden = np.tanh(mlp.w1 @ embedding + mlp.b1)
    return mlp.w2 @ hidden + mlp.b2


def gate_preactivation(
    prior: PriorWeights, delta: np.ndarray, gp: GateParams, mode: GateMode = GateMode()
) -> np.ndarray:
    z = np.zeros(prior.m, dtype=np.float64)
    if mode.use_prior:
        z = z + gp.prior_scale * prior.values
    if mode.use_patient:
        z = z + gp.offset_scale * np.asarray(delta, dtype=np.float64)
    return z


def gates(
    prior: PriorWeights, delta: np.ndarray, gp: GateParams, mode: GateMode = GateMode()
) -> np.ndarray:
    """Per-region gate values in (0,1); monotone in both prior and offset."""
    return sigmoid(gate_preactivation(prior, delta, gp, mode))


@dataclass
class GateCache:
    """Intermediates of one gating forward pass, needed for backward."""

    embedding: np.ndarray
    hidden: np.ndarray
    delta: np.ndarray
    gate_values: np.ndarray
    mode: GateMode


def gates_forward(
    embedding: np.ndarray,
    mlp: MlpParams,
    prior: PriorWeights,
    gp: GateParams,
    mode: GateMode = GateMode(),
) -> tuple[np.ndarray, GateCache]:
    """Embedding -> offsets -> gates, caching intermediates for backward."""
    hidden = np.tanh(mlp.w1 @ embedding + mlp.b1)
    delta = mlp.w2 @ hidden + mlp.b2
    w = gates(prior, delta, gp, mode)
    cache = GateCache(
        embedding=np.asarray(embedding, dtype=np.float64),
        hidden=hidden,
        delta=delta,
        gate_values=w,
        mode=mode,
    )
    return w, cache


@dataclass
class MlpGrads:
    """Gradients of a scalar loss with respect to MLP parameters."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    embedding: np.ndarray  # gradient flowing back into the embedding

    @classmethod
    def zeros_like(cls, mlp: MlpParams, d: int) -> "MlpGrads":
        return cls(
            w1=np.zeros_like(mlp.w1),
            b1=np.zeros_like(mlp.b1),
            w2=np.zeros_like(mlp.w2),
            b2=np.zeros_like(mlp.b2),
            embedding=np.zeros(d),
        )

    def add_(self, other: "MlpGrads") -> None:
        self.w1 += other.w1
        self.b1 += other.b1
        self.w2 += other.w2
        self.b2 += other.b2
        self.embedding += other.embedding

    def scale_(self, factor: float) -> None:
        self.w1 *= factor
        self.b1 *= factor
        self.w2 *= factor
        self.b2 *= factor
        self.embedding *= factor


def gates_backward(
    upstream: np.ndarray, cache: GateCache | None, mlp: MlpParams, gp: GateParams
) -> MlpGrads:
    """Chain rule from d(loss)/d(gates) back to the MLP parameters.

    The gate derivative is w*(1-w) per region; with the patient path disabled
    the offsets are outside the graph and all parameter gradients are zero.
    """
    if cache is None:
        raise MissingForwardCache("gates_backward called without a forward cache")
    w = cache.gate_values
    d = mlp.dims[0]
    if not cache.mode.use_patient:
        return MlpGrads.zeros_like(mlp, d)
    d_delta = np.asarray(upstream, dtype=np.float64) * gp.offset_scale * w * (1.0 - w)
    d_w2 = np.outer(d_delta, cache.hidden)
    d_b2 = d_delta
    d_hidden = mlp.w2.T @ d_delta
    d_z1 = d_hidden * (1.0 - cache.hidden * cache.hidden)
    d_w1 = np.outer(d_z1, cache.embedding)
    d_b1 = d_z1
    d_embedding = mlp.w1.T @ d_z1
    return MlpGrads(w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2, embedding=d_embedding)


def weight_map(w: np.ndarray, masks: RegionMasks) -> ScalarVolume:
    """Broadcast per-region gates onto the grid; background voxels get 0."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (masks.m,):
        raise ValueError(f"expected {masks.m} gates, got shape {w.shape}")
    lut = np.concatenate(([0.0], w))
    data = lut[masks.labels.labels.astype(np.int64)]
    return ScalarVolume(masks.geometry, data)


def indicator_map(masks: RegionMasks) -> ScalarVolume:
    """Weight map with every in-brain voxel at 1; used when gating is off."""
    return ScalarVolume(masks.geometry, masks.in_brain().astype(np.float64))
