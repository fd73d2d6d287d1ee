"""Outcome model: gated fusion of image and morphometry maps, region pooling,
and a linear head trained with decoupled-weight-decay adaptive moments.

The per-subject forward path is
    X = image_weight * (W . I) + (W . LJ)        (voxelwise, W = gate map)
    s = v . region_means(X) + b,   p = sigmoid(s)
with I and LJ z-scored by frozen training-cohort statistics. Because the gate
is constant within a region, region pooling collapses the voxel path to
per-region features, which is what training uses; the two routes agree to
floating-point roundoff.

Gradients are derived by hand (chain rule through the sigmoid, the linear
head, the gates, and the tanh network). Volumes, masks, and priors are
constants of the graph.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .atlas import RegionMasks, region_means
from .clinical import Embedder, SubjectEntry, embedder_from_description
from .dbm import DbmConfig, dbm_pipeline
from .errors import (
    DegenerateNormStats,
    EmptyBatch,
    GeometryMismatch,
    IoFailure,
    MalformedHeader,
    MissingEmbedding,
    MissingForwardCache,
    PayloadSizeMismatch,
    UnknownSubject,
    UnlabeledSubject,
)
from .metrics import DEFAULT_TAU, improvement_rate
from .seeding import stream
from .volume import ScalarVolume, read_volume
from .weighting import (
    GateCache,
    GateMode,
    GateParams,
    MlpGrads,
    MlpParams,
    PriorWeights,
    gates_backward,
    gates_forward,
    indicator_map,
    init_mlp,
    sigmoid,
    softplus,
    weight_map,
)

CHECKPOINT_FORMAT = "morphogate-model-v1"


@dataclass(frozen=True)
class FusionConfig:
    """Relative weight of the intensity channel against the morphometry map."""

    image_weight: float = 0.1


@dataclass(frozen=True)
class AblationConfig:
    """Switches for the three model components.

    use_dbm off drops the morphometry term and renormalizes the image weight
    to 1; with both gate inputs off the weight map degenerates to the
    in-brain indicator.
    """

    use_dbm: bool = True
    use_prior: bool = True
    use_patient: bool = True

    @property
    def gate_mode(self) -> GateMode:
        return GateMode(use_prior=self.use_prior, use_patient=self.use_patient)

    def tag(self) -> str:
        parts = []
        parts.append("dbm" if self.use_dbm else "nodbm")
        parts.append("prior" if self.use_prior else "noprior")
        parts.append("patient" if self.use_patient else "nopatient")
        return "-".join(parts)


@dataclass
class HeadParams:
    """Linear readout over region features."""

    v: np.ndarray  # (m,)
    b: float

    def copy(self) -> "HeadParams":
        return HeadParams(self.v.copy(), float(self.b))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    max_epochs: int = 100
    batch_size: int = 4
    early_stop_patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2
    hidden_width: int = 32


@dataclass(frozen=True)
class NormStats:
    """Frozen per-modality z-scoring statistics from the training cohort."""

    t1_mean: float
    t1_std: float
    lj_mean: float
    lj_std: float

    def __post_init__(self):
        if self.t1_std <= 0 or self.lj_std <= 0:
            raise DegenerateNormStats("per-modality std must be positive")


# ---------------------------------------------------------------------------
# voxel-path operations


def fuse(
    t1_z: ScalarVolume,
    lj_z: ScalarVolume | None,
    weights: ScalarVolume,
    fusion: FusionConfig = FusionConfig(),
    use_dbm: bool = True,
) -> ScalarVolume:
    """Weighted voxelwise fusion of the (z-scored) image and morphometry maps."""
    if t1_z.geometry != weights.geometry:
        raise GeometryMismatch("image and weight map grids differ")
    if use_dbm:
        if lj_z is None:
            raise ValueError("use_dbm requires a morphometry map")
        if lj_z.geometry != t1_z.geometry:
            raise GeometryMismatch("image and morphometry grids differ")
        data = fusion.image_weight * (weights.data * t1_z.data) + weights.data * lj_z.data
    else:
        data = weights.data * t1_z.data
    return ScalarVolume(t1_z.geometry, data)


def forward(x: ScalarVolume, masks: RegionMasks, head: HeadParams) -> tuple[float, float]:
    """Region-pooled linear readout; returns (logit, probability)."""
    feats = region_means(x, masks)
    s = float(head.v @ feats + head.b)
    return s, _sigmoid_scalar(s)


def _sigmoid_scalar(s: float) -> float:
    return float(sigmoid(np.asarray([s]))[0])


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy on logits, in the overflow-free softplus form."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.size == 0:
        raise EmptyBatch("loss requested over zero samples")
    if logits.shape != labels.shape:
        raise ValueError("logits and labels differ in length")
    return float(np.mean(softplus(logits) - labels * logits))


# ---------------------------------------------------------------------------
# per-subject features (region means + voxel accumulators for z-scoring)


@dataclass
class SubjectFeatures:
    """Everything training needs from one subject, pooled to region level."""

    subject_id: str
    t1_means: np.ndarray  # (m,) raw region means of the image
    lj_means: np.ndarray  # (m,) raw region means of the smoothed log-det map
    embedding: np.ndarray  # (d,)
    label: int | None
    t1_sum: float
    t1_sumsq: float
    lj_sum: float
    lj_sumsq: float
    n_voxels: int


def featurize_volumes(
    subject_id: str,
    t1: ScalarVolume,
    lj: ScalarVolume,
    embedding: np.ndarray,
    masks: RegionMasks,
    label: int | None,
) -> SubjectFeatures:
    if t1.geometry != masks.geometry or lj.geometry != masks.geometry:
        raise GeometryMismatch(f"subject {subject_id!r} volumes do not match the atlas grid")
    inside = masks.in_brain()
    t1_vals = t1.data[inside]
    lj_vals = lj.data[inside]
    return SubjectFeatures(
        subject_id=subject_id,
        t1_means=region_means(t1, masks),
        lj_means=region_means(lj, masks),
        embedding=np.asarray(embedding, dtype=np.float64),
        label=label,
        t1_sum=float(t1_vals.sum()),
        t1_sumsq=float((t1_vals * t1_vals).sum()),
        lj_sum=float(lj_vals.sum()),
        lj_sumsq=float((lj_vals * lj_vals).sum()),
        n_voxels=int(inside.sum()),
    )


def featurize_entry(
    entry: SubjectEntry,
    masks: RegionMasks,
    dbm_cfg: DbmConfig,
    embedder: Embedder,
    tau: float = DEFAULT_TAU,
) -> SubjectFeatures:
    """Load one manifest row: image, warp -> log-det map, embedding, label."""
    t1 = read_volume(entry.t1_path)
    fld = read_volume(entry.field_path)
    if not isinstance(t1, ScalarVolume):
        raise MalformedHeader(f"{entry.t1_path} is not a scalar volume")
    lj, _ = dbm_pipeline(fld, dbm_cfg)
    try:
        embedding = embedder.embed(entry.record)
    except UnknownSubject as exc:
        raise MissingEmbedding(str(exc)) from exc
    label = None
    if entry.record.updrs3_post is not None:
        label = improvement_rate(entry.record, tau).label
    return featurize_volumes(entry.record.subject_id, t1, lj, embedding, masks, label)


def featurize_many(
    entries: list[SubjectEntry],
    masks: RegionMasks,
    dbm_cfg: DbmConfig,
    embedder: Embedder,
    tau: float = DEFAULT_TAU,
    threads: int = 1,
) -> list[SubjectFeatures]:
    """Featurize a cohort, optionally with a thread pool; order is preserved."""
    if threads <= 1 or len(entries) <= 1:
        return [featurize_entry(e, masks, dbm_cfg, embedder, tau) for e in entries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda e: featurize_entry(e, masks, dbm_cfg, embedder, tau), entries))


def norm_stats_from_features(feats: list[SubjectFeatures]) -> NormStats:
    """Pooled in-brain voxel mean/std per modality over the given subjects."""
    if not feats:
        raise EmptyBatch("cannot compute normalization statistics from zero subjects")
    n = sum(f.n_voxels for f in feats)
    t1_mean = sum(f.t1_sum for f in feats) / n
    lj_mean = sum(f.lj_sum for f in feats) / n
    t1_var = sum(f.t1_sumsq for f in feats) / n - t1_mean * t1_mean
    lj_var = sum(f.lj_sumsq for f in feats) / n - lj_mean * lj_mean
    if t1_var <= 0 or lj_var <= 0:
        raise DegenerateNormStats("a modality has zero variance over the training cohort")
    return NormStats(
        t1_mean=t1_mean,
        t1_std=math.sqrt(t1_var),
        lj_mean=lj_mean,
        lj_std=math.sqrt(lj_var),
    )


def standardized_means(feats: SubjectFeatures, norm: NormStats) -> tuple[np.ndarray, np.ndarray]:
    zi = (feats.t1_means - norm.t1_mean) / norm.t1_std
    zj = (feats.lj_means - norm.lj_mean) / norm.lj_std
    return zi, zj


# ---------------------------------------------------------------------------
# feature-space forward/backward (training path)


@dataclass
class SubjectForward:
    logit: float
    prob: float
    features: np.ndarray  # f = w * c
    channel_mix: np.ndarray  # c
    gate_values: np.ndarray | None
    gate_cache: GateCache | None


def forward_features(
    feats: SubjectFeatures,
    norm: NormStats,
    mlp: MlpParams,
    head: HeadParams,
    prior: PriorWeights,
    gp: GateParams,
    fusion: FusionConfig,
    ablation: AblationConfig,
) -> SubjectForward:
    zi, zj = standardized_means(feats, norm)
    if ablation.use_dbm:
        c = fusion.image_weight * zi + zj
    else:
        c = zi
    mode = ablation.gate_mode
    if mode.gated:
        w, cache = gates_forward(feats.embedding, mlp, prior, gp, mode)
    else:
        w, cache = np.ones(prior.m, dtype=np.float64), None
    f = w * c
    s = float(head.v @ f + head.b)
    return SubjectForward(
        logit=s,
        prob=_sigmoid_scalar(s),
        features=f,
        channel_mix=c,
        gate_values=None if cache is None else w,
        gate_cache=cache,
    )


@dataclass
class BatchGrads:
    v: np.ndarray
    b: float
    mlp: MlpGrads


def batch_loss_and_grads(
    batch: list[SubjectFeatures],
    norm: NormStats,
    mlp: MlpParams,
    head: HeadParams,
    prior: PriorWeights,
    gp: GateParams,
    fusion: FusionConfig,
    ablation: AblationConfig,
) -> tuple[float, BatchGrads]:
    """Mean loss over the batch and gradients for every trainable parameter."""
    if not batch:
        raise EmptyBatch("gradient requested over zero samples")
    for f in batch:
        if f.label is None:
            raise UnlabeledSubject(f"subject {f.subject_id!r} has no outcome label")
    n = len(batch)
    d = mlp.dims[0]
    dv = np.zeros_like(head.v)
    db = 0.0
    dmlp = MlpGrads.zeros_like(mlp, d)
    loss_sum = 0.0
    mode = ablation.gate_mode
    for feats in batch:
        out = forward_features(feats, norm, mlp, head, prior, gp, fusion, ablation)
        y = float(feats.label)
        loss_sum += float(softplus(np.asarray(out.logit)) - y * out.logit)
        dls = (out.prob - y) / n  # d(mean loss)/d(logit)
        dv += dls * out.features
        db += dls
        if mode.gated and mode.use_patient:
            if out.gate_cache is None:
                raise MissingForwardCache("gate gradients need the forward cache")
            d_gate = dls * head.v * out.channel_mix
            dmlp.add_(gates_backward(d_gate, out.gate_cache, mlp, gp))
    return loss_sum / n, BatchGrads(v=dv, b=db, mlp=dmlp)


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then a cosine decay to zero."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr * epoch / cfg.warmup_epochs
    span = max(1, cfg.max_epochs - cfg.warmup_epochs)
    progress = (epoch - cfg.warmup_epochs) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


PARAM_KEYS = ("w1", "b1", "w2", "b2", "v", "b")
DECAYED_KEYS = ("w1", "w2", "v")  # biases are exempt from weight decay


class AdamW:
    """Decoupled-weight-decay adaptive-moments updates over named arrays."""

    def __init__(self, cfg: TrainConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        cfg = self.cfg
        self.step_count += 1
        bc1 = 1.0 - cfg.beta1**self.step_count
        bc2 = 1.0 - cfg.beta2**self.step_count
        for key in PARAM_KEYS:
            g = grads[key]
            self.m[key] = cfg.beta1 * self.m[key] + (1.0 - cfg.beta1) * g
            self.v[key] = cfg.beta2 * self.v[key] + (1.0 - cfg.beta2) * (g * g)
            mhat = self.m[key] / bc1
            vhat = self.v[key] / bc2
            params[key] -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
            if key in DECAYED_KEYS and cfg.weight_decay:
                params[key] -= lr * cfg.weight_decay * params[key]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLogEntry:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
        }


@dataclass
class ModelState:
    """Everything needed to reproduce predictions: parameters, frozen
    normalization statistics, gate configuration, and provenance hashes."""

    mlp: MlpParams
    head: HeadParams
    prior: PriorWeights
    gate: GateParams
    fusion: FusionConfig
    ablation: AblationConfig
    norm: NormStats
    dbm: DbmConfig
    threshold: float
    tau: float
    embedder_desc: dict
    atlas_sha256: str
    prior_sha256: str
    atlas_path: str = ""
    prior_path: str = ""
    train_log: list[TrainLogEntry] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.prior.m


def stratified_split(
    labels: list[int], fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    """Index split keeping class proportions; second part gets `fraction`."""
    rng = stream(seed, "val-split")
    by_class: dict[int, list[int]] = {}
    for idx, y in enumerate(labels):
        by_class.setdefault(y, []).append(idx)
    held: list[int] = []
    for y in sorted(by_class):
        members = np.array(by_class[y])
        k = int(round(fraction * len(members)))
        k = min(k, len(members) - 1)  # never empty a class
        if k > 0:
            held.extend(members[rng.choice(len(members), size=k, replace=False)].tolist())
    held_set = set(held)
    train = [i for i in range(len(labels)) if i not in held_set]
    val = sorted(held_set)
    return train, val


def train_model(
    features: list[SubjectFeatures],
    prior: PriorWeights,
    cfg: TrainConfig = TrainConfig(),
    gate: GateParams = GateParams(),
    fusion: FusionConfig = FusionConfig(),
    ablation: AblationConfig = AblationConfig(),
    dbm_cfg: DbmConfig = DbmConfig(),
    tau: float = DEFAULT_TAU,
    embedder_desc: dict | None = None,
    atlas_sha256: str = "",
    prior_sha256: str = "",
    atlas_path: str = "",
    prior_path: str = "",
) -> tuple[ModelState, list[TrainLogEntry]]:
    """Train the gated fusion model; deterministic given the seed.

    Mini-batches are reshuffled each epoch from a seeded stream. Validation
    subjects (a stratified slice of the input) drive early stopping; the
    parameters with the best validation loss are restored at the end.
    Z-scoring statistics come from the training slice only and are frozen
    into the returned state.
    """
    if not features:
        raise EmptyBatch("no training subjects")
    for f in features:
        if f.label is None:
            raise UnlabeledSubject(f"subject {f.subject_id!r} has no outcome label")
    labels = [int(f.label) for f in features]
    if cfg.val_fraction > 0 and len(features) >= 5:
        train_idx, val_idx = stratified_split(labels, cfg.val_fraction, cfg.seed)
    else:
        train_idx, val_idx = list(range(len(features))), []
    train_feats = [features[i] for i in train_idx]
    val_feats = [features[i] for i in val_idx]

    norm = norm_stats_from_features(train_feats)
    m = prior.m
    d = train_feats[0].embedding.size
    mlp = init_mlp(d, cfg.hidden_width, m, cfg.seed)
    head = HeadParams(v=np.zeros(m, dtype=np.float64), b=0.0)

    params = {
        "w1": mlp.w1,
        "b1": mlp.b1,
        "w2": mlp.w2,
        "b2": mlp.b2,
        "v": head.v,
        "b": np.zeros(1, dtype=np.float64),
    }
    optimizer = AdamW(cfg, params)
    rng_shuffle = stream(cfg.seed, "shuffle")

    def snapshot() -> dict[str, np.ndarray]:
        return {k: p.copy() for k, p in params.items()}

    def mean_loss(feats: list[SubjectFeatures]) -> float:
        if not feats:
            return float("nan")
        logits = []
        ys = []
        for f in feats:
            out = forward_features(f, norm, mlp, head, prior, gate, fusion, ablation)
            logits.append(out.logit)
            ys.append(float(f.label))
        return bce_loss(np.asarray(logits), np.asarray(ys))

    best = snapshot()
    best_monitor = float("inf")
    since_best = 0
    log: list[TrainLogEntry] = []
    n_train = len(train_feats)
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = rng_shuffle.permutation(n_train)
        loss_acc = 0.0
        for start in range(0, n_train, cfg.batch_size):
            batch = [train_feats[i] for i in order[start : start + cfg.batch_size]]
            loss, grads = batch_loss_and_grads(
                batch, norm, mlp, head, prior, gate, fusion, ablation
            )
            loss_acc += loss * len(batch)
            gdict = {
                "w1": grads.mlp.w1,
                "b1": grads.mlp.b1,
                "w2": grads.mlp.w2,
                "b2": grads.mlp.b2,
                "v": grads.v,
                "b": np.asarray([grads.b]),
            }
            optimizer.step(params, gdict, lr)
            head.b = float(params["b"][0])
        train_loss = loss_acc / n_train
        val_loss = mean_loss(val_feats) if val_feats else train_loss
        log.append(TrainLogEntry(epoch=epoch, lr=lr, train_loss=train_loss, val_loss=val_loss))
        monitor = val_loss
        if monitor < best_monitor:
            best_monitor = monitor
            best = snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break

    for key in PARAM_KEYS:
        params[key][...] = best[key]
    head.b = float(params["b"][0])

    state = ModelState(
        mlp=mlp,
        head=head,
        prior=prior,
        gate=gate,
        fusion=fusion,
        ablation=ablation,
        norm=norm,
        dbm=dbm_cfg,
        threshold=0.5,
        tau=tau,
        embedder_desc=embedder_desc or {},
        atlas_sha256=atlas_sha256,
        prior_sha256=prior_sha256,
        atlas_path=atlas_path,
        prior_path=prior_path,
        train_log=log,
    )
    return state, log


# ---------------------------------------------------------------------------
# ablation grid (component toggles, one row per configuration)

ABLATION_GRID: tuple[tuple[str, AblationConfig], ...] = (
    ("full", AblationConfig(use_dbm=True, use_prior=True, use_patient=True)),
    ("patient_only", AblationConfig(use_dbm=True, use_prior=False, use_patient=True)),
    ("prior_only", AblationConfig(use_dbm=True, use_prior=True, use_patient=False)),
    ("dbm_only", AblationConfig(use_dbm=True, use_prior=False, use_patient=False)),
    ("no_dbm", AblationConfig(use_dbm=False, use_prior=True, use_patient=True)),
)


def run_ablation(
    train_feats: list[SubjectFeatures],
    test_feats: list[SubjectFeatures],
    prior: PriorWeights,
    seeds: list[int],
    cfg: TrainConfig = TrainConfig(),
    gate: GateParams = GateParams(),
    fusion: FusionConfig = FusionConfig(),
    dbm_cfg: DbmConfig = DbmConfig(),
    tau: float = DEFAULT_TAU,
) -> list[dict]:
    """Train every component toggle over the given seeds; report test accuracy.

    Features are shared across configurations, so the comparison isolates the
    model components.
    """
    for f in test_feats:
        if f.label is None:
            raise UnlabeledSubject(f"test subject {f.subject_id!r} has no outcome label")
    rows = []
    for name, ablation in ABLATION_GRID:
        accs = []
        for seed in seeds:
            state, _ = train_model(
                train_feats,
                prior,
                replace(cfg, seed=int(seed)),
                gate,
                fusion,
                ablation,
                dbm_cfg,
                tau,
            )
            correct = 0
            for f in test_feats:
                _, cls = predict_features(f, state)
                correct += int(cls == f.label)
            accs.append(correct / len(test_feats))
        rows.append(
            {
                "config": name,
                "use_dbm": ablation.use_dbm,
                "use_prior": ablation.use_prior,
                "use_patient": ablation.use_patient,
                "acc_by_seed": accs,
                "mean_acc": float(np.mean(accs)),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# prediction


def predict_features(feats: SubjectFeatures, state: ModelState) -> tuple[float, int]:
    """Probability and thresholded class for one subject; ties go to class 1."""
    out = forward_features(
        feats, state.norm, state.mlp, state.head, state.prior, state.gate, state.fusion, state.ablation
    )
    cls = 1 if out.prob >= state.threshold else 0
    return out.prob, cls


def subject_weight_map(feats: SubjectFeatures, state: ModelState, masks: RegionMasks) -> ScalarVolume:
    """Voxelwise gate map for one subject under the model's ablation mode."""
    mode = state.ablation.gate_mode
    if not mode.gated:
        return indicator_map(masks)
    w, _ = gates_forward(feats.embedding, state.mlp, state.prior, state.gate, mode)
    return weight_map(w, masks)


def mean_gates(state: ModelState, features: list[SubjectFeatures]) -> np.ndarray:
    """Average gate vector over subjects (ones when gating is off)."""
    mode = state.ablation.gate_mode
    if not mode.gated:
        return np.ones(state.m, dtype=np.float64)
    acc = np.zeros(state.m, dtype=np.float64)
    for f in features:
        w, _ = gates_forward(f.embedding, state.mlp, state.prior, state.gate, mode)
        acc += w
    return acc / len(features)


def region_contributions(state: ModelState, features: list[SubjectFeatures]) -> np.ndarray:
    """|head weight| times mean gate per region: how much each region drives
    the logit on this cohort."""
    return np.abs(state.head.v) * mean_gates(state, features)


# ---------------------------------------------------------------------------
# checkpoint serialization: JSON header + packed float64 payload


def _param_list(state: ModelState) -> list[tuple[str, np.ndarray]]:
    return [
        ("w1", state.mlp.w1),
        ("b1", state.mlp.b1),
        ("w2", state.mlp.w2),
        ("b2", state.mlp.b2),
        ("v", state.head.v),
        ("b", np.asarray([state.head.b])),
    ]


def save_checkpoint(state: ModelState, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    params = _param_list(state)
    header = {
        "format": CHECKPOINT_FORMAT,
        "m": state.m,
        "d": int(state.mlp.dims[0]),
        "h": int(state.mlp.dims[1]),
        "fusion": {"image_weight": state.fusion.image_weight},
        "gate": {
            "prior_scale": state.gate.prior_scale,
            "offset_scale": state.gate.offset_scale,
        },
        "ablation": {
            "use_dbm": state.ablation.use_dbm,
            "use_prior": state.ablation.use_prior,
            "use_patient": state.ablation.use_patient,
        },
        "norm_stats": {
            "t1_mean": state.norm.t1_mean,
            "t1_std": state.norm.t1_std,
            "lj_mean": state.norm.lj_mean,
            "lj_std": state.norm.lj_std,
        },
        "dbm": {
            "sigma_mm": state.dbm.sigma_mm,
            "max_nonpositive_fraction": state.dbm.max_nonpositive_fraction,
            "clamp_epsilon": state.dbm.clamp_epsilon,
        },
        "threshold": state.threshold,
        "tau": state.tau,
        "prior_weights": [float(x) for x in state.prior.values],
        "embedder": state.embedder_desc,
        "atlas_sha256": state.atlas_sha256,
        "prior_sha256": state.prior_sha256,
        "atlas_path": state.atlas_path,
        "prior_path": state.prior_path,
        "params": [[name, list(arr.shape)] for name, arr in params],
    }
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in params)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike) -> ModelState:
    path = os.fspath(path)
    try:
        with open(path + ".json", "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except OSError as exc:
        raise MalformedHeader(f"missing checkpoint header {path}.json: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"unparseable checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise MalformedHeader(f"unknown checkpoint format {header.get('format')!r}")
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        shapes = [(name, tuple(shape)) for name, shape in header["params"]]
        expected = sum(int(np.prod(s)) for _, s in shapes) * 8
        if len(payload) != expected:
            raise PayloadSizeMismatch(
                f"{path}: payload is {len(payload)} bytes, header implies {expected}"
            )
        flat = np.frombuffer(payload, dtype="<f8")
        arrays = {}
        cursor = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            arrays[name] = flat[cursor : cursor + size].reshape(shape).copy()
            cursor += size
        mlp = MlpParams(w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"], b2=arrays["b2"])
        head = HeadParams(v=arrays["v"], b=float(arrays["b"][0]))
        norm = NormStats(**header["norm_stats"])
        dbm_raw = header["dbm"]
        state = ModelState(
            mlp=mlp,
            head=head,
            prior=PriorWeights(np.asarray(header["prior_weights"], dtype=np.float64)),
            gate=GateParams(**header["gate"]),
            fusion=FusionConfig(**header["fusion"]),
            ablation=AblationConfig(**header["ablation"]),
            norm=norm,
            dbm=DbmConfig(
                sigma_mm=dbm_raw["sigma_mm"],
                max_nonpositive_fraction=dbm_raw["max_nonpositive_fraction"],
                clamp_epsilon=dbm_raw["clamp_epsilon"],
            ),
            threshold=float(header["threshold"]),
            tau=float(header["tau"]),
            embedder_desc=header["embedder"],
            atlas_sha256=header["atlas_sha256"],
            prior_sha256=header["prior_sha256"],
            atlas_path=header.get("atlas_path", ""),
            prior_path=header.get("prior_path", ""),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"bad checkpoint header fields: {exc}") from exc
    return state


def embedder_for_state(state: ModelState) -> Embedder:
    if not state.embedder_desc:
        raise MalformedHeader("checkpoint carries no embedder description")
    return embedder_from_description(state.embedder_desc)
