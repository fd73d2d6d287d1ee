"""Deformation-based morphometry with clinically gated region weighting.

The package turns displacement fields into smoothed log-Jacobian maps, pools
them over an atlas parcellation, modulates each region by a gate built from a
population prior and a patient-text offset, and trains a linear head on the
fused features to predict treatment response. A synthetic cohort generator
with analytic ground-truth warps supports end-to-end validation.
"""

from .atlas import RegionMasks, build_masks, ellipsoid_mask, procedural_parcellation, region_means
from .clinical import (
    ClinicalRecord,
    FileEmbedder,
    HashingEmbedder,
    SubjectEntry,
    read_manifest,
    record_from_dict,
    serialize_prompt,
    write_manifest,
)
from .cohort import (
    AffineWarp,
    CohortSpec,
    CompositeWarp,
    IdentityWarp,
    RadialBumpWarp,
    analytic_warp,
    generate_cohort,
    read_cohort_spec,
)
from .dbm import (
    DbmConfig,
    DbmReport,
    dbm_pipeline,
    determinant_map,
    gaussian_smooth,
    jacobian,
    log_jacobian,
)
from .errors import MorphogateError
from .metrics import (
    DEFAULT_TAU,
    CalibrationReport,
    ConfusionCounts,
    calibration_report,
    classification_metrics,
    decision_curve,
    improvement_rate,
)
from .model import (
    AblationConfig,
    FusionConfig,
    ModelState,
    NormStats,
    SubjectFeatures,
    TrainConfig,
    bce_loss,
    featurize_entry,
    featurize_many,
    forward,
    fuse,
    load_checkpoint,
    predict_features,
    run_ablation,
    save_checkpoint,
    train_model,
)
from .seeding import child_seed, stream
from .volume import (
    DeformationField,
    GridGeometry,
    LabelVolume,
    ScalarVolume,
    read_volume,
    sha256_of_file,
    write_volume,
)
from .weighting import GateMode, GateParams, MlpParams, PriorWeights, gates_forward, init_mlp

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "AffineWarp",
    "CalibrationReport",
    "ClinicalRecord",
    "CohortSpec",
    "CompositeWarp",
    "ConfusionCounts",
    "DEFAULT_TAU",
    "DbmConfig",
    "DbmReport",
    "DeformationField",
    "FileEmbedder",
    "FusionConfig",
    "GateMode",
    "GateParams",
    "GridGeometry",
    "HashingEmbedder",
    "IdentityWarp",
    "LabelVolume",
    "MlpParams",
    "ModelState",
    "MorphogateError",
    "NormStats",
    "PriorWeights",
    "RadialBumpWarp",
    "RegionMasks",
    "ScalarVolume",
    "SubjectEntry",
    "SubjectFeatures",
    "TrainConfig",
    "analytic_warp",
    "bce_loss",
    "build_masks",
    "calibration_report",
    "child_seed",
    "classification_metrics",
    "dbm_pipeline",
    "decision_curve",
    "determinant_map",
    "ellipsoid_mask",
    "featurize_entry",
    "featurize_many",
    "forward",
    "fuse",
    "gates_forward",
    "gaussian_smooth",
    "generate_cohort",
    "improvement_rate",
    "init_mlp",
    "jacobian",
    "load_checkpoint",
    "log_jacobian",
    "predict_features",
    "procedural_parcellation",
    "read_cohort_spec",
    "read_manifest",
    "read_volume",
    "record_from_dict",
    "region_means",
    "run_ablation",
    "save_checkpoint",
    "serialize_prompt",
    "sha256_of_file",
    "stream",
    "train_model",
    "write_manifest",
    "write_volume",
]
