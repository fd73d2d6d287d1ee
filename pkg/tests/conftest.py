"""Shared fixtures: one small generated cohort with a trained reference model.

Built once per session; unit tests that need real volumes, manifests, or a
trained checkpoint reuse it instead of regenerating their own.
"""

import json
import os

import pytest

from morphogate.atlas import build_masks
from morphogate.clinical import HashingEmbedder, read_manifest
from morphogate.cohort import CohortSpec, generate_cohort
from morphogate.dbm import DbmConfig
from morphogate.metrics import balance_indices, improvement_rate
from morphogate.model import TrainConfig, featurize_many, save_checkpoint, train_model
from morphogate.volume import GridGeometry, read_volume
from morphogate.weighting import PriorWeights


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """24-subject cohort on a 16^3 grid plus a fully trained default model."""
    out_dir = tmp_path_factory.mktemp("small-cohort")
    spec = CohortSpec(
        n_subjects=24,
        geometry=GridGeometry((16, 16, 16), (1.0, 1.0, 1.0)),
        m=4,
        effect_regions=(1, 2),
        effect_size=0.3,
        seed=3,
    )
    summary = generate_cohort(spec, out_dir)

    atlas = read_volume(summary["atlas"])
    masks = build_masks(atlas, spec.m)
    prior = PriorWeights.from_json(summary["prior"])
    embedder = HashingEmbedder(dim=64, seed=0)
    dbm_cfg = DbmConfig()

    dev_entries = read_manifest(summary["manifest_dev"])
    labels = [improvement_rate(e.record).label for e in dev_entries]
    kept = balance_indices(labels, seed=0)
    dev_entries = [dev_entries[i] for i in kept]
    dev_feats = featurize_many(dev_entries, masks, dbm_cfg, embedder)

    test_entries = read_manifest(summary["manifest_test"])
    test_feats = featurize_many(test_entries, masks, dbm_cfg, embedder)

    # the faster rate compensates for the handful of optimizer steps per epoch
    state, train_log = train_model(
        dev_feats,
        prior,
        TrainConfig(lr=3e-3),
        embedder_desc=embedder.describe(),
        atlas_sha256=summary["atlas_sha256"],
        prior_sha256=summary["prior_sha256"],
        atlas_path=os.path.abspath(summary["atlas"]),
        prior_path=os.path.abspath(summary["prior"]),
    )
    ckpt = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(state, ckpt)

    with open(summary["ground_truth"], "r", encoding="utf-8") as fh:
        truth = json.load(fh)

    return {
        "spec": spec,
        "dir": str(out_dir),
        "summary": summary,
        "atlas": atlas,
        "masks": masks,
        "prior": prior,
        "embedder": embedder,
        "dbm_cfg": dbm_cfg,
        "dev_entries": dev_entries,
        "dev_feats": dev_feats,
        "test_entries": test_entries,
        "test_feats": test_feats,
        "state": state,
        "train_log": train_log,
        "checkpoint": ckpt,
        "truth": truth,
    }
