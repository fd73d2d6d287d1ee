"""Fusion, the feature-space model, training loop, prediction, checkpoints."""

import dataclasses
import json
import math

import numpy as np
import pytest

from morphogate.atlas import build_masks, region_means
from morphogate.dbm import DbmConfig
from morphogate.errors import (
    DegenerateNormStats,
    EmptyBatch,
    GeometryMismatch,
    MalformedHeader,
    PayloadSizeMismatch,
    UnlabeledSubject,
)
from morphogate.model import (
    AblationConfig,
    AdamW,
    FusionConfig,
    HeadParams,
    ModelState,
    NormStats,
    SubjectFeatures,
    TrainConfig,
    batch_loss_and_grads,
    bce_loss,
    embedder_for_state,
    forward,
    forward_features,
    fuse,
    load_checkpoint,
    lr_at_epoch,
    mean_gates,
    norm_stats_from_features,
    predict_features,
    region_contributions,
    run_ablation,
    save_checkpoint,
    stratified_split,
    subject_weight_map,
    train_model,
)
from morphogate.volume import GridGeometry, ScalarVolume
from morphogate.weighting import (
    GateParams,
    MlpParams,
    PriorWeights,
    init_mlp,
    sigmoid,
    indicator_map,
)

from test_atlas import octant_label_volume

GEOM8 = GridGeometry((8, 8, 8), (1.0, 1.0, 1.0))
UNIT_NORM = NormStats(t1_mean=0.0, t1_std=1.0, lj_mean=0.0, lj_std=1.0)


def make_features(subject_id, t1_means, lj_means, embedding, label, n_voxels=100):
    """Synthetic region-level features with unit pooled voxel statistics."""
    return SubjectFeatures(
        subject_id=subject_id,
        t1_means=np.asarray(t1_means, dtype=np.float64),
        lj_means=np.asarray(lj_means, dtype=np.float64),
        embedding=np.asarray(embedding, dtype=np.float64),
        label=label,
        t1_sum=0.0,
        t1_sumsq=float(n_voxels),
        lj_sum=0.0,
        lj_sumsq=float(n_voxels),
        n_voxels=n_voxels,
    )


def separable_cohort(n=12, d=2, seed=0):
    rng = np.random.default_rng(seed)
    feats = []
    for i in range(n):
        label = i % 2
        emb = rng.normal(size=d)
        emb /= np.linalg.norm(emb)
        lj = 5.0 if label == 1 else -5.0
        feats.append(make_features(f"s{i:02d}", [0.0], [lj], emb, label))
    return feats


class TestFuse:
    def setup_volumes(self, seed=1):
        rng = np.random.default_rng(seed)
        masks = build_masks(octant_label_volume(), 8)
        t1 = ScalarVolume(GEOM8, rng.normal(size=GEOM8.dims))
        lj = ScalarVolume(GEOM8, rng.normal(size=GEOM8.dims))
        w = ScalarVolume(GEOM8, rng.uniform(0.1, 0.9, size=GEOM8.dims))
        return masks, t1, lj, w

    def test_zero_image_weight_keeps_only_morphometry(self):
        _, t1, lj, w = self.setup_volumes()
        out = fuse(t1, lj, w, FusionConfig(image_weight=0.0))
        np.testing.assert_allclose(out.data, w.data * lj.data, atol=1e-15)

    def test_unit_weights_unit_lambda_sum_channels(self):
        _, t1, lj, _ = self.setup_volumes()
        ones = ScalarVolume(GEOM8, np.ones(GEOM8.dims))
        out = fuse(t1, lj, ones, FusionConfig(image_weight=1.0))
        np.testing.assert_allclose(out.data, t1.data + lj.data, atol=1e-15)

    def test_voxel_loop_oracle(self):
        _, t1, lj, w = self.setup_volumes(seed=2)
        out = fuse(t1, lj, w, FusionConfig(image_weight=0.1))
        for idx in [(0, 0, 0), (3, 5, 7), (7, 7, 7), (2, 4, 6)]:
            expected = 0.1 * w.data[idx] * t1.data[idx] + w.data[idx] * lj.data[idx]
            assert out.data[idx] == pytest.approx(expected, abs=1e-12)

    def test_without_morphometry_channel(self):
        _, t1, lj, w = self.setup_volumes()
        out = fuse(t1, None, w, use_dbm=False)
        np.testing.assert_allclose(out.data, w.data * t1.data, atol=1e-15)
        with pytest.raises(ValueError):
            fuse(t1, None, w, use_dbm=True)

    def test_geometry_mismatch(self):
        _, t1, lj, w = self.setup_volumes()
        other = ScalarVolume(GridGeometry((8, 8, 8), (2, 1, 1)), np.zeros((8, 8, 8)))
        with pytest.raises(GeometryMismatch):
            fuse(t1, lj, other)
        with pytest.raises(GeometryMismatch):
            fuse(t1, other, w)


class TestForward:
    def test_zero_head_gives_even_odds(self):
        masks = build_masks(octant_label_volume(), 8)
        x = ScalarVolume(GEOM8, np.random.default_rng(0).normal(size=GEOM8.dims))
        s, p = forward(x, masks, HeadParams(v=np.zeros(8), b=0.0))
        assert s == 0.0
        assert p == 0.5

    def test_single_region_closed_form(self):
        geom = GridGeometry((4, 4, 4), (1, 1, 1))
        from morphogate.volume import LabelVolume

        masks = build_masks(LabelVolume(geom, np.ones(geom.dims, dtype=np.int64)), 1)
        x = ScalarVolume(geom, np.full(geom.dims, 1.7))
        s, p = forward(x, masks, HeadParams(v=np.array([2.0]), b=-0.4))
        assert s == pytest.approx(2.0 * 1.7 - 0.4, abs=1e-12)
        assert p == pytest.approx(1 / (1 + math.exp(-s)), abs=1e-15)

    def test_composition_oracle(self):
        rng = np.random.default_rng(4)
        masks = build_masks(octant_label_volume(), 8)
        x = ScalarVolume(GEOM8, rng.normal(size=GEOM8.dims))
        head = HeadParams(v=rng.normal(size=8), b=0.3)
        s, p = forward(x, masks, head)
        expected = float(head.v @ region_means(x, masks) + 0.3)
        assert s == pytest.approx(expected, abs=1e-12)


class TestBceLoss:
    def test_even_odds(self):
        assert bce_loss(np.array([0.0]), np.array([1.0])) == pytest.approx(math.log(2), abs=1e-15)
        assert bce_loss(np.array([0.0]), np.array([0.0])) == pytest.approx(math.log(2), abs=1e-15)

    def test_extreme_logits(self):
        assert bce_loss(np.array([1e4]), np.array([1.0])) == 0.0
        assert bce_loss(np.array([1e4]), np.array([0.0])) == 1e4
        assert math.isfinite(bce_loss(np.array([-1e4]), np.array([0.0])))

    def test_naive_oracle_in_safe_range(self):
        # the naive form is stable when written through sigmoid(-s)
        s = np.linspace(-30, 30, 241)
        for y in (0.0, 1.0):
            naive = np.mean(-y * np.log(sigmoid(s)) - (1 - y) * np.log(sigmoid(-s)))
            assert bce_loss(s, np.full_like(s, y)) == pytest.approx(naive, abs=1e-12)

    def test_validation(self):
        with pytest.raises(EmptyBatch):
            bce_loss(np.array([]), np.array([]))
        with pytest.raises(ValueError):
            bce_loss(np.array([0.0]), np.array([0.0, 1.0]))


class TestBatchGradients:
    def test_perfect_predictions_zero_gradients(self):
        # logits at +-800 saturate the sigmoid to exactly 0 and 1 in float64
        ablation = AblationConfig(use_dbm=True, use_prior=False, use_patient=False)
        mlp = init_mlp(2, 2, 1, seed=0)
        head = HeadParams(v=np.array([800.0]), b=0.0)
        feats = [
            make_features("a", [0.0], [1.0], [1.0, 0.0], 1),
            make_features("b", [0.0], [-1.0], [0.0, 1.0], 0),
        ]
        loss, grads = batch_loss_and_grads(
            feats, UNIT_NORM, mlp, head, PriorWeights.uniform(1), GateParams(),
            FusionConfig(), ablation,
        )
        np.testing.assert_array_equal(grads.v, np.zeros(1))
        assert grads.b == 0.0
        np.testing.assert_array_equal(grads.mlp.w1, np.zeros_like(mlp.w1))

    def test_scalar_chain_rule(self):
        lam, alpha, beta = 0.1, 1.0, 1.0
        mlp = MlpParams(
            w1=np.array([[0.5]]), b1=np.array([0.1]), w2=np.array([[0.8]]), b2=np.array([-0.2])
        )
        head = HeadParams(v=np.array([1.3]), b=0.2)
        feats = make_features("a", [0.4], [0.9], [0.6], 1)
        loss, grads = batch_loss_and_grads(
            [feats], UNIT_NORM, mlp, head, PriorWeights(np.array([1.5])),
            GateParams(alpha, beta), FusionConfig(lam), AblationConfig(),
        )
        c = lam * 0.4 + 0.9
        hidden = math.tanh(0.5 * 0.6 + 0.1)
        delta = 0.8 * hidden - 0.2
        w = 1 / (1 + math.exp(-(alpha * 1.5 + beta * delta)))
        s = 1.3 * w * c + 0.2
        prob = 1 / (1 + math.exp(-s))
        assert loss == pytest.approx(math.log(1 + math.exp(s)) - s, abs=1e-12)
        dls = prob - 1.0
        assert grads.v[0] == pytest.approx(dls * w * c, abs=1e-14)
        assert grads.b == pytest.approx(dls, abs=1e-14)
        d_delta = dls * 1.3 * c * beta * w * (1 - w)
        assert grads.mlp.b2[0] == pytest.approx(d_delta, abs=1e-14)
        assert grads.mlp.w2[0, 0] == pytest.approx(d_delta * hidden, abs=1e-14)
        d_z1 = d_delta * 0.8 * (1 - hidden**2)
        assert grads.mlp.b1[0] == pytest.approx(d_z1, abs=1e-14)
        assert grads.mlp.w1[0, 0] == pytest.approx(d_z1 * 0.6, abs=1e-14)

    def test_finite_difference_all_parameters(self):
        rng = np.random.default_rng(17)
        d, h, m = 6, 4, 3
        mlp = init_mlp(d, h, m, seed=5)
        mlp.b1 += rng.normal(size=h) * 0.1
        mlp.b2 += rng.normal(size=m) * 0.1
        head = HeadParams(v=rng.normal(size=m) * 0.5, b=0.1)
        prior = PriorWeights(rng.uniform(0.5, 2.0, size=m))
        feats = []
        for i in range(5):
            emb = rng.normal(size=d)
            emb /= np.linalg.norm(emb)
            feats.append(
                make_features(f"s{i}", rng.normal(size=m), rng.normal(size=m), emb, i % 2)
            )
        args = (UNIT_NORM, mlp, head, prior, GateParams(), FusionConfig(), AblationConfig())
        _, grads = batch_loss_and_grads(feats, *args)
        analytic = {
            "w1": grads.mlp.w1, "b1": grads.mlp.b1, "w2": grads.mlp.w2,
            "b2": grads.mlp.b2, "v": grads.v, "b": np.asarray([grads.b]),
        }

        def loss_with(mlp2, head2):
            val, _ = batch_loss_and_grads(
                feats, UNIT_NORM, mlp2, head2, prior, GateParams(), FusionConfig(), AblationConfig()
            )
            return val

        eps = 1e-5
        checked = 0
        for name in ("w1", "b1", "w2", "b2", "v", "b"):
            shape = analytic[name].shape
            for idx in np.ndindex(shape):
                mp, hp = mlp.copy(), head.copy()
                mm, hm = mlp.copy(), head.copy()
                if name in ("w1", "b1", "w2", "b2"):
                    getattr(mp, name)[idx] += eps
                    getattr(mm, name)[idx] -= eps
                elif name == "v":
                    hp.v[idx] += eps
                    hm.v[idx] -= eps
                else:
                    hp.b += eps
                    hm.b -= eps
                fd = (loss_with(mp, hp) - loss_with(mm, hm)) / (2 * eps)
                g = analytic[name][idx]
                # absolute floor covers central-difference roundoff on tiny entries
                if abs(g) > 1e-8:
                    assert abs(fd - g) < 1e-6 * abs(g) + 1e-11, (name, idx)
                    checked += 1
        assert checked > 20

    def test_validation(self):
        mlp = init_mlp(2, 2, 1, seed=0)
        head = HeadParams(v=np.zeros(1), b=0.0)
        with pytest.raises(EmptyBatch):
            batch_loss_and_grads(
                [], UNIT_NORM, mlp, head, PriorWeights.uniform(1), GateParams(),
                FusionConfig(), AblationConfig(),
            )
        unlabeled = make_features("x", [0.0], [0.0], [1.0, 0.0], None)
        with pytest.raises(UnlabeledSubject):
            batch_loss_and_grads(
                [unlabeled], UNIT_NORM, mlp, head, PriorWeights.uniform(1), GateParams(),
                FusionConfig(), AblationConfig(),
            )


class TestSchedule:
    def test_anchor_points(self):
        cfg = TrainConfig(lr=1e-3, warmup_epochs=10, max_epochs=110)
        assert lr_at_epoch(0, cfg) == 0.0
        assert lr_at_epoch(10, cfg) == 1e-3
        assert lr_at_epoch(110, cfg) == pytest.approx(0.0, abs=1e-19)
        assert lr_at_epoch(60, cfg) == pytest.approx(0.5e-3, abs=1e-15)

    def test_warmup_is_linear(self):
        cfg = TrainConfig(lr=2e-3, warmup_epochs=4, max_epochs=20)
        np.testing.assert_allclose(
            [lr_at_epoch(e, cfg) for e in range(5)],
            [0.0, 0.5e-3, 1.0e-3, 1.5e-3, 2.0e-3],
            atol=1e-18,
        )


class TestAdamW:
    def reference_loop(self, cfg, params, grad_seq):
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        t = 0
        for grads, lr in grad_seq:
            t += 1
            for k in params:
                g = grads[k]
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                mhat = m[k] / (1 - cfg.beta1**t)
                vhat = v[k] / (1 - cfg.beta2**t)
                params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + cfg.eps)
                if k in ("w1", "w2", "v") and cfg.weight_decay:
                    params[k] = params[k] - lr * cfg.weight_decay * params[k]
        return params

    def test_two_steps_match_reference(self):
        rng = np.random.default_rng(3)
        cfg = TrainConfig(lr=1e-2, weight_decay=0.05)

        def fresh():
            return {
                "w1": rng_init.normal(size=(3, 2)),
                "b1": rng_init.normal(size=3),
                "w2": rng_init.normal(size=(2, 3)),
                "b2": rng_init.normal(size=2),
                "v": rng_init.normal(size=2),
                "b": rng_init.normal(size=1),
            }

        rng_init = np.random.default_rng(9)
        params = fresh()
        rng_init = np.random.default_rng(9)
        expected = fresh()
        grad_seq = []
        for lr in (1e-2, 5e-3):
            grad_seq.append(({k: rng.normal(size=p.shape) for k, p in params.items()}, lr))
        opt = AdamW(cfg, params)
        for grads, lr in grad_seq:
            opt.step(params, grads, lr)
        expected = self.reference_loop(cfg, expected, grad_seq)
        for k in params:
            np.testing.assert_allclose(params[k], expected[k], atol=1e-15)

    def test_biases_not_decayed(self):
        cfg = TrainConfig(lr=0.1, weight_decay=0.5)
        params = {
            "w1": np.array([[1.0]]), "b1": np.array([1.0]), "w2": np.array([[1.0]]),
            "b2": np.array([1.0]), "v": np.array([1.0]), "b": np.array([1.0]),
        }
        zero = {k: np.zeros_like(p) for k, p in params.items()}
        AdamW(cfg, params).step(params, zero, lr=0.1)
        assert params["b1"][0] == 1.0
        assert params["b2"][0] == 1.0
        assert params["b"][0] == 1.0
        for k in ("w1", "w2", "v"):
            assert params[k].flat[0] == pytest.approx(1.0 - 0.1 * 0.5, abs=1e-15)


class TestNormStats:
    def test_hand_accumulators(self):
        feats = [
            make_features("a", [0.0], [0.0], [1.0], 1, n_voxels=10),
            make_features("b", [0.0], [0.0], [1.0], 0, n_voxels=30),
        ]
        feats[0].t1_sum, feats[0].t1_sumsq = 10.0, 30.0
        feats[1].t1_sum, feats[1].t1_sumsq = 30.0, 70.0
        # pooled: n=40, mean=1, var=100/40-1=1.5
        norm = norm_stats_from_features(feats)
        assert norm.t1_mean == pytest.approx(1.0, abs=1e-15)
        assert norm.t1_std == pytest.approx(math.sqrt(1.5), abs=1e-15)

    def test_zero_variance_rejected(self):
        feats = [make_features("a", [0.0], [0.0], [1.0], 1)]
        feats[0].lj_sum, feats[0].lj_sumsq = 0.0, 0.0
        with pytest.raises(DegenerateNormStats):
            norm_stats_from_features(feats)

    def test_empty(self):
        with pytest.raises(EmptyBatch):
            norm_stats_from_features([])

    def test_constructor_validation(self):
        with pytest.raises(DegenerateNormStats):
            NormStats(0.0, 0.0, 0.0, 1.0)


class TestStratifiedSplit:
    def test_proportions_and_disjointness(self):
        labels = [1] * 10 + [0] * 10
        train, val = stratified_split(labels, 0.2, seed=0)
        assert sorted(train + val) == list(range(20))
        assert sum(labels[i] for i in val) == 2
        assert len(val) == 4

    def test_never_empties_a_class(self):
        labels = [1, 0, 0, 0, 0, 0, 0, 0, 0, 0]
        train, val = stratified_split(labels, 0.5, seed=1)
        assert any(labels[i] == 1 for i in train)

    def test_deterministic(self):
        labels = [i % 2 for i in range(30)]
        assert stratified_split(labels, 0.2, 5) == stratified_split(labels, 0.2, 5)


class TestTraining:
    def train_separable(self, seed=0):
        feats = separable_cohort()
        cfg = TrainConfig(
            lr=0.01, warmup_epochs=10, max_epochs=100, val_fraction=0.0,
            hidden_width=4, seed=seed,
        )
        return train_model(feats, PriorWeights.uniform(1), cfg), feats, cfg

    def test_separable_cohort_converges(self):
        (state, log), feats, _ = self.train_separable()
        logits, ys = [], []
        for f in feats:
            out = forward_features(
                f, state.norm, state.mlp, state.head, state.prior, state.gate,
                state.fusion, state.ablation,
            )
            logits.append(out.logit)
            ys.append(float(f.label))
        assert bce_loss(np.asarray(logits), np.asarray(ys)) < 0.05
        assert len(log) <= 100

    def test_rerun_is_bit_identical(self):
        (a, log_a), _, _ = self.train_separable()
        (b, log_b), _, _ = self.train_separable()
        assert np.array_equal(a.mlp.w1, b.mlp.w1)
        assert np.array_equal(a.mlp.b1, b.mlp.b1)
        assert np.array_equal(a.mlp.w2, b.mlp.w2)
        assert np.array_equal(a.mlp.b2, b.mlp.b2)
        assert np.array_equal(a.head.v, b.head.v)
        assert a.head.b == b.head.b
        assert [e.as_dict() for e in log_a] == [e.as_dict() for e in log_b]

    def test_seed_changes_the_fit(self):
        (a, _), _, _ = self.train_separable(seed=0)
        (b, _), _, _ = self.train_separable(seed=1)
        assert not np.array_equal(a.mlp.w1, b.mlp.w1)

    def test_threshold_is_fixed(self):
        (state, _), _, _ = self.train_separable()
        assert state.threshold == 0.5

    def test_validation(self):
        with pytest.raises(EmptyBatch):
            train_model([], PriorWeights.uniform(1))
        feats = separable_cohort()
        feats[3] = dataclasses.replace(feats[3], label=None)
        with pytest.raises(UnlabeledSubject):
            train_model(feats, PriorWeights.uniform(1))


class TestPrediction:
    def zero_state(self, m=2, d=3):
        return ModelState(
            mlp=init_mlp(d, 2, m, seed=0),
            head=HeadParams(v=np.zeros(m), b=0.0),
            prior=PriorWeights.uniform(m),
            gate=GateParams(),
            fusion=FusionConfig(),
            ablation=AblationConfig(),
            norm=UNIT_NORM,
            dbm=DbmConfig(),
            threshold=0.5,
            tau=0.30,
            embedder_desc={"kind": "hashing", "dim": d, "seed": 0},
            atlas_sha256="",
            prior_sha256="",
        )

    def test_zero_head_ties_to_class_one(self):
        state = self.zero_state()
        feats = make_features("a", [0.0, 0.0], [0.0, 0.0], [1.0, 0.0, 0.0], None)
        prob, cls = predict_features(feats, state)
        assert prob == 0.5
        assert cls == 1

    def test_learned_model_separates(self):
        feats = separable_cohort()
        cfg = TrainConfig(lr=0.01, max_epochs=100, val_fraction=0.0, hidden_width=4)
        state, _ = train_model(feats, PriorWeights.uniform(1), cfg)
        for f in feats:
            prob, cls = predict_features(f, state)
            assert 0.0 < prob < 1.0
            assert cls == f.label


class TestInterpretability:
    def test_ungated_defaults(self):
        feats = separable_cohort()
        cfg = TrainConfig(lr=0.01, max_epochs=20, val_fraction=0.0, hidden_width=4)
        ablation = AblationConfig(use_dbm=True, use_prior=False, use_patient=False)
        state, _ = train_model(feats, PriorWeights.uniform(1), cfg, ablation=ablation)
        np.testing.assert_array_equal(mean_gates(state, feats), np.ones(1))
        geom = GridGeometry((4, 4, 4), (1, 1, 1))
        from morphogate.volume import LabelVolume

        masks = build_masks(LabelVolume(geom, np.ones(geom.dims, dtype=np.int64)), 1)
        vol = subject_weight_map(feats[0], state, masks)
        np.testing.assert_array_equal(vol.data, indicator_map(masks).data)

    def test_gated_contributions(self, small_run):
        state = small_run["state"]
        feats = small_run["test_feats"]
        gates = mean_gates(state, feats)
        assert gates.shape == (state.m,)
        assert np.all((gates > 0) & (gates < 1))
        np.testing.assert_allclose(
            region_contributions(state, feats), np.abs(state.head.v) * gates, atol=1e-15
        )

    def test_gated_weight_map_matches_gate_values(self, small_run):
        state = small_run["state"]
        masks = small_run["masks"]
        feats = small_run["test_feats"][0]
        vol = subject_weight_map(feats, state, masks)
        inside = masks.in_brain()
        assert np.all((vol.data[inside] > 0) & (vol.data[inside] < 1))
        np.testing.assert_array_equal(vol.data[~inside], 0.0)


class TestSmallCohortFit:
    def test_predictions_behave(self, small_run):
        state = small_run["state"]
        correct = 0
        for f in small_run["test_feats"]:
            prob, cls = predict_features(f, state)
            assert 0.0 < prob < 1.0
            assert cls == (1 if prob >= 0.5 else 0)
            correct += int(cls == f.label)
        assert correct / len(small_run["test_feats"]) >= 0.6

    def test_training_fits_the_dev_split(self, small_run):
        state = small_run["state"]
        feats = small_run["dev_feats"]
        correct = sum(
            int(predict_features(f, state)[1] == f.label) for f in feats
        )
        assert correct / len(feats) >= 0.75


class TestAblationGrid:
    def test_rows_and_no_dbm_sanity(self):
        feats = separable_cohort(n=16)
        test = separable_cohort(n=8, seed=9)
        cfg = TrainConfig(lr=0.01, max_epochs=30, val_fraction=0.0, hidden_width=4)
        rows = run_ablation(feats, test, PriorWeights.uniform(1), seeds=[0], cfg=cfg)
        assert [r["config"] for r in rows] == [
            "full", "patient_only", "prior_only", "dbm_only", "no_dbm"
        ]
        by_name = {r["config"]: r for r in rows}
        assert by_name["full"]["mean_acc"] == 1.0
        # the image channel carries no signal in this cohort
        assert by_name["no_dbm"]["mean_acc"] <= by_name["full"]["mean_acc"]
        for r in rows:
            assert len(r["acc_by_seed"]) == 1

    def test_unlabeled_test_subject_rejected(self):
        feats = separable_cohort(n=8)
        test = [dataclasses.replace(separable_cohort(n=2)[0], label=None)]
        with pytest.raises(UnlabeledSubject):
            run_ablation(feats, test, PriorWeights.uniform(1), seeds=[0])


class TestCheckpoint:
    def test_round_trip(self, small_run, tmp_path):
        state = small_run["state"]
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        back = load_checkpoint(path)
        assert np.array_equal(back.mlp.w1, state.mlp.w1)
        assert np.array_equal(back.mlp.b1, state.mlp.b1)
        assert np.array_equal(back.mlp.w2, state.mlp.w2)
        assert np.array_equal(back.mlp.b2, state.mlp.b2)
        assert np.array_equal(back.head.v, state.head.v)
        assert back.head.b == state.head.b
        assert back.norm == state.norm
        assert back.fusion == state.fusion
        assert back.gate == state.gate
        assert back.ablation == state.ablation
        assert back.dbm == state.dbm
        assert back.threshold == state.threshold
        assert back.tau == state.tau
        assert back.embedder_desc == state.embedder_desc
        assert back.atlas_sha256 == state.atlas_sha256
        assert back.prior_sha256 == state.prior_sha256
        assert back.atlas_path == state.atlas_path
        np.testing.assert_array_equal(back.prior.values, state.prior.values)

    def test_rewrite_is_byte_identical(self, small_run, tmp_path):
        state = small_run["state"]
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(state, a)
        save_checkpoint(state, b)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.ckpt.json").read_text() == (tmp_path / "b.ckpt.json").read_text()

    def test_truncated_payload(self, small_run, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(small_run["state"], path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(PayloadSizeMismatch):
            load_checkpoint(path)

    def test_header_corruption(self, small_run, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(small_run["state"], path)
        header_path = tmp_path / "model.ckpt.json"
        original = header_path.read_text()
        header_path.write_text("{broken")
        with pytest.raises(MalformedHeader):
            load_checkpoint(path)
        raw = json.loads(original)
        raw["format"] = "something-else"
        header_path.write_text(json.dumps(raw))
        with pytest.raises(MalformedHeader):
            load_checkpoint(path)
        header_path.unlink()
        with pytest.raises(MalformedHeader):
            load_checkpoint(path)

    def test_embedder_restoration(self, small_run):
        state = small_run["state"]
        emb = embedder_for_state(state)
        assert emb.describe() == state.embedder_desc
        bare = dataclasses.replace(state, embedder_desc={})
        with pytest.raises(MalformedHeader):
            embedder_for_state(bare)
