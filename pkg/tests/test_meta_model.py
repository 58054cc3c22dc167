import numpy as np
import pytest

from rarelift.ensemble import MetaDataset, meta_feature_matrix, meta_feature_names
from rarelift.errors import ConfigError, DataError, TrainingError
from rarelift.meta_model import (
    FUSION_NAMES,
    DenseFusionModel,
    FittedFusion,
    HybridParams,
    MetaModel,
    fuse_baseline,
    fusion_predict,
    meta_predict,
    train_meta,
)
from rarelift.metrics import auc
from rarelift.nn import TwoBranchNet, logit_loss_grads, logit_loss_value


def meta_from_raw(raw, labels):
    names = tuple(f"m{j}" for j in range(raw.shape[1]))
    return MetaDataset(
        ids=np.arange(raw.shape[0], dtype=np.int64),
        features=meta_feature_matrix(raw),
        labels=np.asarray(labels, dtype=np.int8),
        feature_names=meta_feature_names(names),
        n_models=raw.shape[1],
        learner_names=names,
    )


def planted_raw(n, seed, noise_cols=2, rate=0.3):
    """Base predictions where column 0 is the label itself."""
    rng = np.random.default_rng(seed)
    labels = (rng.uniform(size=n) < rate).astype(np.int8)
    cols = [labels.astype(np.float64)]
    cols.extend(rng.uniform(size=n) for _ in range(noise_cols))
    return np.column_stack(cols), labels


SMALL_PARAMS = HybridParams(epochs=25, batch_size=64, learning_rate=0.1, seed=3)


class TestHybridParams:
    def test_defaults(self):
        p = HybridParams()
        assert p.raw_branch_hidden == (16,)
        assert p.rel_branch_hidden == (32,)
        assert p.fusion_hidden == (16,)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"raw_branch_hidden": ()},
            {"rel_branch_hidden": (0,)},
            {"fusion_hidden": (8, -1)},
            {"learning_rate": 0.0},
            {"epochs": -1},
            {"batch_size": 0},
            {"l2": -0.1},
            {"class_weight_pos": 0.0},
            {"early_stopping_rounds": 0},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            HybridParams(**kwargs)


class TestGradients:
    def test_meta_architecture_matches_finite_differences(self):
        # the exact net train_meta builds for a 3-model ensemble
        net = TwoBranchNet(3, 15, (16,), (32,), (16,), seed=11)
        rng = np.random.default_rng(99)
        for arr in net.param_arrays():
            arr += rng.normal(0.0, 0.05, size=arr.shape)
        x = rng.uniform(size=(5, 18))
        y = np.array([1.0, 0.0, 0.0, 1.0, 0.0])
        w = np.where(y == 1.0, 3.0, 1.0)
        analytic = logit_loss_grads(net, x, y, w, 1e-4)
        eps = 1e-6
        for arr, a_grad in zip(net.param_arrays(), analytic):
            flat = arr.ravel()
            num = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = logit_loss_value(net, x, y, w, 1e-4)
                flat[i] = orig - eps
                down = logit_loss_value(net, x, y, w, 1e-4)
                flat[i] = orig
                num[i] = (up - down) / (2 * eps)
            np.testing.assert_allclose(a_grad.ravel(), num, rtol=1e-4, atol=1e-7)


class TestTrainMeta:
    def test_planted_model_reaches_high_auc(self):
        raw, labels = planted_raw(900, seed=0)
        cut = 600
        model = train_meta(meta_from_raw(raw[:cut], labels[:cut]), SMALL_PARAMS)
        test_scores = model.predict_matrix(meta_feature_matrix(raw[cut:]))
        assert auc(labels[cut:], test_scores) >= 0.99

    def test_zero_epochs_still_emits_probabilities(self):
        raw, labels = planted_raw(200, seed=1)
        params = HybridParams(epochs=0, early_stopping_rounds=None)
        model = train_meta(meta_from_raw(raw, labels), params)
        p = model.predict_matrix(meta_feature_matrix(raw))
        assert np.all((p >= 0.0) & (p <= 1.0))

    def test_divergence_reports_epoch(self):
        raw, labels = planted_raw(200, seed=2)
        params = HybridParams(
            learning_rate=1e9, l2=1e9, epochs=60, early_stopping_rounds=None
        )
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingError, match=r"epoch \d+"):
                train_meta(meta_from_raw(raw, labels), params)

    def test_single_class_rejected(self):
        raw, _ = planted_raw(150, seed=3)
        with pytest.raises(DataError, match="both classes"):
            train_meta(meta_from_raw(raw, np.zeros(150, dtype=np.int8)), SMALL_PARAMS)

    def test_branch_split_partitions_features(self):
        raw, labels = planted_raw(200, seed=4, noise_cols=4)
        model = train_meta(
            meta_from_raw(raw, labels), HybridParams(epochs=1, early_stopping_rounds=None)
        )
        assert model.n_features == 4 * 5 + 6
        merged = np.sort(np.r_[model.raw_indices, model.relative_indices])
        np.testing.assert_array_equal(merged, np.arange(model.n_features))
        assert len(np.intersect1d(model.raw_indices, model.relative_indices)) == 0

    def test_seed_reproducibility(self):
        raw, labels = planted_raw(300, seed=5)
        a = train_meta(meta_from_raw(raw, labels), SMALL_PARAMS)
        b = train_meta(meta_from_raw(raw, labels), SMALL_PARAMS)
        np.testing.assert_array_equal(
            a.predict_matrix(meta_feature_matrix(raw)),
            b.predict_matrix(meta_feature_matrix(raw)),
        )


class TestMetaPredict:
    def _model(self):
        raw, labels = planted_raw(250, seed=6)
        return train_meta(meta_from_raw(raw, labels), SMALL_PARAMS), raw

    def test_batch_equals_per_row(self):
        model, raw = self._model()
        x = meta_feature_matrix(raw[:20])
        batch = model.predict_matrix(x)
        singles = np.array([meta_predict(model, row) for row in x])
        np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-12)

    def test_identical_vectors_identical_outputs(self):
        model, raw = self._model()
        v = meta_feature_matrix(raw[:1])[0]
        assert meta_predict(model, v) == meta_predict(model, v.copy())

    def test_length_mismatch_rejected(self):
        model, _ = self._model()
        with pytest.raises(DataError, match="expected 18"):
            meta_predict(model, np.zeros(17))

    def test_matrix_input_rejected(self):
        model, raw = self._model()
        with pytest.raises(DataError, match="1-d"):
            meta_predict(model, meta_feature_matrix(raw[:3]))


class TestSimpleAverage:
    def test_hand_value(self):
        fusion, preds = fuse_baseline("simple_average", np.array([[0.2, 0.4]]), None)
        assert preds[0] == pytest.approx(0.3)

    def test_single_model_allowed(self):
        raw = np.array([[0.3], [0.8]])
        _, preds = fuse_baseline("simple_average", raw, None)
        np.testing.assert_array_equal(preds, [0.3, 0.8])


class TestWeightedAverage:
    def test_vertex_weights_recover_one_model(self):
        rng = np.random.default_rng(7)
        raw = rng.uniform(size=(60, 2))
        fusion = FittedFusion("weighted_average", 2, weights=np.array([1.0, 0.0]))
        np.testing.assert_array_equal(fusion_predict(fusion, raw), raw[:, 0])

    def test_fit_prefers_informative_model(self):
        raw, labels = planted_raw(500, seed=8)
        fusion, preds = fuse_baseline("weighted_average", raw, labels, seed=0)
        # ascent stops as soon as no grid move strictly improves AUC, so the
        # planted column need not take all the mass, just the most
        assert fusion.weights.argmax() == 0
        assert fusion.weights.sum() == pytest.approx(1.0)
        assert np.all(fusion.weights >= 0)
        assert auc(labels, preds) >= 0.99

    def test_fit_deterministic(self):
        raw, labels = planted_raw(400, seed=9)
        a, _ = fuse_baseline("weighted_average", raw, labels, seed=5)
        b, _ = fuse_baseline("weighted_average", raw, labels, seed=5)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ConfigError):
            FittedFusion("weighted_average", 2, weights=np.array([0.7, 0.7]))
        with pytest.raises(ConfigError):
            FittedFusion("weighted_average", 2, weights=np.array([1.2, -0.2]))

    def test_needs_labels(self):
        with pytest.raises(DataError, match="labels"):
            fuse_baseline("weighted_average", np.full((10, 2), 0.5), None)


class TestStackingLogreg:
    def test_planted_oracle(self):
        raw, labels = planted_raw(700, seed=10)
        cut = 500
        fusion, _ = fuse_baseline("stacking_logreg", raw[:cut], labels[:cut])
        assert fusion.coefficients[0] > 0
        assert fusion.coefficients[0] > abs(fusion.coefficients[1])
        test_scores = fusion_predict(fusion, raw[cut:])
        assert auc(labels[cut:], test_scores) >= 0.99

    def test_outputs_are_probabilities(self):
        raw, labels = planted_raw(300, seed=11)
        _, preds = fuse_baseline("stacking_logreg", raw, labels)
        assert np.all((preds >= 0.0) & (preds <= 1.0))


class TestStackingGbdt:
    def test_planted_oracle(self):
        raw, labels = planted_raw(700, seed=12)
        cut = 500
        fusion, _ = fuse_baseline("stacking_gbdt", raw[:cut], labels[:cut], seed=0)
        test_scores = fusion_predict(fusion, raw[cut:])
        assert auc(labels[cut:], test_scores) >= 0.99
        assert fusion.model.kind == "gbdt"


class TestHybridFusion:
    def test_hybrid_wraps_meta_model(self):
        raw, labels = planted_raw(400, seed=13)
        fusion, preds = fuse_baseline(
            "hybrid", raw, labels, hybrid_params=SMALL_PARAMS
        )
        assert isinstance(fusion.model, MetaModel)
        assert np.all((preds >= 0.0) & (preds <= 1.0))

    def test_no_split_uses_one_stack(self):
        raw, labels = planted_raw(400, seed=14)
        fusion, preds = fuse_baseline(
            "hybrid_no_split", raw, labels, hybrid_params=SMALL_PARAMS
        )
        assert isinstance(fusion.model, DenseFusionModel)
        # single stack sized by the relative branch plus the fusion head
        widths = fusion.model.net.stack.sizes
        assert widths == [18, 32, 16, 1]
        assert np.all((preds >= 0.0) & (preds <= 1.0))

    def test_no_split_learns_planted_signal(self):
        raw, labels = planted_raw(900, seed=15)
        cut = 600
        fusion, _ = fuse_baseline(
            "hybrid_no_split", raw[:cut], labels[:cut], hybrid_params=SMALL_PARAMS
        )
        scores = fusion_predict(fusion, raw[cut:])
        assert auc(labels[cut:], scores) >= 0.95

    def test_permuting_model_order_is_benign(self):
        raw, labels = planted_raw(900, seed=16, noise_cols=3)
        cut = 600
        perm = np.array([2, 0, 3, 1])
        aucs = []
        for cols in (np.arange(4), perm):
            fusion, _ = fuse_baseline(
                "hybrid", raw[:cut, cols], labels[:cut], hybrid_params=SMALL_PARAMS
            )
            scores = fusion_predict(fusion, raw[cut:, cols])
            aucs.append(auc(labels[cut:], scores))
        assert abs(aucs[0] - aucs[1]) < 0.05


class TestFusionGuards:
    def test_every_strategy_stays_in_unit_interval(self):
        rng = np.random.default_rng(17)
        raw, labels = planted_raw(300, seed=18)
        fresh = rng.uniform(size=(80, raw.shape[1]))
        for name in FUSION_NAMES:
            fusion, _ = fuse_baseline(
                name, raw, labels, hybrid_params=SMALL_PARAMS
            )
            scores = fusion_predict(fusion, fresh)
            assert np.all((scores >= 0.0) & (scores <= 1.0)), name

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ConfigError, match="unknown fusion"):
            fuse_baseline("voting", np.full((5, 2), 0.5), np.zeros(5))

    def test_single_model_restricted_to_average(self):
        raw = np.full((50, 1), 0.4)
        labels = np.r_[np.ones(10), np.zeros(40)]
        for name in FUSION_NAMES:
            if name == "simple_average":
                continue
            with pytest.raises(ConfigError, match="single-model"):
                fuse_baseline(name, raw, labels)

    def test_out_of_range_predictions_rejected(self):
        labels = np.r_[np.ones(3), np.zeros(3)]
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            fuse_baseline("simple_average", np.full((6, 2), 1.5), labels)

    def test_model_count_mismatch_on_predict(self):
        fusion = FittedFusion("simple_average", 3)
        with pytest.raises(DataError, match="expected 3"):
            fusion_predict(fusion, np.full((4, 2), 0.5))
