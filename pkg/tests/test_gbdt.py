from __future__ import annotations

import json

import numpy as np
import pytest

from oracles import auc_ranksum_ref, best_split_1d_ref, tree_eval_ref
from pedefense.gbdt import (
    LEAF_VALUE_BOUND,
    CorruptModel,
    DimensionMismatch,
    TrainConfig,
    Tree,
    TreeEnsemble,
    load_model,
    logistic_gradients,
    model_to_dict,
    predict,
    predict_one,
    save_model,
    train,
    verify_gradients,
)


def single_split_ensemble(threshold=1.0, left=-2.0, right=2.0) -> TreeEnsemble:
    tree = Tree(feature=np.array([0, -1, -1], dtype=np.int32),
                threshold=np.array([threshold, 0.0, 0.0]),
                left=np.array([1, -1, -1], dtype=np.int32),
                right=np.array([2, -1, -1], dtype=np.int32),
                value=np.array([0.0, left, right]),
                default_left=np.ones(3, dtype=bool))
    return TreeEnsemble(trees=[tree], base_score=0.0,
                        monotone=np.zeros(3, dtype=np.int8),
                        feature_dimension=3)


@pytest.fixture(scope="module")
def gaussian_data():
    rng = np.random.default_rng(42)
    n = 3000
    X = np.vstack([rng.normal(0.0, 1.0, size=(n // 2, 10)),
                   rng.normal(0.9, 1.0, size=(n // 2, 10))])
    y = np.r_[np.zeros(n // 2, dtype=int), np.ones(n // 2, dtype=int)]
    perm = rng.permutation(n)
    return X[perm], y[perm]


class TestPredict:
    def test_empty_ensemble_is_half(self):
        ens = TreeEnsemble(trees=[], base_score=0.0,
                           monotone=np.zeros(2, np.int8), feature_dimension=2)
        assert predict_one(ens, np.zeros(2)) == 0.5

    def test_single_split_closed_form(self):
        ens = single_split_ensemble()
        assert predict_one(ens, np.zeros(3)) \
            == pytest.approx(0.1192029220221175, abs=1e-12)
        assert predict_one(ens, np.array([5.0, 0, 0])) \
            == pytest.approx(0.8807970779778823, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            predict_one(single_split_ensemble(), np.zeros(7))

    def test_matches_recursive_oracle(self, gaussian_data):
        X, y = gaussian_data
        model = train(X[:600], y[:600], TrainConfig(num_trees=20, max_depth=4,
                                                    min_samples_leaf=5))
        payload = model_to_dict(model)
        probs = predict(model, X[600:700])
        for i, x in enumerate(X[600:700]):
            assert probs[i] == pytest.approx(tree_eval_ref(payload, x),
                                             abs=1e-12)


class TestTrain:
    def test_degenerate_single_class(self):
        X = np.random.default_rng(0).normal(size=(40, 4))
        model = train(X, np.ones(40, dtype=int))
        assert model.trees == []
        assert predict_one(model, np.zeros(4)) > 0.99
        model0 = train(X, np.zeros(40, dtype=int))
        assert predict_one(model0, np.zeros(4)) < 0.01

    def test_first_split_matches_gain_oracle(self):
        # fewer unique values than histogram bins: the trainer's candidate
        # thresholds are then exactly the midpoints the oracle enumerates
        rng = np.random.default_rng(1)
        grid = np.round(np.linspace(0, 1, 180), 4)
        x = rng.choice(grid, 500)
        y = (x > 0.5).astype(int)
        X = x.reshape(-1, 1)
        model = train(X, y, TrainConfig(num_trees=1, max_depth=1,
                                        min_samples_leaf=1,
                                        learning_rate=1.0))
        root_threshold = float(model.trees[0].threshold[0])
        # oracle reproduces the weighted first-round split search exactly
        n_pos = y.sum()
        w = np.where(y == 1, (len(y) - n_pos) / n_pos, 1.0)
        prior = np.clip((w * y).sum() / w.sum(), 1e-3, 1 - 1e-3)
        p = np.full(len(y), prior)
        g = w * (p - y)
        h = w * p * (1 - p)
        oracle_thr = best_split_1d_ref(list(x), list(g), list(h), lam=1.0,
                                       min_leaf=1)
        assert root_threshold == pytest.approx(oracle_thr, abs=1e-12)
        gap = (x[x > 0.5].min() + x[x <= 0.5].max()) / 2
        assert abs(root_threshold - gap) < 1e-9

    def test_heldout_auc(self, gaussian_data):
        X, y = gaussian_data
        model = train(X[:2000], y[:2000], TrainConfig())
        probs = predict(model, X[2000:])
        auc = auc_ranksum_ref(list(probs), list(y[2000:]))
        assert auc >= 0.95

    def test_training_determinism(self, gaussian_data):
        X, y = gaussian_data
        cfg = TrainConfig(num_trees=15, subsample=0.8, colsample=0.7, seed=9)
        assert train(X[:500], y[:500], cfg).digest() \
            == train(X[:500], y[:500], cfg).digest()

    def test_accepted_gains_nonnegative(self, gaussian_data):
        X, y = gaussian_data
        model = train(X[:800], y[:800], TrainConfig(num_trees=10))
        assert model.metadata["n_splits"] > 0
        assert model.metadata["min_split_gain"] >= 0.0

    def test_leaf_value_bound(self, gaussian_data):
        X, y = gaussian_data
        model = train(X[:800], y[:800],
                      TrainConfig(num_trees=30, learning_rate=1.0,
                                  min_samples_leaf=1))
        for tree in model.trees:
            assert np.all(np.abs(tree.value) <= LEAF_VALUE_BOUND)

    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            train(np.zeros((4, 2)), np.array([0, 1, 2, 1]))


class TestMonotone:
    @pytest.fixture(scope="class")
    def count_model(self):
        rng = np.random.default_rng(7)
        n, d = 1000, 40
        X = rng.poisson(1.0, size=(n, d)).astype(float)
        y = np.zeros(n, dtype=int)
        y[: n // 2] = 1
        X[y == 1, :6] += rng.poisson(3.0, size=(n // 2, 6))
        # benign-elevated buckets tempt decreasing splits; all must be refused
        X[y == 0, 10:16] += rng.poisson(3.0, size=(n // 2, 6))
        perm = rng.permutation(n)
        model = train(X[perm], y[perm],
                      TrainConfig(num_trees=40, max_depth=5,
                                  histogram_bins=32, min_samples_leaf=10),
                      monotone=1)
        return model, d

    def test_probe_monotonicity(self, count_model):
        model, d = count_model
        rng = np.random.default_rng(8)
        xs = rng.poisson(1.5, size=(1000, d)).astype(float)
        deltas = (rng.poisson(0.7, size=(1000, d)).astype(float)
                  * (rng.random((1000, d)) < 0.3))
        assert np.min(predict(model, xs + deltas) - predict(model, xs)) \
            >= -1e-12

    def test_monotone_metadata_round_trips(self, count_model, tmp_path):
        model, _ = count_model
        path = tmp_path / "mono.json"
        save_model(model, path)
        loaded = load_model(path)
        assert np.array_equal(loaded.monotone, model.monotone)

    def test_scalar_broadcast_and_validation(self):
        X = np.random.default_rng(3).normal(size=(100, 4))
        y = (X[:, 0] > 0).astype(int)
        model = train(X, y, TrainConfig(num_trees=3), monotone=1)
        assert np.array_equal(model.monotone, np.ones(4, dtype=np.int8))
        with pytest.raises(ValueError):
            train(X, y, TrainConfig(num_trees=3), monotone=[2, 0, 0, 0])


class TestGradients:
    def test_closed_form_points(self):
        g, h = logistic_gradients(np.array([0.5]), np.array([1.0]))
        assert g[0] == -0.5 and h[0] == 0.25
        g, h = logistic_gradients(np.array([0.9]), np.array([0.0]))
        assert g[0] == pytest.approx(0.9) and h[0] == pytest.approx(0.09)

    def test_finite_difference_agreement(self):
        report = verify_gradients(n_points=100, seed=0)
        assert report.max_abs_error <= 1e-5


class TestSerialization:
    def test_round_trip_predictions(self, gaussian_data, tmp_path):
        X, y = gaussian_data
        model = train(X[:500], y[:500], TrainConfig(num_trees=10))
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        probes = np.random.default_rng(11).normal(size=(1000, 10))
        assert np.array_equal(predict(model, probes), predict(loaded, probes))

    def test_truncated_file(self, gaussian_data, tmp_path):
        X, y = gaussian_data
        model = train(X[:200], y[:200], TrainConfig(num_trees=3))
        path = tmp_path / "model.json"
        save_model(model, path)
        path.write_text(path.read_text()[:200])
        with pytest.raises(CorruptModel):
            load_model(path)

    def test_hand_written_model_closed_form(self, tmp_path):
        payload = {
            "format": "pedefense-gbdt", "version": 1,
            "feature_dimension": 1, "base_score": 0.0,
            "monotone": [0], "metadata": {},
            "trees": [[{"f": 0, "t": 1.0, "l": 1, "r": 2, "d": "left"},
                       {"v": -2.0}, {"v": 2.0}]],
        }
        path = tmp_path / "hand.json"
        path.write_text(json.dumps(payload))
        model = load_model(path)
        assert predict_one(model, np.array([0.0])) \
            == pytest.approx(0.1192029220221175, abs=1e-12)

    @pytest.mark.parametrize("mutate", [
        lambda d: d.update(version=99),
        lambda d: d["trees"][0][0].update(l=5),
        lambda d: d["trees"][0][0].update(f=12),
        lambda d: d.update(format="something"),
    ])
    def test_structural_validation(self, tmp_path, mutate):
        payload = {
            "format": "pedefense-gbdt", "version": 1,
            "feature_dimension": 1, "base_score": 0.0,
            "monotone": [0], "metadata": {},
            "trees": [[{"f": 0, "t": 1.0, "l": 1, "r": 2, "d": "left"},
                       {"v": -1.0}, {"v": 1.0}]],
        }
        mutate(payload)
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(CorruptModel):
            load_model(path)
