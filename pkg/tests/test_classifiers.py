"""Classifier tests: separable-blob accuracy, gini oracle, ranking, determinism."""

import numpy as np
import pytest

from trafficbench.attack.classifiers import (
    CLASSIFIER_KINDS,
    best_gini_split,
    predict_topk,
    train_classifier,
)
from trafficbench.ingest import ContractError


def make_blobs(seed=0, n_per=40, n_classes=3, d=4, spread=0.5):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-10, 10, size=(n_classes, d))
    x = np.concatenate(
        [centers[c] + rng.normal(scale=spread, size=(n_per, d)) for c in range(n_classes)]
    )
    y = np.repeat([f"cls{c}" for c in range(n_classes)], n_per)
    perm = rng.permutation(len(y))
    return x[perm], y[perm]


class TestAllKinds:
    @pytest.mark.parametrize("kind", CLASSIFIER_KINDS)
    def test_separable_blobs(self, kind):
        x, y = make_blobs(seed=3)
        model = train_classifier(kind, x, y, seed=1)
        assert (model.predict(x) == y).mean() >= 0.95

    @pytest.mark.parametrize("kind", CLASSIFIER_KINDS)
    def test_proba_rows_sum_to_one(self, kind):
        x, y = make_blobs(seed=4)
        model = train_classifier(kind, x, y, seed=1)
        proba = model.predict_proba(x[:10])
        assert proba.shape == (10, 3)
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-9)
        assert proba.min() >= 0.0

    @pytest.mark.parametrize("kind", CLASSIFIER_KINDS)
    def test_deterministic_given_seed(self, kind):
        x, y = make_blobs(seed=5)
        a = train_classifier(kind, x, y, seed=7).predict_proba(x)
        b = train_classifier(kind, x, y, seed=7).predict_proba(x)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("kind", CLASSIFIER_KINDS)
    def test_permuted_labels_near_chance(self, kind):
        # control: shuffled labels must not be learnable on held-out points
        x, y = make_blobs(seed=6, n_per=60)
        rng = np.random.default_rng(0)
        y_shuf = rng.permutation(y)
        model = train_classifier(kind, x[:120], y_shuf[:120], seed=1)
        acc = (model.predict(x[120:]) == y_shuf[120:]).mean()
        assert acc < 0.6  # chance is 1/3

    def test_unknown_kind(self):
        x, y = make_blobs()
        with pytest.raises(ContractError):
            train_classifier("svm", x, y)

    def test_needs_two_classes(self):
        x = np.zeros((5, 2))
        with pytest.raises(ContractError):
            train_classifier("k_nearest", x, ["a"] * 5)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            train_classifier("naive_bayes", np.zeros((4, 2)), ["a", "b", "a"])


class TestGiniSplit:
    def test_exhaustive_oracle(self):
        # compare against a direct O(n^2 d) recomputation of weighted gini
        rng = np.random.default_rng(11)
        x = rng.uniform(size=(30, 3))
        y = rng.integers(0, 3, size=30)

        def gini(labels):
            if len(labels) == 0:
                return 0.0
            p = np.bincount(labels, minlength=3) / len(labels)
            return 1.0 - float(np.sum(p * p))

        best_score = np.inf
        for f in range(3):
            for thr in np.unique(x[:, f]):
                mask = x[:, f] < thr
                if not mask.any() or mask.all():
                    continue
                score = (mask.sum() * gini(y[mask]) + (~mask).sum() * gini(y[~mask])) / 30
                best_score = min(best_score, score)

        feat, thr, gain = best_gini_split(x, y, 3, np.arange(3))
        mask = x[:, feat] < thr
        got = (mask.sum() * gini(y[mask]) + (~mask).sum() * gini(y[~mask])) / 30
        assert got == pytest.approx(best_score, abs=1e-12)
        assert gain == pytest.approx(gini(y) - got, abs=1e-12)

    def test_pure_node_no_split(self):
        x = np.arange(10, dtype=np.float64).reshape(-1, 1)
        feat, thr, gain = best_gini_split(x, np.zeros(10, dtype=np.int64), 1, np.array([0]))
        assert gain == 0.0

    def test_perfect_split(self):
        x = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])
        y = np.array([0, 0, 0, 1, 1, 1])
        feat, thr, gain = best_gini_split(x, y, 2, np.array([0]))
        assert feat == 0 and 2.0 < thr < 10.0
        assert gain == pytest.approx(0.5, abs=1e-12)


class TestTopK:
    def test_ranking_matches_proba(self):
        x, y = make_blobs(seed=12)
        model = train_classifier("random_forest", x, y, seed=2)
        ranked = predict_topk(model, x[:20], k=3)
        proba = model.predict_proba(x[:20])
        for i in range(20):
            probs = proba[i][np.searchsorted(model.classes_, ranked[i])]
            assert np.all(np.diff(probs) <= 1e-12)  # non-increasing

    def test_top1_equals_predict(self):
        x, y = make_blobs(seed=13)
        model = train_classifier("naive_bayes", x, y, seed=2)
        assert np.array_equal(predict_topk(model, x, 1)[:, 0], model.predict(x))

    def test_tie_break_by_class_id(self):
        # 1-NN with k=2 and one neighbor of each class ties at 0.5/0.5
        xtr = np.array([[0.0], [2.0]])
        model = train_classifier("k_nearest", xtr, ["a", "b"], hyper={"k": 2})
        ranked = predict_topk(model, np.array([[1.0]]), k=2)
        assert list(ranked[0]) == ["a", "b"]

    def test_k_too_large(self):
        x, y = make_blobs(seed=14)
        model = train_classifier("k_nearest", x, y)
        with pytest.raises(ContractError):
            predict_topk(model, x, k=4)


class TestKindSpecific:
    def test_knn_exact_neighbor(self):
        xtr = np.array([[0.0, 0.0], [5.0, 5.0], [10.0, 0.0]])
        model = train_classifier("k_nearest", xtr, ["a", "b", "c"], hyper={"k": 1})
        assert list(model.predict(xtr + 0.01)) == ["a", "b", "c"]

    def test_forest_beats_stump_on_xor(self):
        rng = np.random.default_rng(15)
        x = rng.uniform(-1, 1, size=(200, 2))
        y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
        tree = train_classifier("decision_tree", x, y, seed=1)
        assert (tree.predict(x) == y).mean() > 0.9  # depth > 1 handles xor

    def test_logistic_margin_monotone(self):
        x = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0], [3.0]])
        y = np.array([0, 0, 0, 1, 1, 1])
        model = train_classifier("logistic_regression", x, y)
        p = model.predict_proba(np.array([[-5.0], [0.0], [5.0]]))[:, 1]
        assert p[0] < p[1] < p[2]
