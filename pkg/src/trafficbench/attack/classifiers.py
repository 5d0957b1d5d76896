"""From-scratch feature-based classifiers for the inference attacks.

Five deterministic NumPy models behind one interface: softmax logistic
regression, CART decision tree (gini), bootstrap random forest, k-nearest
neighbors, and Gaussian naive Bayes.  Every model exposes
``predict_proba`` returning rows that sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from trafficbench.ingest import ContractError

CLASSIFIER_KINDS = (
    "logistic_regression",
    "decision_tree",
    "random_forest",
    "k_nearest",
    "naive_bayes",
)


def train_classifier(kind: str, features: np.ndarray, labels, hyper: dict | None = None, seed: int = 0):
    """Fit one of the five classifier kinds; deterministic given the seed."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise ContractError("features must be 2-D with one row per label")
    if len(np.unique(labels)) < 2:
        raise ContractError("need at least 2 classes to train")
    hyper = hyper or {}
    cls = {
        "logistic_regression": LogisticRegression,
        "decision_tree": DecisionTree,
        "random_forest": RandomForest,
        "k_nearest": KNearest,
        "naive_bayes": NaiveBayes,
    }.get(kind)
    if cls is None:
        raise ContractError(f"unknown classifier kind {kind!r}")
    model = cls(seed=seed, **hyper)
    model.fit(features, labels)
    return model


def predict_topk(model, features: np.ndarray, k: int) -> np.ndarray:
    """Classes ranked by predicted probability; ties break by class id.

    Returns an (n, k) array of class labels, best first.
    """
    proba = model.predict_proba(np.asarray(features, dtype=np.float64))
    n_classes = proba.shape[1]
    if k > n_classes:
        raise ContractError(f"k={k} exceeds {n_classes} classes")
    # lexsort on (class id asc) then (probability desc) gives the ranking
    order = np.lexsort((np.tile(np.arange(n_classes), (len(proba), 1)), -proba), axis=1)
    return model.classes_[order[:, :k]]


class _BaseClassifier:
    classes_: np.ndarray

    def predict(self, features):
        return self.classes_[self.predict_proba(features).argmax(axis=1)]

    def _encode(self, labels):
        self.classes_, encoded = np.unique(labels, return_inverse=True)
        return encoded


@dataclass
class LogisticRegression(_BaseClassifier):
    """Multinomial softmax regression trained by full-batch gradient descent."""

    lr: float = 0.5
    n_iter: int = 300
    l2: float = 1e-4
    seed: int = 0

    def fit(self, x, y):
        y = self._encode(y)
        self._mu = x.mean(axis=0)
        self._sd = x.std(axis=0)
        self._sd[self._sd == 0] = 1.0
        z = (x - self._mu) / self._sd
        n, d = z.shape
        c = len(self.classes_)
        self.weights = np.zeros((d, c))
        self.bias = np.zeros(c)
        onehot = np.eye(c)[y]
        for _ in range(self.n_iter):
            p = _softmax(z @ self.weights + self.bias)
            grad_w = z.T @ (p - onehot) / n + self.l2 * self.weights
            grad_b = (p - onehot).mean(axis=0)
            self.weights -= self.lr * grad_w
            self.bias -= self.lr * grad_b
        return self

    def predict_proba(self, x):
        z = (x - self._mu) / self._sd
        return _softmax(z @ self.weights + self.bias)


@dataclass
class DecisionTree(_BaseClassifier):
    """CART with gini impurity and midpoint thresholds.

    Ties on (impurity, feature, threshold) resolve to the first candidate
    in feature order, so fits are deterministic.
    """

    max_depth: int = 12
    min_samples_split: int = 2
    max_features: int | None = None  # per-split feature subsample (forest use)
    seed: int = 0

    def fit(self, x, y):
        y = self._encode(y)
        self._n_classes = len(self.classes_)
        self._rng = np.random.default_rng(np.uint64(self.seed))
        self._root = self._grow(x, y, depth=0)
        del self._rng
        return self

    def predict_proba(self, x):
        return np.vstack([self._walk(row) for row in x])

    def _walk(self, row):
        node = self._root
        while node["feature"] is not None:
            node = node["left"] if row[node["feature"]] < node["threshold"] else node["right"]
        return node["proba"]

    def _grow(self, x, y, depth):
        counts = np.bincount(y, minlength=self._n_classes)
        proba = counts / counts.sum()
        leaf = {"feature": None, "threshold": None, "proba": proba}
        if (
            depth >= self.max_depth
            or len(y) < self.min_samples_split
            or counts.max() == len(y)
        ):
            return leaf
        feat, thr, gain = best_gini_split(x, y, self._n_classes, self._candidate_features(x.shape[1]))
        if feat is None or gain <= 0:
            return leaf
        mask = x[:, feat] < thr
        if not mask.any() or mask.all():
            # midpoint rounding can land on an endpoint and empty one side
            return leaf
        return {
            "feature": feat,
            "threshold": thr,
            "proba": proba,
            "left": self._grow(x[mask], y[mask], depth + 1),
            "right": self._grow(x[~mask], y[~mask], depth + 1),
        }

    def _candidate_features(self, d):
        if self.max_features is None or self.max_features >= d:
            return np.arange(d)
        return np.sort(self._rng.choice(d, size=self.max_features, replace=False))


def best_gini_split(x, y, n_classes, features):
    """Exhaustive best (feature, midpoint threshold) by weighted gini."""
    best = (None, None, 0.0)
    parent = _gini(np.bincount(y, minlength=n_classes))
    n = len(y)
    best_score = np.inf
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs, ys = x[order, f], y[order]
        left = np.zeros(n_classes)
        right = np.bincount(ys, minlength=n_classes).astype(np.float64)
        for i in range(n - 1):
            left[ys[i]] += 1
            right[ys[i]] -= 1
            if xs[i + 1] == xs[i]:
                continue
            score = ((i + 1) * _gini(left) + (n - i - 1) * _gini(right)) / n
            if score < best_score - 1e-15:
                best_score = score
                best = (int(f), float((xs[i] + xs[i + 1]) / 2.0), parent - score)
    return best


def _gini(counts):
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return 1.0 - float(np.sum(p * p))


@dataclass
class RandomForest(_BaseClassifier):
    """Seeded bootstrap ensemble of CART trees with sqrt feature subsampling."""

    n_trees: int = 50
    max_depth: int = 12
    seed: int = 0

    def fit(self, x, y):
        encoded = self._encode(y)
        n, d = x.shape
        rng = np.random.default_rng(np.uint64(self.seed))
        max_features = max(1, int(np.sqrt(d)))
        self.trees = []
        for t in range(self.n_trees):
            idx = rng.integers(0, n, size=n)
            tree = DecisionTree(
                max_depth=self.max_depth,
                max_features=max_features,
                seed=int(rng.integers(2**63)),
            )
            tree.fit(x[idx], self.classes_[encoded[idx]])
            self.trees.append(tree)
        return self

    def predict_proba(self, x):
        n_classes = len(self.classes_)
        total = np.zeros((len(x), n_classes))
        for tree in self.trees:
            cols = np.searchsorted(self.classes_, tree.classes_)
            total[:, cols] += tree.predict_proba(x)
        return total / total.sum(axis=1, keepdims=True)


@dataclass
class KNearest(_BaseClassifier):
    """Brute-force k-NN with neighbor-vote probabilities."""

    k: int = 5
    seed: int = 0

    def fit(self, x, y):
        self._y = self._encode(y)
        self._x = x.copy()
        return self

    def predict_proba(self, x):
        k = min(self.k, len(self._x))
        d = ((x[:, None, :] - self._x[None, :, :]) ** 2).sum(axis=2)
        # stable ordering so equidistant neighbors resolve by train index
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        votes = self._y[nearest]
        proba = np.zeros((len(x), len(self.classes_)))
        for i in range(len(x)):
            proba[i] = np.bincount(votes[i], minlength=len(self.classes_))
        return proba / k


@dataclass
class NaiveBayes(_BaseClassifier):
    """Gaussian naive Bayes with variance smoothing."""

    var_smoothing: float = 1e-9
    seed: int = 0

    def fit(self, x, y):
        y = self._encode(y)
        c = len(self.classes_)
        self.theta = np.zeros((c, x.shape[1]))
        self.var = np.zeros((c, x.shape[1]))
        self.prior = np.zeros(c)
        for j in range(c):
            rows = x[y == j]
            self.theta[j] = rows.mean(axis=0)
            self.var[j] = rows.var(axis=0)
            self.prior[j] = len(rows) / len(x)
        self.var += self.var_smoothing * max(self.var.max(), 1e-12)
        return self

    def predict_proba(self, x):
        log_like = -0.5 * (
            np.log(2 * np.pi * self.var).sum(axis=1)
            + (((x[:, None, :] - self.theta[None]) ** 2) / self.var[None]).sum(axis=2)
        )
        log_post = log_like + np.log(self.prior)
        return _softmax(log_post)


def _softmax(scores):
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
