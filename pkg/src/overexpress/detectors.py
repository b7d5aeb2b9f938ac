"""kNN density scoring and linear probing, as scikit-learn estimators.

Both detectors return anomaly scores where higher means more anomalous
(``anomaly_score`` for kNN, ``decision_function`` logits for the probe), so
their outputs can go straight into :func:`overexpress.evaluation.roc_auc`.
Feature scaling is not done here; see :class:`Standardizer`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .stats_core import RandomStream

__all__ = [
    "Aggregation",
    "KnnConfig",
    "ProbeConfig",
    "KNNDetector",
    "LinearProbe",
    "Standardizer",
    "bce_loss_and_grad",
    "knn_fit",
    "knn_score",
    "probe_train",
    "probe_score",
]

_QUERY_CHUNK_ELEMENTS = 1 << 24


class Aggregation(str, Enum):
    MEAN_OF_K = "mean_of_k"
    KTH_DISTANCE = "kth_distance"


@dataclass(frozen=True)
class KnnConfig:
    k: int = 10
    aggregation: Aggregation | str = Aggregation.MEAN_OF_K

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))


@dataclass(frozen=True)
class ProbeConfig:
    """SGD settings for the linear probe.

    ``batch_size=None`` means full-batch gradient descent.
    """

    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int | None = None

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")


def _check_features(X, n_features):
    X = check_array(X)
    if X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


class KNNDetector(BaseEstimator):
    """Exact brute-force kNN anomaly scorer.

    The anomaly score of a query is the mean Euclidean distance to its ``k``
    nearest training rows (``aggregation="mean_of_k"``) or the distance to the
    k-th nearest one (``"kth_distance"``). Training rows are all candidate
    neighbours, so a query equal to a training row has that zero distance
    among its neighbours.

    Parameters
    ----------
    k : int, default=10
    aggregation : {"mean_of_k", "kth_distance"}, default="mean_of_k"

    Attributes
    ----------
    X_train_ : ndarray of shape (n_samples, n_features)
        Copy of the training rows (read-only).
    """

    def __init__(self, k=10, aggregation="mean_of_k"):
        self.k = k
        self.aggregation = aggregation

    def fit(self, X, y=None):
        cfg = KnnConfig(self.k, self.aggregation)
        X = check_array(X, copy=True)
        if cfg.k > X.shape[0]:
            raise ValueError(f"k={cfg.k} exceeds the number of training rows ({X.shape[0]})")
        X.setflags(write=False)
        self.X_train_ = X
        self.n_features_in_ = X.shape[1]
        self._sq_norms = np.einsum("ij,ij->i", X, X)
        return self

    def kneighbors_distances(self, X):
        """Sorted distances from each query to its ``k`` nearest training rows."""
        check_is_fitted(self)
        X = _check_features(X, self.n_features_in_)
        k = int(self.k)
        train = self.X_train_
        n_train = train.shape[0]
        step = max(1, _QUERY_CHUNK_ELEMENTS // max(1, n_train))
        out = np.empty((X.shape[0], k))
        for start in range(0, X.shape[0], step):
            q = X[start:start + step]
            # Gram-matrix distances pick the candidates; exact differences give the values
            d2 = (np.einsum("ij,ij->i", q, q)[:, None] + self._sq_norms[None, :]) - 2.0 * q @ train.T
            if k < n_train:
                idx = np.argpartition(d2, k - 1, axis=1)[:, :k]
            else:
                idx = np.broadcast_to(np.arange(n_train), (q.shape[0], n_train))
            diff = q[:, None, :] - train[idx]
            out[start:start + step] = np.sort(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)), axis=1)
        return out

    def anomaly_score(self, X):
        return _aggregate(self.kneighbors_distances(X), self.aggregation)

    def score_samples(self, X):
        """Negated anomaly score (scikit-learn convention: higher is more normal)."""
        return -self.anomaly_score(X)


def _aggregate(dist, aggregation):
    if Aggregation(aggregation) is Aggregation.KTH_DISTANCE:
        return dist[:, -1].copy()
    return dist.mean(axis=1)


def bce_loss_and_grad(w, b, X, y):
    """Mean binary cross-entropy of ``sigmoid(X @ w + b)`` and its gradient.

    Returns ``(loss, grad_w, grad_b)``.
    """
    z = X @ w + b
    loss = -np.mean(y * log_expit(z) + (1.0 - y) * log_expit(-z))
    r = (expit(z) - y) / X.shape[0]
    return float(loss), X.T @ r, float(r.sum())


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Logistic-regression probe trained by SGD with momentum.

    Weights start at zero. Each step applies ``v <- momentum * v - lr * grad``
    then ``theta <- theta + v``; one epoch is one pass over the data (a single
    step in full-batch mode). Minibatch order is drawn from ``random_state``.

    Parameters
    ----------
    epochs : int, default=100
    learning_rate : float, default=0.01
    momentum : float, default=0.9
    batch_size : int or None, default=None
        ``None`` trains full batch.
    random_state : int, RandomStream or None, default=None
        Only consulted for minibatch shuffling.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    intercept_ : float
    loss_curve_ : list of float
        Training loss after each epoch.
    """

    def __init__(self, epochs=100, learning_rate=0.01, momentum=0.9, batch_size=None, random_state=None):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        cfg = ProbeConfig(self.epochs, self.learning_rate, self.momentum, self.batch_size)
        X, y = check_X_y(X, y)
        y = np.asarray(y)
        classes = np.unique(y)
        if classes.size != 2 or not np.isin(classes, (0, 1)).all():
            raise ValueError("probe training needs binary labels with both 0 and 1 present")
        y = y.astype(float)
        n, d = X.shape
        w, b = np.zeros(d), 0.0
        vw, vb = np.zeros(d), 0.0

        batch = n if cfg.batch_size is None else min(cfg.batch_size, n)
        gen = None
        if batch < n:
            stream = self.random_state
            if not isinstance(stream, RandomStream):
                stream = RandomStream(0 if stream is None else int(stream))
            gen = stream.generator()

        losses = []
        for _ in range(cfg.epochs):
            order = np.arange(n) if gen is None else gen.permutation(n)
            for start in range(0, n, batch):
                rows = order[start:start + batch]
                _, gw, gb = bce_loss_and_grad(w, b, X[rows], y[rows])
                vw = cfg.momentum * vw - cfg.learning_rate * gw
                vb = cfg.momentum * vb - cfg.learning_rate * gb
                w = w + vw
                b = b + vb
            losses.append(bce_loss_and_grad(w, b, X, y)[0])
        if not (np.all(np.isfinite(w)) and math.isfinite(b)):
            raise FloatingPointError("probe weights diverged")

        self.coef_ = w
        self.intercept_ = b
        self.loss_curve_ = losses
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = d
        return self

    def decision_function(self, X):
        """Raw logits ``X @ coef_ + intercept_``."""
        check_is_fitted(self)
        X = _check_features(X, self.n_features_in_)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


class Standardizer(TransformerMixin, BaseEstimator):
    """Z-score columns with training statistics; constant columns map to 0."""

    def fit(self, X, y=None):
        X = check_array(X)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = _check_features(X, self.n_features_in_)
        constant = self.scale_ == 0
        out = (X - self.mean_) / np.where(constant, 1.0, self.scale_)
        out[:, constant] = 0.0
        return out


# Functional surface over the estimators.

def knn_fit(train, config: KnnConfig = KnnConfig()) -> KNNDetector:
    return KNNDetector(k=config.k, aggregation=config.aggregation).fit(train)


def knn_score(index: KNNDetector, queries, config: KnnConfig | None = None) -> np.ndarray:
    if config is None:
        return index.anomaly_score(queries)
    if config.k != index.k:
        raise ValueError("config.k differs from the k the index was fitted with")
    return _aggregate(index.kneighbors_distances(queries), config.aggregation)


def probe_train(features, labels, config: ProbeConfig = ProbeConfig(), stream: RandomStream | None = None) -> LinearProbe:
    return LinearProbe(
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        batch_size=config.batch_size,
        random_state=stream,
    ).fit(features, labels)


def probe_score(probe: LinearProbe, queries) -> np.ndarray:
    return probe.decision_function(queries)
