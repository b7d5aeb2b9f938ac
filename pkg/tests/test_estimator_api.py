import numpy as np
import pytest
from sklearn.base import clone
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline

from overexpress import KNNDetector, LikelihoodThresholdDetector, LinearProbe, Standardizer


ESTIMATORS = [
    KNNDetector(k=3, aggregation="kth_distance"),
    LinearProbe(epochs=7, learning_rate=0.05, batch_size=8, random_state=2),
    Standardizer(),
    LikelihoodThresholdDetector(y=0.5),
]


@pytest.mark.parametrize("est", ESTIMATORS, ids=lambda e: type(e).__name__)
def test_clone_keeps_params(est):
    twin = clone(est)
    assert twin is not est
    assert twin.get_params() == est.get_params()


def test_set_params_round_trip():
    det = KNNDetector().set_params(k=4)
    assert det.get_params()["k"] == 4


def test_pipeline_with_cross_validation():
    gen = np.random.default_rng(0)
    X = gen.normal(size=(300, 4)) * [1, 10, 100, 0.1]
    y = (X[:, 0] > 0).astype(int)
    pipe = make_pipeline(Standardizer(), LinearProbe())
    scores = cross_val_score(pipe, X, y, cv=3, scoring="roc_auc")
    assert scores.min() > 0.95


def test_unfitted_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        KNNDetector().anomaly_score(np.zeros((1, 2)))
    with pytest.raises(NotFittedError):
        LinearProbe().decision_function(np.zeros((1, 2)))


def test_probe_predict_proba_rows_sum_to_one():
    X = np.random.default_rng(1).normal(size=(50, 2))
    p = LinearProbe(epochs=10).fit(X, (X[:, 1] > 0).astype(int)).predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
