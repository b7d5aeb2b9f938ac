"""Gaussian toy model: normal data N(0, I_d), anomalies shifted by delta along e_1.

A sample is flagged anomalous when its likelihood under N(0, I_d) falls below
``t_d(y) = exp(-(y*sqrt(2d) + d)/2) / sqrt(2 pi)^d``. Likelihoods underflow for
d of a few hundred, so every score and threshold here lives in log space; the
induced classifier is exactly ``||x||^2 > y*sqrt(2d) + d``.

Rates come in four flavours:

* ``exact``: central / noncentral chi-squared survival functions.
* ``clt``: the normal approximations N(d, 2d) and N(d + delta^2, 4 delta^2 + 2d).
* ``monte_carlo``: sampling and counting.
* ``asymptotic_bound``: the leading-order gap ``delta^2 exp(-y^2/2) / sqrt(4 pi d)``.

Note the anomalous squared norm has mean ``d + delta^2`` (noncentral
chi-squared moments); that is the value used throughout.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .stats_core import (
    RandomStream,
    chi2_survival,
    noncentral_chi2_survival,
    std_normal_cdf,
)

__all__ = [
    "ToyModelParams",
    "ThresholdSpec",
    "SampleSet",
    "RateMethod",
    "RatePoint",
    "RateCurve",
    "UndefinedRateError",
    "InsufficientDataError",
    "SmallDimensionWarning",
    "LikelihoodThresholdDetector",
    "sample_population",
    "log_likelihood_score",
    "log_threshold",
    "squared_norm_threshold",
    "fpr_exact",
    "fpr_clt",
    "tpr_exact",
    "tpr_clt",
    "gap_asymptotic",
    "empirical_rates",
    "decay_curve",
    "fit_decay_exponent",
]

_LOG_2PI = math.log(2.0 * math.pi)
_MIN_CLT_DIM = 8
_MIN_MC_SAMPLES = 1000
_BLOCK_ELEMENTS = 1 << 22


class UndefinedRateError(ValueError):
    """A label class needed for a conditional rate is missing from the sample."""


class InsufficientDataError(ValueError):
    pass


class SmallDimensionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ToyModelParams:
    """Population ``(1 - pi) N(0, I_d) + pi N(delta e_1, I_d)``."""

    d: int
    delta: float
    pi: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not (self.delta >= 0 and math.isfinite(self.delta)):
            raise ValueError(f"delta must be finite and non-negative, got {self.delta}")
        if not 0 < self.pi < 1:
            raise ValueError(f"pi must lie in (0, 1), got {self.pi}")

    @property
    def stream(self) -> RandomStream:
        return RandomStream(self.seed)


@dataclass(frozen=True)
class ThresholdSpec:
    y: float

    def __post_init__(self):
        if not math.isfinite(self.y):
            raise ValueError(f"y must be finite, got {self.y}")


@dataclass
class SampleSet:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, d) with one label per row")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (normal) or 1 (anomalous)")


class RateMethod(str, Enum):
    EXACT = "exact"
    CLT = "clt"
    MONTE_CARLO = "monte_carlo"
    ASYMPTOTIC_BOUND = "asymptotic_bound"


@dataclass(frozen=True)
class RatePoint:
    """One (d, y, delta) operating point.

    For ``asymptotic_bound`` only the gap is a bound; ``fpr`` is the
    dimension-free limit and ``tpr`` is left as ``None``.
    """

    d: int
    y: float
    delta: float
    fpr: float
    tpr: float | None
    gap: float
    method: RateMethod
    fpr_se: float | None = None
    tpr_se: float | None = None
    n_normal: int | None = None
    n_anomalous: int | None = None
    flags: tuple[str, ...] = ()

    def to_record(self) -> dict:
        rec = {
            "d": self.d,
            "y": self.y,
            "delta": self.delta,
            "fpr": self.fpr,
            "tpr": self.tpr,
            "gap": self.gap,
            "method": RateMethod(self.method).value,
        }
        if self.method is RateMethod.MONTE_CARLO:
            rec.update(
                fpr_se=self.fpr_se,
                tpr_se=self.tpr_se,
                n_normal=self.n_normal,
                n_anomalous=self.n_anomalous,
            )
        rec["flags"] = ";".join(self.flags)
        return rec


@dataclass(frozen=True)
class RateCurve:
    points: tuple[RatePoint, ...] = field(default_factory=tuple)

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)

    @property
    def dims(self) -> np.ndarray:
        return np.array([p.d for p in self.points], dtype=float)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([p.gap for p in self.points], dtype=float)


def _check_dim(d):
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d}")
    return int(d)


def log_likelihood_score(x) -> float | np.ndarray:
    """Log density of N(0, I_d) at ``x``; rows of a 2-D input are scored separately."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    sq = np.einsum("...i,...i->...", x, x)
    out = -0.5 * sq - 0.5 * d * _LOG_2PI
    return float(out) if np.ndim(out) == 0 else out


def squared_norm_threshold(d: int, spec: ThresholdSpec) -> float:
    """``y*sqrt(2d) + d``: the squared-norm cut equivalent to ``t_d(y)``."""
    d = _check_dim(d)
    return spec.y * math.sqrt(2.0 * d) + d


def log_threshold(d: int, spec: ThresholdSpec) -> float:
    d = _check_dim(d)
    return -0.5 * squared_norm_threshold(d, spec) - 0.5 * d * _LOG_2PI


def fpr_exact(d: int, spec: ThresholdSpec) -> float:
    t = squared_norm_threshold(d, spec)
    if t <= 0:
        return 1.0
    return chi2_survival(d, t)


def fpr_clt(spec: ThresholdSpec) -> float:
    return 1.0 - std_normal_cdf(spec.y)


def tpr_exact(d: int, spec: ThresholdSpec, delta: float) -> float:
    if not delta >= 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    t = squared_norm_threshold(d, spec)
    if t <= 0:
        return 1.0
    return noncentral_chi2_survival(d, delta * delta, t)


def tpr_clt(d: int, spec: ThresholdSpec, delta: float) -> float:
    """Normal approximation of the TPR with anomalous ``||x||^2 ~ N(d + delta^2, 4 delta^2 + 2d)``.

    Emits :class:`SmallDimensionWarning` below d = 8, where the approximation
    is not meaningful.
    """
    d = _check_dim(d)
    if not delta >= 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    if d < _MIN_CLT_DIM:
        warnings.warn(f"CLT rates are unreliable for d={d} < {_MIN_CLT_DIM}", SmallDimensionWarning)
    d2 = delta * delta
    z = (spec.y * math.sqrt(2.0 * d) - d2) / math.sqrt(4.0 * d2 + 2.0 * d)
    return 1.0 - std_normal_cdf(z)


def gap_asymptotic(d: int, spec: ThresholdSpec, delta: float) -> float:
    """Leading-order bound on TPR - FPR: ``delta^2 exp(-y^2/2) / sqrt(4 pi d)``."""
    d = _check_dim(d)
    return delta * delta * math.exp(-0.5 * spec.y * spec.y) / math.sqrt(4.0 * math.pi * d)


def _block_layout(n: int, d: int) -> list[int]:
    rows = max(1, _BLOCK_ELEMENTS // d)
    sizes = [rows] * (n // rows)
    if n % rows:
        sizes.append(n % rows)
    return sizes


def _sample_block(params: ToyModelParams, rows: int, stream: RandomStream):
    gen = stream.generator()
    labels = (gen.random(rows) < params.pi).astype(np.int8)
    x = gen.standard_normal((rows, params.d))
    x[:, 0] += params.delta * labels
    return x, labels


def sample_population(params: ToyModelParams, n: int, stream: RandomStream | None = None) -> SampleSet:
    """Draw ``n`` labelled rows from the toy population.

    Rows are produced in fixed-size blocks, block ``b`` from ``stream.child(b)``,
    so the output depends only on ``(params, n, stream)``.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    stream = params.stream if stream is None else stream
    blocks = [_sample_block(params, rows, stream.child(b)) for b, rows in enumerate(_block_layout(n, params.d))]
    return SampleSet(np.concatenate([b[0] for b in blocks]), np.concatenate([b[1] for b in blocks]))


def _count_block(params, log_t, rows, stream):
    x, labels = _sample_block(params, rows, stream)
    flagged = log_likelihood_score(x) < log_t
    anom = labels == 1
    return (
        int(np.count_nonzero(~anom)),
        int(np.count_nonzero(flagged & ~anom)),
        int(np.count_nonzero(anom)),
        int(np.count_nonzero(flagged & anom)),
    )


def empirical_rates(
    params: ToyModelParams,
    spec: ThresholdSpec,
    n: int,
    stream: RandomStream | None = None,
    n_jobs: int = 1,
) -> RatePoint:
    """Monte Carlo FPR/TPR of the likelihood-threshold classifier.

    Samples are the ones :func:`sample_population` would return for the same
    arguments, counted block by block; ``n_jobs`` only changes how blocks are
    scheduled, never the result.

    Raises
    ------
    UndefinedRateError
        If the sample holds no normal or no anomalous rows.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    stream = params.stream if stream is None else stream
    flags = ()
    if n < _MIN_MC_SAMPLES:
        warnings.warn(f"n={n} < {_MIN_MC_SAMPLES}: rates have little statistical power")
        flags = ("low_power",)
    log_t = log_threshold(params.d, spec)
    tasks = [(params, log_t, rows, stream.child(b)) for b, rows in enumerate(_block_layout(n, params.d))]
    if n_jobs == 1 or len(tasks) == 1:
        counts = [_count_block(*t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            counts = list(pool.map(lambda t: _count_block(*t), tasks))
    n0, fp, n1, tp = (sum(c[i] for c in counts) for i in range(4))
    if n0 == 0:
        raise UndefinedRateError("no normal rows sampled; FPR is undefined")
    if n1 == 0:
        raise UndefinedRateError("no anomalous rows sampled; TPR is undefined")
    fpr, tpr = fp / n0, tp / n1
    return RatePoint(
        d=params.d,
        y=spec.y,
        delta=params.delta,
        fpr=fpr,
        tpr=tpr,
        gap=tpr - fpr,
        method=RateMethod.MONTE_CARLO,
        fpr_se=math.sqrt(fpr * (1 - fpr) / n0),
        tpr_se=math.sqrt(tpr * (1 - tpr) / n1),
        n_normal=n0,
        n_anomalous=n1,
        flags=flags,
    )


def _rate_point(d, spec, delta, method, n, stream) -> RatePoint:
    if method is RateMethod.EXACT:
        fpr, tpr = fpr_exact(d, spec), tpr_exact(d, spec, delta)
        return RatePoint(d, spec.y, delta, fpr, tpr, tpr - fpr, method)
    if method is RateMethod.CLT:
        flags = ("small_d",) if d < _MIN_CLT_DIM else ()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SmallDimensionWarning)
            fpr, tpr = fpr_clt(spec), tpr_clt(d, spec, delta)
        return RatePoint(d, spec.y, delta, fpr, tpr, tpr - fpr, method, flags=flags)
    if method is RateMethod.ASYMPTOTIC_BOUND:
        return RatePoint(d, spec.y, delta, fpr_clt(spec), None, gap_asymptotic(d, spec, delta), method)
    return empirical_rates(ToyModelParams(d, delta), spec, n, stream.child(d))


def decay_curve(
    dims,
    spec: ThresholdSpec,
    delta: float,
    method: RateMethod | str = RateMethod.EXACT,
    n: int = 100_000,
    stream: RandomStream | None = None,
) -> RateCurve:
    """One :class:`RatePoint` per dimension in ``dims`` (strictly increasing).

    ``n`` and ``stream`` are used by the ``monte_carlo`` method only; dimension
    ``d`` draws from ``stream.child(d)``.
    """
    dims = [_check_dim(d) for d in dims]
    if not dims:
        raise ValueError("dims must be nonempty")
    if any(b <= a for a, b in zip(dims, dims[1:])):
        raise ValueError("dims must be strictly increasing")
    method = RateMethod(method)
    stream = RandomStream(0) if stream is None else stream
    return RateCurve(tuple(_rate_point(d, spec, delta, method, n, stream) for d in dims))


def fit_decay_exponent(curve) -> float:
    """Least-squares slope of log(gap) against log(d).

    Points with a non-positive gap are dropped. Accepts a :class:`RateCurve`
    or an iterable of ``(d, gap)`` pairs.
    """
    if isinstance(curve, RateCurve):
        dims, gaps = curve.dims, curve.gaps
    else:
        pairs = np.asarray(list(curve), dtype=float).reshape(-1, 2)
        dims, gaps = pairs[:, 0], pairs[:, 1]
    keep = gaps > 0
    if keep.sum() < 3:
        raise InsufficientDataError(f"need at least 3 positive gaps, got {int(keep.sum())}")
    slope, _ = np.polyfit(np.log(dims[keep]), np.log(gaps[keep]), 1)
    return float(slope)


class LikelihoodThresholdDetector(OutlierMixin, BaseEstimator):
    """Likelihood-threshold detector for standardized data.

    Scores rows by their log density under N(0, I_d) and flags a row when the
    score drops below ``log t_d(y)``. There is nothing to learn; ``fit`` only
    records the dimension.

    Parameters
    ----------
    y : float, default=1.0
        Sensitivity; the asymptotic false positive rate is ``1 - Phi(y)``.

    Notes
    -----
    Follows scikit-learn's outlier conventions: ``score_samples`` is higher
    for more normal rows, ``decision_function`` is negative for outliers and
    ``predict`` returns -1 for outliers, +1 for inliers.
    """

    def __init__(self, y=1.0):
        self.y = y

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.offset_ = log_threshold(self.n_features_in_, ThresholdSpec(self.y))
        return self

    def _validated(self, X):
        check_is_fitted(self)
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def score_samples(self, X):
        return np.atleast_1d(log_likelihood_score(self._validated(X)))

    def decision_function(self, X):
        return self.score_samples(X) - self.offset_

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)
