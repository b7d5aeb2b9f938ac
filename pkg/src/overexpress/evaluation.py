"""ROC-AUC and operating-point metrics for anomaly scores (higher = more anomalous)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "UndefinedMetricError",
    "ScoredSet",
    "EvalResult",
    "roc_auc",
    "tpr_at_fpr",
    "evaluate",
    "mean_over_runs",
]


class UndefinedMetricError(ValueError):
    """Raised when a metric needs both classes and one is missing."""


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).ravel()
        self.labels = np.asarray(self.labels).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"{self.scores.size} scores but {self.labels.size} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (normal) or 1 (anomalous)")
        if np.isnan(self.scores).any():
            raise ValueError("scores contain NaN")
        self.labels = self.labels.astype(np.int8)

    @property
    def n_anomalous(self) -> int:
        return int(self.labels.sum())

    @property
    def n_normal(self) -> int:
        return int(self.labels.size - self.labels.sum())

    def _require_both(self):
        if self.n_normal == 0 or self.n_anomalous == 0:
            raise UndefinedMetricError("metric undefined: need both normal and anomalous samples")


@dataclass(frozen=True)
class EvalResult:
    auc: float
    n_normal: int
    n_anomalous: int
    tpr_at_fpr: tuple[tuple[float, float], ...] | None = None
    config_digest: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc must lie in [0, 1], got {self.auc}")
        if self.n_normal < 1 or self.n_anomalous < 1:
            raise ValueError("counts must be positive")


def _as_scored(scores, labels=None) -> ScoredSet:
    return scores if isinstance(scores, ScoredSet) else ScoredSet(scores, labels)


def roc_auc(scores, labels=None) -> float:
    """Mann-Whitney AUC: Pr(anomalous score > normal score), ties counting 1/2.

    Accepts a :class:`ScoredSet` or ``(scores, labels)``. Uses average ranks,
    O(n log n).
    """
    s = _as_scored(scores, labels)
    s._require_both()
    ranks = rankdata(s.scores, method="average")
    n1, n0 = s.n_anomalous, s.n_normal
    u = ranks[s.labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def tpr_at_fpr(scores, labels=None, target_fpr: float = 0.05) -> float:
    """Best TPR reachable with empirical FPR <= ``target_fpr``.

    Rows with score >= threshold are flagged; thresholds range over the
    observed scores plus +inf. No interpolation between operating points.
    """
    s = _as_scored(scores, labels)
    s._require_both()
    if not 0.0 <= target_fpr <= 1.0:
        raise ValueError(f"target_fpr must lie in [0, 1], got {target_fpr}")
    neg = np.sort(s.scores[s.labels == 0])
    pos = np.sort(s.scores[s.labels == 1])
    thresholds = np.unique(s.scores)
    # rows flagged at threshold t: those with score >= t
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    ok = fp / neg.size <= target_fpr
    if not ok.any():
        return 0.0
    return float(tp[ok].max() / pos.size)


def evaluate(scores, labels, target_fprs=(), config_digest: str = "", **extra) -> EvalResult:
    s = ScoredSet(scores, labels)
    pairs = tuple((float(t), tpr_at_fpr(s, target_fpr=t)) for t in target_fprs) or None
    return EvalResult(
        auc=roc_auc(s),
        n_normal=s.n_normal,
        n_anomalous=s.n_anomalous,
        tpr_at_fpr=pairs,
        config_digest=config_digest,
        extra=extra,
    )


def mean_over_runs(results) -> EvalResult:
    """Average AUC over runs; counts are summed and digests joined with '+'."""
    results = list(results)
    if not results:
        raise ValueError("cannot average an empty list of results")
    if len(results) == 1:
        return results[0]
    return EvalResult(
        # fsum is exactly rounded, so the mean does not depend on list order
        auc=math.fsum(r.auc for r in results) / len(results),
        n_normal=sum(r.n_normal for r in results),
        n_anomalous=sum(r.n_anomalous for r in results),
        config_digest="+".join(r.config_digest for r in results),
    )
