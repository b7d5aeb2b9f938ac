"""Over-expressive representations in anomaly detection: exact toy-model rates,
kNN / linear-probe detectors and the experiment protocols built on them."""

__version__ = "0.1.0"

from .detectors import KNNDetector, KnnConfig, LinearProbe, ProbeConfig, Standardizer
from .evaluation import EvalResult, ScoredSet, mean_over_runs, roc_auc, tpr_at_fpr
from .stats_core import RandomStream, chi2_survival, noncentral_chi2_survival, std_normal_cdf
from .toy_model import (
    LikelihoodThresholdDetector,
    RateMethod,
    ThresholdSpec,
    ToyModelParams,
    decay_curve,
    empirical_rates,
    fit_decay_exponent,
    fpr_clt,
    fpr_exact,
    gap_asymptotic,
    tpr_clt,
    tpr_exact,
)

__all__ = [
    "EvalResult",
    "KNNDetector",
    "KnnConfig",
    "LikelihoodThresholdDetector",
    "LinearProbe",
    "ProbeConfig",
    "RandomStream",
    "RateMethod",
    "ScoredSet",
    "Standardizer",
    "ThresholdSpec",
    "ToyModelParams",
    "chi2_survival",
    "decay_curve",
    "empirical_rates",
    "fit_decay_exponent",
    "fpr_clt",
    "fpr_exact",
    "gap_asymptotic",
    "mean_over_runs",
    "noncentral_chi2_survival",
    "roc_auc",
    "std_normal_cdf",
    "tpr_at_fpr",
    "tpr_clt",
    "tpr_exact",
]
