"""Seeded random streams and the special functions behind the exact rates.

Everything here is scalar and pure. The chi-squared survival functions are
written out rather than delegated so their truncation and error behaviour is
explicit; scipy is used only as a cross-check in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RandomStream",
    "std_normal_cdf",
    "chi2_survival",
    "noncentral_chi2_survival",
    "regularized_gamma_q",
    "sample_std_normal",
]

_UINT64_MAX = 2**64 - 1
_EPS = float(np.finfo(float).eps)
_TINY = float(np.finfo(float).tiny) / _EPS
_MAX_ITER = 100_000
_RTOL = 1e-16


@dataclass(frozen=True)
class RandomStream:
    """Immutable descriptor of a reproducible random substream.

    Generators are built from ``SeedSequence(seed, spawn_key=(stream_id, *path))``
    feeding a counter-based Philox bit generator, so a block of work owns its
    randomness no matter which thread or process evaluates it.

    Parameters
    ----------
    seed : int
        Root seed, an unsigned 64-bit integer.
    stream_id : int
        Substream index; distinct ids give independent sequences.
    path : tuple of int
        Further nesting below ``stream_id`` (see :meth:`child`).
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _UINT64_MAX:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if int(self.stream_id) < 0 or any(int(p) < 0 for p in self.path):
            raise ValueError("stream indices must be non-negative")

    def child(self, index: int) -> RandomStream:
        """Return the independent substream ``index`` below this one."""
        return RandomStream(self.seed, self.stream_id, (*self.path, int(index)))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            int(self.seed), spawn_key=(int(self.stream_id), *map(int, self.path))
        )
        return np.random.Generator(np.random.Philox(ss))


def std_normal_cdf(z: float) -> float:
    """Standard normal CDF, ``0.5 * erfc(-z / sqrt(2))``."""
    z = float(z)
    if not math.isfinite(z):
        raise ValueError(f"std_normal_cdf needs a finite argument, got {z}")
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _log_gamma_prefactor(a: float, x: float) -> float:
    # log(x^a e^{-x} / Gamma(a + 1))
    return a * math.log(x) - x - math.lgamma(a + 1.0)


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0
    total = 1.0
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if term < total * _RTOL:
            return total * math.exp(_log_gamma_prefactor(a, x))
    raise ArithmeticError(f"incomplete gamma series did not converge (a={a}, x={x})")


def _gamma_q_continued_fraction(a: float, x: float) -> float:
    # modified Lentz evaluation of the Legendre continued fraction
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _RTOL:
            return math.exp(a * math.log(x) - x - math.lgamma(a)) * h
    raise ArithmeticError(f"incomplete gamma continued fraction did not converge (a={a}, x={x})")


def regularized_gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise ValueError(f"shape must be positive, got {a}")
    if x < 0:
        raise ValueError(f"argument must be non-negative, got {x}")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _gamma_p_series(a, x)))
    return min(1.0, max(0.0, _gamma_q_continued_fraction(a, x)))


def chi2_survival(dof: int, t: float) -> float:
    """Pr(chi2_dof > t) as Q(dof/2, t/2)."""
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    t = float(t)
    if not t >= 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    if math.isinf(t):
        return 0.0
    return regularized_gamma_q(dof / 2.0, t / 2.0)


def noncentral_chi2_survival(dof: int, lam: float, t: float, tail_tol: float = 1e-12) -> float:
    """Pr(chi2'_dof(lam) > t) via the Poisson(lam/2) mixture of central laws.

    The sum starts at the Poisson mode and walks outward in both directions,
    stepping the central survival with the recurrence
    ``Q(a+1, x) = Q(a, x) + x^a e^{-x} / Gamma(a+1)``. Each direction stops
    once a geometric bound on its untouched Poisson mass drops below
    ``tail_tol / 2``, so the truncation error is at most ``tail_tol``.

    Parameters
    ----------
    dof : int
        Degrees of freedom, at least 1.
    lam : float
        Noncentrality (sum of squared means), non-negative.
    t : float
        Threshold, non-negative.
    tail_tol : float
        Bound on the neglected Poisson mass.

    Returns
    -------
    float
        The survival probability.
    """
    lam = float(lam)
    if not lam >= 0 or math.isinf(lam):
        raise ValueError(f"noncentrality must be finite and non-negative, got {lam}")
    if lam == 0:
        return chi2_survival(dof, t)
    base = chi2_survival(dof, t)  # validates dof and t
    t = float(t)
    if math.isinf(t):
        return 0.0

    # halving a subnormal lam or t can underflow to 0; both limits are exact there
    mu = lam / 2.0
    x = t / 2.0
    if x == 0.0:
        return 1.0
    if mu == 0.0:
        return base
    a0 = dof / 2.0
    j0 = int(math.floor(mu))
    log_mu = math.log(mu)
    half_tol = tail_tol / 2.0

    q_mode = base if j0 == 0 else regularized_gamma_q(a0 + j0, x)
    w_mode = math.exp(-mu + j0 * log_mu - math.lgamma(j0 + 1.0))
    total = w_mode * q_mode

    # downward: Q(a-1, x) = Q(a, x) - x^{a-1} e^{-x} / Gamma(a)
    q, w, j = q_mode, w_mode, j0
    while j > 0:
        ratio = j / mu
        if ratio < 1.0 and w * ratio / (1.0 - ratio) < half_tol:
            break
        q -= math.exp(_log_gamma_prefactor(a0 + j - 1, x))
        w *= ratio
        j -= 1
        total += w * min(1.0, max(0.0, q))

    # upward
    q, w, j = q_mode, w_mode, j0
    while True:
        ratio = mu / (j + 1)
        if ratio < 1.0 and w * ratio / (1.0 - ratio) < half_tol:
            break
        q += math.exp(_log_gamma_prefactor(a0 + j, x))
        w *= ratio
        j += 1
        total += w * min(1.0, max(0.0, q))
        if j - j0 > _MAX_ITER:
            raise ArithmeticError("noncentral series did not converge")

    return min(1.0, max(0.0, total))


def sample_std_normal(stream: RandomStream, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. standard normals from ``stream``."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    return stream.generator().standard_normal(int(n))
