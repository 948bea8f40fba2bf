"""Numerical verification of the modulation theory: vectorized correlation,
closed-form and Monte-Carlo decorrelation checks for frequency-separated sine
maps, effective-rank reports, and gradient-conflict statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, RandomStream, as_tensor, singular_values


class UndefinedCorrelationError(ContractViolation):
    """Correlation requested against a zero matrix."""


def vec_correlation(ms: np.ndarray, mt: np.ndarray) -> float:
    """Cosine similarity of the vectorized matrices, in [-1, 1].

    Symmetric in its arguments and invariant under positive scaling of
    either; undefined (raises) if either matrix is zero.
    """
    ms, mt = as_tensor(ms), as_tensor(mt)
    if ms.shape != mt.shape:
        raise ContractViolation(f"shape mismatch: {ms.shape} vs {mt.shape}")
    vs, vt = ms.ravel(), mt.ravel()
    ns, nt = float(np.linalg.norm(vs)), float(np.linalg.norm(vt))
    if ns == 0.0 or nt == 0.0:
        raise UndefinedCorrelationError("undefined correlation: zero matrix")
    return float(np.clip(float(vs @ vt) / (ns * nt), -1.0, 1.0))


def gaussian_corr_oracle(omega_s: float, omega_t: float, sigma: float) -> float:
    """Closed-form correlation of sin(omega_s X) and sin(omega_t X) for
    X ~ N(0, sigma^2).

    Uses the product-to-sum identity sin(aX)sin(bX) = (cos((a-b)X) -
    cos((a+b)X))/2 together with the Gaussian characteristic function
    E[cos(kX)] = exp(-k^2 sigma^2 / 2):

        E[Ys Yt]  = (exp(-(ws-wt)^2 s^2/2) - exp(-(ws+wt)^2 s^2/2)) / 2
        E[Yt^2]   = (1 - exp(-2 wt^2 s^2)) / 2

    The result decays to zero as min(|ws-wt|, |ws+wt|) * sigma grows, which
    is the decorrelation guarantee for distinct frequencies.
    """
    if sigma <= 0:
        raise ContractViolation(f"sigma must be > 0, got {sigma}")
    if omega_s == 0.0 or omega_t == 0.0:
        raise ContractViolation("degenerate zero-variance: sin(0*X) is identically zero")
    if abs(omega_s) == abs(omega_t):
        # sin is odd, so equal |omega| means identical transforms up to sign.
        return math.copysign(1.0, omega_s * omega_t)
    s2 = sigma * sigma
    num = 0.5 * (math.exp(-((omega_s - omega_t) ** 2) * s2 / 2.0)
                 - math.exp(-((omega_s + omega_t) ** 2) * s2 / 2.0))
    es = 0.5 * (1.0 - math.exp(-2.0 * omega_s * omega_s * s2))
    et = 0.5 * (1.0 - math.exp(-2.0 * omega_t * omega_t * s2))
    return num / math.sqrt(es * et)


@dataclass(frozen=True)
class CorrelationEstimate:
    """Monte-Carlo correlation with an analytic (delta-method) standard error."""

    mean: float
    stderr: float
    n_samples: int


def monte_carlo_corr(omega_s: float, omega_t: float, sigma: float, n: int,
                     stream: RandomStream) -> CorrelationEstimate:
    """Estimate corr(sin(omega_s X), sin(omega_t X)) from n Gaussian draws.

    The standard error comes from the delta method applied to the three
    sample moments (mean of Ys*Yt, Ys^2, Yt^2) that form the correlation.
    Equal frequencies are an identical transform, so the correlation is one
    with zero uncertainty for any sample.
    """
    if n < 1000:
        raise ContractViolation(f"need n >= 1000 samples, got {n}")
    if sigma <= 0:
        raise ContractViolation(f"sigma must be > 0, got {sigma}")
    if omega_s == omega_t:
        return CorrelationEstimate(1.0, 0.0, n)
    x = stream.normal(n, sigma)
    ys, yt = np.sin(omega_s * x), np.sin(omega_t * x)
    return _corr_with_stderr(ys, yt, n)


def _corr_with_stderr(ys: np.ndarray, yt: np.ndarray, n: int) -> CorrelationEstimate:
    p, a, b = ys * yt, ys * ys, yt * yt
    mp, ma, mb = float(p.mean()), float(a.mean()), float(b.mean())
    corr = min(1.0, max(-1.0, mp / math.sqrt(ma * mb)))
    # Delta method: gradient of f(mp, ma, mb) = mp / sqrt(ma*mb).
    g = np.array([1.0 / math.sqrt(ma * mb), -corr / (2.0 * ma), -corr / (2.0 * mb)])
    cov = np.cov(np.stack([p, a, b]), ddof=0)
    var = float(g @ cov @ g) / n
    return CorrelationEstimate(corr, math.sqrt(max(var, 0.0)), n)


def bootstrap_corr_stderr(ys: np.ndarray, yt: np.ndarray, n_resamples: int,
                          stream: RandomStream) -> float:
    """Resampling cross-check for the delta-method standard error."""
    n = ys.shape[0]
    estimates = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = stream.integers(0, n, n)
        rs, rt = ys[idx], yt[idx]
        estimates[i] = float(np.sum(rs * rt)) / math.sqrt(
            float(np.sum(rs * rs)) * float(np.sum(rt * rt)))
    return float(estimates.std(ddof=1))


@dataclass(frozen=True)
class RankReport:
    """Singular-value summary of a matrix.

    eps_rank counts singular values above epsilon * sigma_max; stable_rank is
    the threshold-free companion ||M||_F^2 / sigma_max^2.
    """

    singular_values: np.ndarray
    eps_rank: int
    stable_rank: float
    epsilon: float


def rank_report(m: np.ndarray, epsilon: float = 1e-6) -> RankReport:
    """Effective-rank report for a nonzero 2-D matrix."""
    sv = singular_values(m)
    smax = float(sv[0])
    if smax == 0.0:
        raise ContractViolation("rank report undefined for the zero matrix")
    eps_rank = int(np.count_nonzero(sv > epsilon * smax))
    stable = float(np.sum(sv * sv)) / (smax * smax)
    return RankReport(sv, eps_rank, stable, epsilon)


def grad_cosine(gi: np.ndarray, gj: np.ndarray) -> float:
    """Cosine similarity of two flattened gradients.

    A zero gradient makes the similarity undefined; it is recorded as the
    NaN sentinel and excluded from epoch averages downstream.
    """
    gi, gj = as_tensor(gi).ravel(), as_tensor(gj).ravel()
    if gi.shape != gj.shape:
        raise ContractViolation(f"gradient length mismatch: {gi.shape} vs {gj.shape}")
    ni, nj = float(np.linalg.norm(gi)), float(np.linalg.norm(gj))
    if ni == 0.0 or nj == 0.0:
        return float("nan")
    return float(np.clip(float(gi @ gj) / (ni * nj), -1.0, 1.0))


@dataclass(frozen=True)
class GradSimMatrix:
    """Epoch-averaged pairwise gradient cosine similarities.

    ``mean`` and ``var`` are entrywise statistics over the epoch's per
    iteration T x T similarity samples (NaN sentinels excluded); ``n`` is
    the number of samples aggregated.
    """

    mean: np.ndarray
    var: np.ndarray
    epoch: int
    n: int


def epoch_grad_sim(samples: list[np.ndarray], epoch: int = 0) -> GradSimMatrix:
    """Entrywise mean and (population) variance over per-iteration similarity
    matrices; the variance accompanies the mean to support stability claims."""
    if len(samples) == 0:
        raise ContractViolation("epoch_grad_sim requires at least one sample")
    stack = np.stack([as_tensor(s) for s in samples])
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(stack, axis=0)
        var = np.nanvar(stack, axis=0)
    return GradSimMatrix(mean, var, epoch, len(samples))
