"""Stick-breaking logistic map from latent continuous responses to ordinal categories.

With cut-points c_1 < ... < c_{K-1} and eta_k = c_k - v,

    P(r = k | v) = prod_{k' < k} (1 - sigmoid(eta_k')) * sigmoid(eta_k),

and sigmoid(eta_K) fixed to 1. Everything is computed in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


def check_cutpoints(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1:
        raise ValueError("cut-points must be a vector")
    if c.size > 1 and np.any(np.diff(c) <= 0):
        raise ValueError(f"cut-points must be strictly increasing: {c}")
    return c


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def log_category_probabilities(v, c) -> np.ndarray:
    """log P(r = k | v) for k = 1..K, on a trailing axis of length K = len(c) + 1."""
    c = np.asarray(c, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)[..., None]
    eta = c - v
    log_break = log_sigmoid(eta)
    log_stay = log_sigmoid(-eta)
    # stick remaining before break k: sum of log_stay over k' < k
    remaining = np.concatenate(
        [np.zeros(v.shape), np.cumsum(log_stay, axis=-1)], axis=-1
    )
    breaks = np.concatenate([log_break, np.zeros(v.shape)], axis=-1)
    return remaining + breaks


def category_probabilities(v, c) -> np.ndarray:
    return np.exp(log_category_probabilities(v, c))


def log_likelihood_vector(r, v, c) -> float:
    """log prod_a P(r_a | v_a); ``r`` holds 1-based levels."""
    r = np.asarray(r, dtype=np.int64)
    v = np.asarray(v, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError("ratings and responses must have the same length")
    logp = log_category_probabilities(v, c)
    return float(np.take_along_axis(logp, (r - 1)[..., None], axis=-1).sum())


def log_likelihood_rows(r: np.ndarray, v: np.ndarray, c) -> np.ndarray:
    """Per-row log-likelihoods for N x A arrays of levels and responses."""
    logp = log_category_probabilities(v, c)
    return np.take_along_axis(logp, (r - 1)[..., None], axis=-1)[..., 0].sum(axis=-1)


@dataclass(frozen=True)
class OneHotRating:
    """1-of-K encoding ``x`` with stick counts ``N`` and ``kappa = x - N/2``."""

    x: np.ndarray
    N: np.ndarray
    kappa: np.ndarray


def one_hot(r: int, num_levels: int) -> OneHotRating:
    if not 1 <= r <= num_levels:
        raise ValueError(f"level {r} outside 1..{num_levels}")
    x = np.zeros(num_levels)
    x[r - 1] = 1.0
    N = 1.0 - np.concatenate([[0.0], np.cumsum(x)[:-1]])
    return OneHotRating(x=x, N=N, kappa=x - N / 2.0)


def stick_arrays(r: np.ndarray, num_levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (N, kappa) over the K-1 augmentable sticks.

    For levels ``r`` of any shape returns arrays of shape ``r.shape + (K-1,)``.
    """
    k = np.arange(1, num_levels)
    r = np.asarray(r)[..., None]
    N = (k <= r).astype(np.float64)
    x = (k == r).astype(np.float64)
    return N, x - N / 2.0


def mode_thresholds(c) -> np.ndarray:
    """Thresholds t_1..t_{K-1}: P(r=k+1) > P(r=k) exactly when v > t_k.

    t_k = c_k - log(1 - exp(-(c_{k+1} - c_k))) and t_{K-1} = c_{K-1}.
    """
    c = check_cutpoints(c)
    gaps = np.diff(c)
    inner = c[:-1] - np.log(-np.expm1(-gaps))
    return np.concatenate([inner, c[-1:]])


def mode_threshold(c, k: int) -> float:
    """Threshold t_k for 1 <= k <= K-2 (both neighbouring cut-points must exist)."""
    c = check_cutpoints(c)
    if not 1 <= k <= c.size - 1:
        raise IndexError(f"threshold index {k} outside 1..{c.size - 1}")
    return float(c[k - 1] - np.log(-np.expm1(-(c[k] - c[k - 1]))))


def in_mode_cell(v, r, c) -> np.ndarray:
    """True where t_{r-1} < v <= t_r, i.e. level r is the most probable category."""
    t = np.concatenate([[-np.inf], mode_thresholds(c), [np.inf]]) if np.size(c) else np.array([-np.inf, np.inf])
    r = np.asarray(r)
    v = np.asarray(v)
    return (t[r - 1] < v) & (v <= t[r])


def expected_rating(v_samples, c_samples) -> np.ndarray:
    """Posterior-averaged sum_k k P(r = k | v), per aspect."""
    v_samples = [np.asarray(v, dtype=float) for v in v_samples]
    if not v_samples or len(v_samples) != len(c_samples):
        raise ValueError("need a non-empty, aligned list of response and cut-point samples")
    total = 0.0
    for v, c in zip(v_samples, c_samples):
        p = category_probabilities(v, c)
        total = total + p @ np.arange(1, p.shape[-1] + 1)
    return total / len(v_samples)


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GH_CACHE:
        x, w = np.polynomial.hermite_e.hermegauss(n)
        _GH_CACHE[n] = (x, np.log(w / np.sqrt(2.0 * np.pi)))
    return _GH_CACHE[n]


def marginal_log_category_probabilities(mean, sd, c, nodes: int = 40) -> np.ndarray:
    """log E_v[P(r = k | v)] for v ~ N(mean, sd^2), by Gauss-Hermite quadrature."""
    x, logw = _gauss_hermite(nodes)
    mean = np.asarray(mean, dtype=float)[..., None]
    sd = np.asarray(sd, dtype=float)[..., None]
    logp = log_category_probabilities(mean + sd * x, c)
    return logsumexp(logp + logw[:, None], axis=-2)
