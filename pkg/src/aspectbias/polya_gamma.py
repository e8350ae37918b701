"""Polya-Gamma PG(b, c) variates for integer shape b.

PG(1, c) is drawn exactly with Devroye's alternating-series rejection sampler
(proposal: exponential tail on (t, inf) mixed with a truncated inverse
Gaussian on (0, t), t = 0.64), following Polson, Scott & Windle (2013).
Integer b > 1 is a sum of b independent PG(1, c) draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, log_ndtr

TRUNC = 0.64
_LOG_PI = np.log(np.pi)
_PI2_8 = np.pi**2 / 8.0


@dataclass(frozen=True)
class PgParams:
    b: int
    c: float

    def __post_init__(self):
        if int(self.b) != self.b or self.b < 0:
            raise ValueError(f"PG shape must be a non-negative integer, got {self.b}")


def _log_coef(n: int, x: np.ndarray) -> np.ndarray:
    """Log of the n-th alternating-series coefficient of the J*(1, 0) density."""
    h = n + 0.5
    left = _LOG_PI + np.log(h) + 1.5 * np.log(2.0 / (np.pi * np.maximum(x, 1e-300))) - 2.0 * h * h / np.maximum(x, 1e-300)
    right = _LOG_PI + np.log(h) - 0.5 * h * h * np.pi**2 * x
    return np.where(x <= TRUNC, left, right)


def _exp_mass(z: np.ndarray) -> np.ndarray:
    """Probability of drawing from the exponential tail component of the proposal."""
    fz = _PI2_8 + 0.5 * z * z
    root = np.sqrt(1.0 / TRUNC)
    b = root * (TRUNC * z - 1.0)
    a = -root * (TRUNC * z + 1.0)
    x0 = np.log(fz) + fz * TRUNC
    xb = x0 - z + log_ndtr(b)
    xa = x0 + z + log_ndtr(a)
    log_q_over_p = np.log(4.0 / np.pi) + np.logaddexp(xb, xa)
    return expit(-log_q_over_p)


def _truncated_inv_gauss(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Gaussian(1/z, 1) draws truncated to (0, TRUNC)."""
    out = np.empty_like(z)
    mu = np.where(z > 0, 1.0 / np.maximum(z, 1e-300), np.inf)

    # mean above the truncation point: chi-square proposal with exp(-z^2 x / 2) acceptance
    pend = np.flatnonzero(mu > TRUNC)
    while pend.size:
        e1 = rng.standard_exponential(pend.size)
        e2 = rng.standard_exponential(pend.size)
        bad = np.flatnonzero(e1 * e1 > 2.0 * e2 / TRUNC)
        while bad.size:
            e1[bad] = rng.standard_exponential(bad.size)
            e2[bad] = rng.standard_exponential(bad.size)
            bad = bad[e1[bad] * e1[bad] > 2.0 * e2[bad] / TRUNC]
        x = TRUNC / (1.0 + TRUNC * e1) ** 2
        zz = z[pend]
        accept = rng.random(pend.size) <= np.exp(-0.5 * zz * zz * x)
        out[pend[accept]] = x[accept]
        pend = pend[~accept]

    # mean below the truncation point: plain IG draws until one lands in (0, TRUNC)
    pend = np.flatnonzero(mu <= TRUNC)
    while pend.size:
        m = mu[pend]
        y = rng.standard_normal(pend.size) ** 2
        x = m + 0.5 * m * m * y - 0.5 * m * np.sqrt(4.0 * m * y + (m * y) ** 2)
        flip = rng.random(pend.size) > m / (m + x)
        x = np.where(flip, m * m / x, x)
        ok = x <= TRUNC
        out[pend[ok]] = x[ok]
        pend = pend[~ok]
    return out


def _pg1(c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = 0.5 * np.abs(np.asarray(c, dtype=np.float64))
    out = np.empty_like(z)
    fz = _PI2_8 + 0.5 * z * z
    p_exp = _exp_mass(z)
    pend = np.arange(z.size)
    while pend.size:
        zp = z[pend]
        x = np.empty(pend.size)
        use_exp = rng.random(pend.size) < p_exp[pend]
        ne = int(use_exp.sum())
        x[use_exp] = TRUNC + rng.standard_exponential(ne) / fz[pend[use_exp]]
        x[~use_exp] = _truncated_inv_gauss(zp[~use_exp], rng)

        s = np.exp(_log_coef(0, x))
        y = rng.random(pend.size) * s
        accepted = np.zeros(pend.size, dtype=bool)
        active = np.ones(pend.size, dtype=bool)
        n = 0
        while active.any():
            n += 1
            idx = np.flatnonzero(active)
            term = np.exp(_log_coef(n, x[idx]))
            if n % 2:
                s[idx] -= term
                done = y[idx] <= s[idx]
                accepted[idx[done]] = True
            else:
                s[idx] += term
                done = y[idx] > s[idx]
            active[idx[done]] = False
        out[pend[accepted]] = 0.25 * x[accepted]
        pend = pend[~accepted]
    return out


def random_polyagamma(b, c, rng: np.random.Generator) -> np.ndarray:
    """Vectorized PG(b, c) draws; ``b`` and ``c`` broadcast together.

    Entries with ``b == 0`` are exactly zero.
    """
    b, c = np.broadcast_arrays(np.asarray(b), np.asarray(c, dtype=np.float64))
    if np.any(b < 0) or np.any(b != np.round(b)):
        raise ValueError("PG shape must be a non-negative integer")
    shape = c.shape
    b = b.ravel().astype(np.int64)
    c = c.ravel()
    out = np.zeros(c.size)
    if not b.any():
        return out.reshape(shape)
    if np.all(b <= 1):
        hit = np.flatnonzero(b == 1)
        out[hit] = _pg1(c[hit], rng)
        return out.reshape(shape)
    owner = np.repeat(np.arange(c.size), b)
    draws = _pg1(c[owner], rng)
    out += np.bincount(owner, weights=draws, minlength=c.size)
    return out.reshape(shape)


def sample_pg(params: PgParams, rng: np.random.Generator) -> float:
    """One PG(b, c) draw."""
    if params.b == 0:
        return 0.0
    return float(random_polyagamma(params.b, params.c, rng))


def pg_mean(b, c):
    """Exact mean of PG(b, c): b * tanh(c/2) / (2c), with limit b/4 at c = 0."""
    c = np.abs(np.asarray(c, dtype=np.float64))
    small = c < 1e-6
    safe = np.where(small, 1.0, c)
    return np.asarray(b) * np.where(small, 0.25 - c * c / 48.0, np.tanh(safe / 2.0) / (2.0 * safe))


class IdentityCheck(NamedTuple):
    lhs: float
    rhs: float
    stderr: float


def pg_identity_check(a: float, b: int, psi: float, num_mc: int, rng: np.random.Generator) -> IdentityCheck:
    """Both sides of the PG integral identity
    ``e^{a psi} / (1 + e^psi)^b = 2^-b e^{kappa psi} E[exp(-omega psi^2 / 2)]``
    with ``omega ~ PG(b, 0)`` and ``kappa = a - b/2``; the right side by Monte Carlo.
    """
    if b <= 0:
        raise ValueError("b must be positive")
    lhs = float(np.exp(a * psi - b * np.logaddexp(0.0, psi)))
    omega = random_polyagamma(np.full(num_mc, b), 0.0, rng)
    weights = np.exp(-0.5 * omega * psi * psi)
    scale = 2.0 ** (-b) * np.exp((a - b / 2.0) * psi)
    rhs = float(scale * weights.mean())
    stderr = float(scale * weights.std(ddof=1) / np.sqrt(num_mc))
    return IdentityCheck(lhs, rhs, stderr)
