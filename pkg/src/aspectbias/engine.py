"""Gibbs sampler for the ordinal aspect-bias model.

Latent structure::

    m_g ~ N(0, Lambda)                  group bias offsets
    s_j ~ Cat(theta), theta ~ Dir(alpha)  (theta collapsed)
    (mu, Sigma) ~ NIW
    z_i ~ N(mu, Sigma)                  item intrinsic quality
    v_ij ~ N(z_i + m_{s_j}, B)          latent responses
    r_ija ~ StickBreaking(v_ija, c)

One sweep updates m, s, (mu, Sigma), z, (omega, v), c in that order.

Randomness comes from per-block substreams keyed on (seed, sweep, phase,
block) so a sweep produces identical bits whether blocks run serially or on a
thread pool.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln, logsumexp
from scipy.stats import invwishart

from .domain import Hyperparameters, RatingsDataset, RunConfig
from .polya_gamma import random_polyagamma
from .stick_breaking import (
    in_mode_cell,
    log_category_probabilities,
    log_likelihood_rows,
    marginal_log_category_probabilities,
    mode_thresholds,
    stick_arrays,
)

logger = logging.getLogger(__name__)

BLOCK_SIZE = 512

PHASE_BIAS, PHASE_GROUPS, PHASE_NIW, PHASE_INTRINSIC, PHASE_OMEGA, PHASE_CUTS, PHASE_INIT, PHASE_RESPONSE = range(8)


class NumericalError(RuntimeError):
    """A covariance or precision matrix lost positive-definiteness mid-run."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class UnknownEntity(KeyError):
    code = "UnknownEntity"


class UnknownUser(UnknownEntity):
    code = "UnknownUser"


class UnknownItem(UnknownEntity):
    code = "UnknownItem"


@dataclass(frozen=True)
class ModelKind:
    """Which variant to fit: ordinal (stick-breaking) or continuous link, and how users are biased."""

    ordinal: bool = True
    bias_mode: str = "group"

    def __post_init__(self):
        if self.bias_mode not in ("group", "global", "none"):
            raise ValueError(f"unknown bias mode {self.bias_mode!r}")


FULL_MODEL = ModelKind(True, "group")


# --------------------------------------------------------------------------- random streams


class SweepStreams:
    """Deterministic substreams for one sweep, optionally with a thread pool for block work."""

    def __init__(self, seed: int, sweep: int, executor: ThreadPoolExecutor | None = None):
        self.seed = int(seed)
        self.sweep = int(sweep)
        self.executor = executor

    def block(self, phase: int, block: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.sweep, phase, block))
        return np.random.Generator(np.random.PCG64(seq))

    def map(self, fn, items):
        if self.executor is None:
            return [fn(x) for x in items]
        return list(self.executor.map(fn, items))


def _block_rng(rng, phase: int, block: int) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return rng.block(phase, block)


def _map(rng, fn, items):
    if isinstance(rng, SweepStreams):
        return rng.map(fn, items)
    return [fn(x) for x in items]


def _blocks(n: int):
    return [(b, slice(lo, min(lo + BLOCK_SIZE, n))) for b, lo in enumerate(range(0, n, BLOCK_SIZE))]


def _normals(rng, phase: int, n: int, dim: int) -> np.ndarray:
    if n == 0:
        return np.zeros((0, dim))
    parts = [_block_rng(rng, phase, b).standard_normal((sl.stop - sl.start, dim)) for b, sl in _blocks(n)]
    return np.concatenate(parts)


def _uniforms(rng, phase: int, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0)
    return np.concatenate([_block_rng(rng, phase, b).random(sl.stop - sl.start) for b, sl in _blocks(n)])


# --------------------------------------------------------------------------- state


@dataclass
class LatentState:
    z: np.ndarray
    m: np.ndarray
    s: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    c: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    group_counts: np.ndarray
    seed: int = 0
    sweep: int = 0

    def copy(self) -> "LatentState":
        return LatentState(
            self.z.copy(), self.m.copy(), self.s.copy(), self.v.copy(), self.omega.copy(),
            self.c.copy(), self.mu.copy(), self.Sigma.copy(), self.group_counts.copy(),
            self.seed, self.sweep,
        )

    def check(self, data: RatingsDataset | None = None) -> None:
        """Raise AssertionError if a structural invariant is broken."""
        G = self.m.shape[0]
        assert self.group_counts.sum() == self.s.size
        assert np.array_equal(self.group_counts, np.bincount(self.s, minlength=G))
        assert self.c.size < 2 or np.all(np.diff(self.c) > 0)
        np.linalg.cholesky(self.Sigma)
        assert np.all(self.omega >= 0)
        if data is not None and self.omega.size:
            N, _ = stick_arrays(data.ratings, data.num_levels)
            assert np.all(self.omega[N == 0] == 0)
            assert np.all(self.omega[N == 1] > 0)


class _Design:
    """Index structures and constants derived once per (data, hp)."""

    def __init__(self, data: RatingsDataset, hp: Hyperparameters):
        if hp.num_aspects != data.num_aspects:
            raise ValueError(f"hyperparameters are for {hp.num_aspects} aspects, data has {data.num_aspects}")
        n = data.num_observations
        self.users = np.asarray(data.users)
        self.items = np.asarray(data.items)
        self.r = np.asarray(data.ratings)
        self.K = data.num_levels
        ones = np.ones(n)
        self.user_of = sparse.csr_matrix((ones, (self.users, np.arange(n))), shape=(data.num_users, n))
        self.item_of = sparse.csr_matrix((ones, (self.items, np.arange(n))), shape=(data.num_items, n))
        self.item_n = np.bincount(self.items, minlength=data.num_items)
        self.N, self.kappa = stick_arrays(self.r, self.K)
        self.B_inv = np.linalg.inv(hp.B)
        self.B_chol = np.linalg.cholesky(hp.B)
        self.Lambda_inv = np.linalg.inv(hp.Lambda)
        # references pin the objects so cache keys (ids) cannot be recycled
        self.data = data
        self.hp = hp


_DESIGN_CACHE: dict = {}


def _design(data, hp) -> _Design:
    key = (id(data), id(hp))
    d = _DESIGN_CACHE.get(key)
    if d is None:
        if len(_DESIGN_CACHE) > 16:
            _DESIGN_CACHE.clear()
        d = _DESIGN_CACHE[key] = _Design(data, hp)
    return d


def _gaussian_draw(precision: np.ndarray, info: np.ndarray, eps: np.ndarray, what: str, state=None) -> np.ndarray:
    """Batched draws from N(P^-1 h, P^-1) given stacked precisions P, information vectors h and N(0, I) noise."""
    try:
        L = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what}: posterior precision is not positive definite", state) from None
    mean = np.linalg.solve(precision, info[..., None])[..., 0]
    Lt = np.swapaxes(L, -1, -2)
    return mean + np.linalg.solve(Lt, eps[..., None])[..., 0]


# --------------------------------------------------------------------------- conditionals


def pseudo_observations(state: LatentState, data: RatingsDataset, hp: Hyperparameters):
    """Gaussian pseudo-data implied by the augmented likelihood given omega.

    Given omega, prod_k exp(kappa_k eta_k - omega_k eta_k^2 / 2) is, per aspect,
    proportional to N(v_a; y_a, 1/W_a) with W_a = sum_k omega_k and
    y_a = sum_k (omega_k c_k - kappa_k) / W_a. Integrating v out leaves
    y_ij ~ N(z_i + m_{s_j}, B + diag(1/W_ij)). Returns (y, precision) with
    ``precision`` the N x A x A inverse of that covariance.
    """
    d = _design(data, hp)
    W = state.omega.sum(axis=-1)
    y = ((state.omega * state.c).sum(axis=-1) - d.kappa.sum(axis=-1)) / W
    A = W.shape[1]
    cov = hp.B + (1.0 / W)[:, :, None] * np.eye(A)
    return y, np.linalg.inv(cov)


def _sum_by(labels: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    flat = values.reshape(values.shape[0], -1)
    out = np.stack([np.bincount(labels, weights=flat[:, k], minlength=size) for k in range(flat.shape[1])], axis=1)
    return out.reshape((size,) + values.shape[1:])


def sample_group_bias(state: LatentState, data: RatingsDataset, hp: Hyperparameters, rng,
                      marginal: bool = False) -> np.ndarray:
    """Draw each m_g from N(mhat_g, Lhat_g), Lhat_g = (n_g B^-1 + Lambda^-1)^-1,
    mhat_g = Lhat_g B^-1 sum_{ratings of group g} (v_ij - z_i).

    ``marginal=True`` conditions on omega instead of v (see :func:`pseudo_observations`).
    """
    d = _design(data, hp)
    G, A = state.m.shape
    groups = state.s[d.users]
    if marginal:
        y, prec = pseudo_observations(state, data, hp)
        resid = y - state.z[d.items]
        precision = _sum_by(groups, prec, G) + d.Lambda_inv
        info = _sum_by(groups, np.einsum("nab,nb->na", prec, resid), G)
    else:
        resid = state.v - state.z[d.items]
        sums = _sum_by(groups, resid, G)
        n_g = np.bincount(groups, minlength=G)
        precision = n_g[:, None, None] * d.B_inv + d.Lambda_inv
        info = sums @ d.B_inv.T
    eps = _normals(rng, PHASE_BIAS, G, A)
    state.m = _gaussian_draw(precision, info, eps, "group bias", state)
    return state.m


def group_log_scores(state: LatentState, data: RatingsDataset, hp: Hyperparameters) -> np.ndarray:
    """J x G log-likelihood of each user's responses under each group's offset (constant terms dropped)."""
    d = _design(data, hp)
    resid = state.v - state.z[d.items]
    proj = resid @ d.B_inv @ state.m.T
    half = 0.5 * np.einsum("ga,ab,gb->g", state.m, d.B_inv, state.m)
    per_obs = proj - half
    return np.asarray(d.user_of @ per_obs)


def group_log_scores_marginal(state: LatentState, data: RatingsDataset, hp: Hyperparameters) -> np.ndarray:
    """J x G log-likelihood of each user's pseudo-data with v integrated out."""
    d = _design(data, hp)
    y, prec = pseudo_observations(state, data, hp)
    resid = y - state.z[d.items]
    proj = np.einsum("na,nab,gb->ng", resid, prec, state.m)
    half = 0.5 * np.einsum("ga,nab,gb->ng", state.m, prec, state.m)
    return np.asarray(d.user_of @ (proj - half))


def sample_user_groups(state: LatentState, data: RatingsDataset, hp: Hyperparameters, rng,
                       marginal: bool = False):
    """Collapsed update: P(s_j = g) proportional to (n_{g,-j} + alpha_g) prod_i N(v_ij; z_i + m_g, B).

    With ``marginal=True`` the responses are integrated out given omega
    (see :func:`pseudo_observations`); v must be redrawn before anything
    conditions on it again.
    """
    J = state.s.size
    G = state.m.shape[0]
    if G == 1:
        return state.s, state.group_counts
    if marginal:
        loglik = group_log_scores_marginal(state, data, hp)
    else:
        loglik = group_log_scores(state, data, hp)
    u = _uniforms(rng, PHASE_GROUPS, J)
    alpha = hp.alpha
    counts = state.group_counts.astype(np.float64)
    s = state.s
    for j in range(J):
        counts[s[j]] -= 1.0
        logp = loglik[j] + np.log(counts + alpha)
        p = np.exp(logp - logp.max())
        cdf = np.cumsum(p)
        g = min(int(np.searchsorted(cdf, u[j] * cdf[-1], side="right")), G - 1)
        s[j] = g
        counts[g] += 1.0
    state.group_counts = np.bincount(s, minlength=G)
    return s, state.group_counts


def niw_posterior(z: np.ndarray, hp: Hyperparameters):
    """NIW posterior parameters (mu_n, kappa_n, nu_n, Psi_n) given rows of ``z`` as observations."""
    n = z.shape[0]
    kappa_n = hp.niw_kappa0 + n
    nu_n = hp.niw_nu0 + n
    if n == 0:
        return hp.niw_mu0.copy(), kappa_n, nu_n, hp.niw_Psi0.copy()
    zbar = z.mean(axis=0)
    centered = z - zbar
    scatter = centered.T @ centered
    mu_n = (hp.niw_kappa0 * hp.niw_mu0 + n * zbar) / kappa_n
    dev = zbar - hp.niw_mu0
    Psi_n = hp.niw_Psi0 + scatter + (hp.niw_kappa0 * n / kappa_n) * np.outer(dev, dev)
    return mu_n, kappa_n, nu_n, 0.5 * (Psi_n + Psi_n.T)


def draw_niw(mu_n, kappa_n, nu_n, Psi_n, rng: np.random.Generator):
    Sigma = np.atleast_2d(invwishart.rvs(df=nu_n, scale=Psi_n, random_state=rng))
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = rng.multivariate_normal(mu_n, Sigma / kappa_n, method="cholesky")
    return mu, Sigma


def sample_niw(state: LatentState, hp: Hyperparameters, rng):
    mu_n, kappa_n, nu_n, Psi_n = niw_posterior(state.z, hp)
    try:
        np.linalg.cholesky(Psi_n)
    except np.linalg.LinAlgError:
        raise NumericalError("NIW scale matrix is not positive definite", state) from None
    state.mu, state.Sigma = draw_niw(mu_n, kappa_n, nu_n, Psi_n, _block_rng(rng, PHASE_NIW, 0))
    return state.mu, state.Sigma


def sample_intrinsic(state: LatentState, data: RatingsDataset, hp: Hyperparameters, rng,
                     marginal: bool = False) -> np.ndarray:
    """Draw z_i from N(muhat_i, Sigmahat_i), Sigmahat_i = (n_i B^-1 + Sigma^-1)^-1,
    muhat_i = Sigmahat_i (B^-1 sum_j (v_ij - m_{s_j}) + Sigma^-1 mu)."""
    d = _design(data, hp)
    I, A = state.z.shape
    try:
        Sigma_inv = np.linalg.inv(state.Sigma)
    except np.linalg.LinAlgError:
        raise NumericalError("item covariance is singular", state) from None
    if marginal:
        y, prec = pseudo_observations(state, data, hp)
        resid = y - state.m[state.s[d.users]]
        precision = _sum_by(d.items, prec, I) + Sigma_inv
        info = _sum_by(d.items, np.einsum("nab,nb->na", prec, resid), I) + Sigma_inv @ state.mu
    else:
        resid = state.v - state.m[state.s[d.users]]
        sums = np.asarray(d.item_of @ resid)
        precision = d.item_n[:, None, None] * d.B_inv + Sigma_inv
        info = sums @ d.B_inv.T + Sigma_inv @ state.mu
    eps = _normals(rng, PHASE_INTRINSIC, I, A)
    state.z = _gaussian_draw(precision, info, eps, "intrinsic quality", state)
    return state.z


def sample_omega(state: LatentState, data: RatingsDataset, hp: Hyperparameters, rng) -> np.ndarray:
    """omega_ija^k ~ PG(N_ija^k, c_k - v_ija); exactly zero where N_ija^k = 0."""
    d = _design(data, hp)
    n = state.v.shape[0]
    eta = state.c[None, None, :] - state.v[:, :, None]
    omega = np.zeros_like(eta)

    def run(block):
        b, sl = block
        omega[sl] = random_polyagamma(d.N[sl], eta[sl], _block_rng(rng, PHASE_OMEGA, b))

    _map(rng, run, _blocks(n))
    state.omega = omega
    return omega


def sample_responses(state: LatentState, data: RatingsDataset, hp: Hyperparameters, rng) -> np.ndarray:
    """v_ij | omega ~ N(P^-1 h, P^-1) with P = B^-1 + sum_k diag(omega^k),
    h = B^-1 (z_i + m_{s_j}) + sum_k (omega^k c_k - kappa^k)."""
    d = _design(data, hp)
    n, A = state.v.shape
    prior_mean = state.z[d.items] + state.m[state.s[d.users]]
    omega_sum = state.omega.sum(axis=-1)
    precision = np.broadcast_to(d.B_inv, (n, A, A)).copy()
    idx = np.arange(A)
    precision[:, idx, idx] += omega_sum
    info = prior_mean @ d.B_inv.T + (state.omega * state.c).sum(axis=-1) - d.kappa.sum(axis=-1)
    eps = _normals(rng, PHASE_RESPONSE, n, A)
    state.v = _gaussian_draw(precision, info, eps, "latent responses", state)
    return state.v


def sample_latent_responses(state: LatentState, data: RatingsDataset, hp: Hyperparameters, rng):
    sample_omega(state, data, hp, rng)
    sample_responses(state, data, hp, rng)
    return state.v, state.omega


def _softplus(x):
    return np.logaddexp(0.0, x)


def cutpoint_interval(c: np.ndarray, k: int, v: np.ndarray, r: np.ndarray, rule: str = "mode"):
    """Uniform range for cut-point ``k`` (1-based) given the others, responses ``v`` and levels ``r``.

    Under the ``mode`` rule the range is exactly the set of values that keep
    every response currently in its level's most-probable cell inside that
    cell. Returns ``(low, high)``.
    """
    K1 = c.size
    i = k - 1
    correct = in_mode_cell(v, r, c)
    sel = lambda level: v[correct & (r == level)]
    here, above = sel(k), sel(k + 1)
    below = sel(k - 1) if k >= 2 else np.empty(0)

    lowers, uppers = [], []
    if rule == "mode":
        # t_k as a function of c_k is increasing; invert it
        if k <= K1 - 1:
            nxt = c[i + 1]
            t_inv = lambda y: nxt - _softplus(nxt - y)
        else:
            t_inv = lambda y: y
        if here.size:
            lowers.append(t_inv(here.max()))
        if above.size:
            uppers.append(t_inv(above.min()))
        # t_{k-1} as a function of c_k is decreasing; invert it
        if k >= 2:
            prev = c[i - 1]
            # responses at or below c_{k-1} stay below t_{k-1} for any c_k
            s_inv = lambda y: prev - np.log(-np.expm1(-(y - prev))) if y > prev else np.inf
            if here.size:
                lowers.append(s_inv(here.min()))
            if below.size:
                uppers.append(s_inv(below.max()))
    else:
        offset = -np.log(-np.expm1(-(c[i] - c[i - 1]))) if k >= 2 else 0.0
        if here.size:
            lowers.append(here.max() + offset)
        if above.size:
            uppers.append(above.min() + offset)

    floor = c[i - 1] + 0.1 * (c[i] - c[i - 1]) if k >= 2 else -np.inf
    ceiling = c[i + 1] - 0.1 * (c[i + 1] - c[i]) if k <= K1 - 1 else np.inf

    low = max(lowers + [floor])
    high = min(uppers + [ceiling])
    # an outermost cut-point with no supporting responses beyond it may only move
    # towards the data; a padded bound there lets it random-walk off to infinity
    if not np.isfinite(low):
        low = c[i]
    if not np.isfinite(high):
        high = c[i]
    return float(low), float(high)


def sample_cutpoints(state: LatentState, data: RatingsDataset, rng, rule: str = "mode") -> np.ndarray:
    """Sequential uniform updates of c_1..c_{K-1}, each within its data-determined range."""
    c = state.c.copy()
    r = np.asarray(data.ratings)
    v = state.v
    gen = _block_rng(rng, PHASE_CUTS, 0)
    for k in range(1, c.size + 1):
        low, high = cutpoint_interval(c, k, v, r, rule)
        u = gen.random()
        if high > low:
            c[k - 1] = low + u * (high - low)
        # crossed bounds (possible only under the literal rule) keep the current value
    state.c = c
    return c


# --------------------------------------------------------------------------- joint density


def _mvn_logpdf_rows(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    diff = np.atleast_2d(x - mean)
    sol = np.linalg.solve(chol, diff.T)
    A = chol.shape[0]
    return -0.5 * (sol * sol).sum(axis=0) - np.log(np.diag(chol)).sum() - 0.5 * A * np.log(2 * np.pi)


def joint_log_density(state: LatentState, data: RatingsDataset, hp: Hyperparameters, kind: ModelKind = FULL_MODEL) -> float:
    d = _design(data, hp)
    mean = state.z[d.items] + state.m[state.s[d.users]]
    if kind.ordinal:
        total = log_likelihood_rows(d.r, state.v, state.c).sum()
        total += _mvn_logpdf_rows(state.v, mean, d.B_chol).sum()
    else:
        total = _mvn_logpdf_rows(d.r.astype(float), mean, d.B_chol).sum()
    Sigma_chol = np.linalg.cholesky(state.Sigma)
    total += _mvn_logpdf_rows(state.z, state.mu, Sigma_chol).sum()
    total += _mvn_logpdf_rows(state.mu, hp.niw_mu0, np.linalg.cholesky(state.Sigma / hp.niw_kappa0)).sum()
    total += invwishart.logpdf(state.Sigma, df=hp.niw_nu0, scale=hp.niw_Psi0)
    if kind.bias_mode != "none":
        total += _mvn_logpdf_rows(state.m, np.zeros(state.m.shape[1]), np.linalg.cholesky(hp.Lambda)).sum()
    if kind.bias_mode == "group":
        alpha = hp.alpha
        counts = state.group_counts
        total += gammaln(alpha.sum()) - gammaln(counts.sum() + alpha.sum())
        total += (gammaln(counts + alpha) - gammaln(alpha)).sum()
    return float(total)


# --------------------------------------------------------------------------- init / sweep / fit


def effective_hyperparameters(hp: Hyperparameters, kind: ModelKind) -> Hyperparameters:
    return hp if kind.bias_mode == "group" else hp.with_groups(1)


def init_state(data: RatingsDataset, hp: Hyperparameters, cfg: RunConfig, rng=None, kind: ModelKind = FULL_MODEL) -> LatentState:
    """Starting point: uniform groups, zero offsets, z at the prior mean, v at the
    centre of each rating's most-probable cell under the initial cut-points."""
    hp = effective_hyperparameters(hp, kind)
    if rng is None:
        rng = SweepStreams(cfg.seed, 0)
    c = np.asarray(cfg.init_cutpoints, dtype=float)
    K = data.num_levels
    if kind.ordinal and c.size != K - 1:
        raise ValueError(f"{K}-level data needs {K - 1} cut-points, got {c.size}")
    if not kind.ordinal:
        c = np.zeros(0)
    J, I, A = data.num_users, data.num_items, data.num_aspects
    G = hp.num_groups
    gen = _block_rng(rng, PHASE_INIT, 0)
    s = gen.integers(0, G, size=J) if G > 1 else np.zeros(J, dtype=np.int64)
    s = s.astype(np.int64)
    nu0, A_ = hp.niw_nu0, hp.num_aspects
    Sigma = hp.niw_Psi0 / (nu0 - A_ - 1) if nu0 > A_ + 1 else hp.niw_Psi0.copy()
    r = np.asarray(data.ratings)
    if kind.ordinal:
        if c.size:
            t = mode_thresholds(c)
            edges = np.concatenate([[t[0] - 5.0], t, [t[-1] + 5.0]])
            centres = 0.5 * (edges[:-1] + edges[1:])
            v = centres[r - 1]
        else:
            v = np.zeros(r.shape)
    else:
        v = r.astype(np.float64)
    state = LatentState(
        z=np.tile(hp.niw_mu0, (I, 1)),
        m=np.zeros((G, A)),
        s=s,
        v=v,
        omega=np.zeros(r.shape + (max(K - 1, 0) if kind.ordinal else 0,)),
        c=c,
        mu=hp.niw_mu0.copy(),
        Sigma=np.array(Sigma),
        group_counts=np.bincount(s, minlength=G),
        seed=cfg.seed,
        sweep=0,
    )
    if kind.ordinal:
        sample_omega(state, data, hp, rng)
    return state


def sweep(state: LatentState, data: RatingsDataset, hp: Hyperparameters, rng, kind: ModelKind = FULL_MODEL,
          cfg: RunConfig | None = None) -> LatentState:
    """One full Gibbs scan, in place; returns ``state``.

    ``scan="plain"`` order: m, s, (mu, Sigma), z, omega, v, c, each conditioned
    on the current v. ``scan="collapsed"``: m, s, z given omega with v
    integrated out, then v, c, omega.
    """
    hp = effective_hyperparameters(hp, kind)
    collapsed = bool(kind.ordinal and state.c.size and (cfg is None or cfg.scan == "collapsed"))
    if kind.bias_mode != "none":
        sample_group_bias(state, data, hp, rng, marginal=collapsed)
    if kind.bias_mode == "group":
        sample_user_groups(state, data, hp, rng, marginal=collapsed)
    sample_niw(state, hp, rng)
    sample_intrinsic(state, data, hp, rng, marginal=collapsed)
    if kind.ordinal:
        update_cuts = cfg is None or cfg.sample_cutpoints
        rule = cfg.cutpoint_rule if cfg else "mode"
        if collapsed:
            sample_responses(state, data, hp, rng)
            if update_cuts:
                sample_cutpoints(state, data, rng, rule=rule)
            sample_omega(state, data, hp, rng)
        else:
            sample_latent_responses(state, data, hp, rng)
            if update_cuts:
                sample_cutpoints(state, data, rng, rule=rule)
    state.sweep += 1
    return state


@dataclass
class PosteriorSamples:
    """Thinned chain summaries. Array fields are stacked over retained sweeps."""

    z: np.ndarray
    m: np.ndarray
    s: np.ndarray
    c: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    log_density: np.ndarray
    sweeps: np.ndarray
    hp: Hyperparameters
    kind: ModelKind
    num_levels: int
    reference_m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def num_groups(self) -> int:
        return self.m.shape[1]

    def aligned(self) -> "PosteriorSamples":
        """Relabel groups in every sample to best match ``reference_m`` (label switching)."""
        if self.num_groups == 1:
            return self
        ref = self.reference_m if self.reference_m is not None else self.m[0]
        m = np.empty_like(self.m)
        s = np.empty_like(self.s)
        for t in range(len(self)):
            cost = ((self.m[t][:, None, :] - ref[None, :, :]) ** 2).sum(-1)
            rows, cols = linear_sum_assignment(cost)
            relabel = np.empty(self.num_groups, dtype=np.int64)
            relabel[rows] = cols
            m[t, cols] = self.m[t, rows]
            s[t] = relabel[self.s[t]]
        return replace(self, m=m, s=s)

    def mode_groups(self) -> np.ndarray:
        """Most frequent (aligned) group of every user across samples."""
        aligned = self.aligned()
        G = self.num_groups
        counts = np.apply_along_axis(lambda col: np.bincount(col, minlength=G), 0, aligned.s)
        return counts.argmax(axis=0)

    def posterior_mean(self):
        aligned = self.aligned()
        return aligned.z.mean(0), aligned.m.mean(0), self.c.mean(0) if self.c.size else self.c[:0]


def total_sweeps(cfg: RunConfig) -> int:
    return cfg.burn_in + cfg.num_samples * cfg.thinning


def fit(data: RatingsDataset, hp: Hyperparameters, cfg: RunConfig, kind: ModelKind = FULL_MODEL,
        callback=None) -> PosteriorSamples:
    """Run ``burn_in`` discarded sweeps then keep every ``thinning``-th of the rest."""
    hp_eff = effective_hyperparameters(hp, kind)
    executor = None
    if cfg.parallel_blocks and cfg.workers > 1:
        executor = ThreadPoolExecutor(max_workers=cfg.workers)
    try:
        state = init_state(data, hp_eff, cfg, SweepStreams(cfg.seed, 0, executor), kind)
        keep = {"z": [], "m": [], "s": [], "c": [], "mu": [], "Sigma": [], "v": []}
        kept_sweeps = []
        log_density = np.empty(total_sweeps(cfg))
        reference_m = state.m.copy()
        for t in range(1, total_sweeps(cfg) + 1):
            sweep(state, data, hp_eff, SweepStreams(cfg.seed, t, executor), kind, cfg)
            log_density[t - 1] = joint_log_density(state, data, hp_eff, kind)
            if not np.isfinite(log_density[t - 1]):
                raise NumericalError(f"joint log-density is not finite at sweep {t}", state)
            if t == cfg.burn_in:
                reference_m = state.m.copy()
            if t > cfg.burn_in and (t - cfg.burn_in) % cfg.thinning == 0:
                for name in ("z", "m", "s", "c", "mu", "Sigma"):
                    keep[name].append(getattr(state, name).copy())
                if cfg.keep_latent:
                    keep["v"].append(state.v.copy())
                kept_sweeps.append(t)
            if callback is not None:
                callback(t, state, log_density[t - 1])
        if cfg.burn_in == 0:
            reference_m = keep["m"][0]
    finally:
        if executor is not None:
            executor.shutdown()
    return PosteriorSamples(
        z=np.stack(keep["z"]),
        m=np.stack(keep["m"]),
        s=np.stack(keep["s"]),
        c=np.stack(keep["c"]),
        mu=np.stack(keep["mu"]),
        Sigma=np.stack(keep["Sigma"]),
        log_density=log_density,
        sweeps=np.asarray(kept_sweeps),
        hp=hp_eff,
        kind=kind,
        num_levels=data.num_levels,
        reference_m=reference_m,
        v=np.stack(keep["v"]) if cfg.keep_latent else None,
    )


# --------------------------------------------------------------------------- prediction


def _response_means(samples: PosteriorSamples, users: np.ndarray, items: np.ndarray, strict: bool = True) -> np.ndarray:
    """S x n x A means z_i + m_{s_j}; cold users/items (index -1) handled when not strict."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    J = samples.s.shape[1]
    I = samples.z.shape[1]
    bad_u = (users < 0) | (users >= J)
    bad_i = (items < 0) | (items >= I)
    if strict and bad_u.any():
        raise UnknownUser(f"unknown user index {int(users[bad_u][0])}")
    if strict and bad_i.any():
        raise UnknownItem(f"unknown item index {int(items[bad_i][0])}")
    S = len(samples)
    G = samples.num_groups
    z = samples.z[:, np.where(bad_i, 0, items)]
    z[:, bad_i] = samples.mu[:, None, :]
    groups = samples.s[:, np.where(bad_u, 0, users)]
    if bad_u.any():
        popular = np.array([np.bincount(samples.s[t], minlength=G).argmax() for t in range(S)])
        groups[:, bad_u] = popular[:, None]
    m = np.take_along_axis(samples.m, groups[..., None], axis=1)
    return z + m


def predict_many(samples: PosteriorSamples, users, items, mode: str = "marginal", strict: bool = True) -> np.ndarray:
    """n x A posterior expected ratings for (user, item) index pairs.

    Ordinal models integrate the latent response over N(z_i + m_{s_j}, B)
    (``mode="marginal"``) or plug in its mean (``"plugin"``); continuous
    models return the unclipped posterior mean response.
    """
    means = _response_means(samples, users, items, strict)
    if not samples.kind.ordinal:
        return means.mean(axis=0)
    K = samples.num_levels
    levels = np.arange(1, K + 1)
    sd = np.sqrt(np.diag(samples.hp.B))
    total = np.zeros(means.shape[1:])
    for t in range(len(samples)):
        if mode == "plugin":
            logp = log_category_probabilities(means[t], samples.c[t])
        else:
            logp = marginal_log_category_probabilities(means[t], sd, samples.c[t])
        total += np.exp(logp) @ levels
    return total / len(samples)


def predict(samples: PosteriorSamples, user: int, item: int, hp: Hyperparameters | None = None,
            mode: str = "marginal", strict: bool = True) -> np.ndarray:
    return predict_many(samples, [user], [item], mode, strict)[0]


def observation_log_likelihoods(samples: PosteriorSamples, data: RatingsDataset, strict: bool = True,
                                mc_draws: int = 256, seed: int = 0) -> np.ndarray:
    """log of the posterior-averaged probability (or density) of each observed rating vector.

    Ordinal models marginalize v over N(z_i + m_{s_j}, B): by per-aspect
    quadrature when B is diagonal, otherwise by seeded Monte Carlo.
    Continuous models use the Gaussian density at the integer rating.
    """
    means = _response_means(samples, data.users, data.items, strict)
    S, n, A = means.shape
    r = np.asarray(data.ratings)
    B = samples.hp.B
    per_sample = np.empty((S, n))
    if not samples.kind.ordinal:
        chol = np.linalg.cholesky(B)
        for t in range(S):
            per_sample[t] = _mvn_logpdf_rows(r.astype(float), means[t], chol)
    elif np.allclose(B, np.diag(np.diag(B))):
        sd = np.sqrt(np.diag(B))
        for t in range(S):
            logp = marginal_log_category_probabilities(means[t], sd, samples.c[t])
            per_sample[t] = np.take_along_axis(logp, (r - 1)[..., None], axis=-1)[..., 0].sum(-1)
    else:
        chol = np.linalg.cholesky(B)
        rng = np.random.default_rng(seed)
        for t in range(S):
            eps = rng.standard_normal((mc_draws, n, A)) @ chol.T
            v = means[t][None] + eps
            ll = log_likelihood_rows(np.broadcast_to(r, v.shape), v, samples.c[t])
            per_sample[t] = logsumexp(ll, axis=0) - np.log(mc_draws)
    return logsumexp(per_sample, axis=0) - np.log(S)
