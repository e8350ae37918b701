"""Sampler self-checks: Geweke joint-distribution test, PG moments and trace statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .domain import Hyperparameters, RatingsDataset, RunConfig
from .polya_gamma import pg_identity_check, pg_mean, random_polyagamma
from .stick_breaking import stick_arrays
from .synthetic import draw_ratings


def batch_means_se(x: np.ndarray, num_batches: int = 50) -> np.ndarray:
    """Monte Carlo standard error of the mean of a (possibly autocorrelated) chain, per column."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0] - x.shape[0] % num_batches
    batches = x[:n].reshape(num_batches, n // num_batches, *x.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(num_batches)


@dataclass
class MomentCheck:
    name: str
    forward: float
    successive: float
    z_score: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.z_score) < self.tolerance


def geweke_hyperparameters(A: int = 2, G: int = 2) -> Hyperparameters:
    nu0 = A + 6.0
    return Hyperparameters(
        alpha=np.ones(G),
        Lambda=np.eye(A),
        B=0.5 * np.eye(A),
        niw_mu0=np.zeros(A),
        niw_kappa0=1.0,
        niw_nu0=nu0,
        niw_Psi0=(nu0 - A - 1.0) * np.eye(A),
    )


def _summaries(z, m, v) -> np.ndarray:
    return np.concatenate([z.mean(0), (z**2).mean(0), m.mean(0), (m**2).mean(0), v.mean(0), (v**2).mean(0)])


def _summary_names(A: int) -> list[str]:
    names = []
    for var in ("z", "m", "v"):
        names += [f"mean {var}[{a}]" for a in range(A)] + [f"mean {var}[{a}]^2" for a in range(A)]
    return names


def _forward_draw(hp, J, I, A, K, c, rng):
    theta = rng.dirichlet(hp.alpha)
    m = rng.multivariate_normal(np.zeros(A), hp.Lambda, size=hp.num_groups, method="cholesky")
    s = rng.choice(hp.num_groups, size=J, p=theta)
    mu, Sigma = engine.draw_niw(hp.niw_mu0, hp.niw_kappa0, hp.niw_nu0, hp.niw_Psi0, rng)
    z = rng.multivariate_normal(mu, Sigma, size=I, method="cholesky")
    users, items = np.divmod(np.arange(J * I), I)
    v = z[items] + m[s[users]] + rng.standard_normal((users.size, A)) @ np.linalg.cholesky(hp.B).T
    r = draw_ratings(v, c, rng)
    return dict(m=m, s=s, mu=mu, Sigma=Sigma, z=z, v=v, r=r, users=users, items=items)


def _dataset(users, items, r, K, J, I, A) -> RatingsDataset:
    return RatingsDataset(
        users=users, items=items, ratings=r.astype(np.int64), num_levels=K,
        user_ids=tuple(f"u{j}" for j in range(J)), item_ids=tuple(f"i{i}" for i in range(I)),
        aspect_names=tuple(f"a{a}" for a in range(A)),
    )


def geweke_test(num_forward: int = 20_000, num_successive: int = 20_000, seed: int = 0,
                J: int = 4, I: int = 3, A: int = 2, K: int = 3, G: int = 2, scan: str = "collapsed",
                tolerance: float = 4.0, burn: int = 100) -> list[MomentCheck]:
    """Compare prior moments of z, m, v from forward simulation against a chain that
    alternates one Gibbs sweep with redrawing the data given the latents.

    Cut-points are held at fixed values (they are not part of the test).
    """
    hp = geweke_hyperparameters(A, G)
    c = np.linspace(-1.0, 1.0, K - 1)
    rng = np.random.default_rng(seed)

    forward = np.empty((num_forward, 6 * A))
    for t in range(num_forward):
        d = _forward_draw(hp, J, I, A, K, c, rng)
        forward[t] = _summaries(d["z"], d["m"], d["v"])

    cfg = RunConfig(seed=seed + 1, init_cutpoints=tuple(c), sample_cutpoints=False, scan=scan)
    d = _forward_draw(hp, J, I, A, K, c, rng)
    data = _dataset(d["users"], d["items"], d["r"], K, J, I, A)
    state = engine.init_state(data, hp, cfg)
    state.m, state.s, state.z, state.v = d["m"], d["s"].astype(np.int64), d["z"], d["v"]
    state.mu, state.Sigma = d["mu"], d["Sigma"]
    state.group_counts = np.bincount(state.s, minlength=G)
    engine.sample_omega(state, data, hp, rng)

    successive = np.empty((num_successive, 6 * A))
    for t in range(-burn, num_successive):
        engine.sweep(state, data, hp, engine.SweepStreams(cfg.seed, t + burn + 1), cfg=cfg)
        r = draw_ratings(state.v, c, rng)
        data = _dataset(d["users"], d["items"], r, K, J, I, A)
        N, _ = stick_arrays(r, K)
        state.omega = random_polyagamma(N, c - state.v[..., None], rng)
        if t >= 0:
            successive[t] = _summaries(state.z, state.m, state.v)

    se_f = forward.std(axis=0, ddof=1) / np.sqrt(num_forward)
    se_s = batch_means_se(successive)
    diff = successive.mean(0) - forward.mean(0)
    z = diff / np.sqrt(se_f**2 + se_s**2)
    names = _summary_names(A)
    return [MomentCheck(n, float(f), float(s_), float(zz), tolerance)
            for n, f, s_, zz in zip(names, forward.mean(0), successive.mean(0), z)]


def pg_moment_check(cs=(0.0, 0.1, 1.0, 4.0), n: int = 1_000_000, seed: int = 0, tolerance: float = 3.0):
    """Empirical PG(1, c) means against the exact mean; rows of (c, mean, exact, stderr, passed)."""
    rng = np.random.default_rng(seed)
    rows = []
    for c in cs:
        x = random_polyagamma(np.ones(n, dtype=np.int64), c, rng)
        se = x.std(ddof=1) / np.sqrt(n)
        exact = float(pg_mean(1, c))
        rows.append((float(c), float(x.mean()), exact, float(se), abs(x.mean() - exact) < tolerance * se))
    return rows


def pg_identity_checks(num_triples: int = 20, num_mc: int = 100_000, seed: int = 0, tolerance: float = 3.0):
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(num_triples):
        b = int(rng.integers(1, 4))
        a = float(rng.uniform(0.0, b))
        psi = float(rng.uniform(-3.0, 3.0))
        res = pg_identity_check(a, b, psi, num_mc, rng)
        rows.append((a, b, psi, res.lhs, res.rhs, res.stderr, abs(res.lhs - res.rhs) < tolerance * res.stderr))
    return rows


def trace_statistics(log_density: np.ndarray) -> dict:
    """Summary of a joint log-density trace: start, end level, and the slope of the last quarter
    relative to its spread (near zero once the chain has settled)."""
    x = np.asarray(log_density, dtype=float)
    q = max(len(x) // 4, 2)
    tail = x[-q:]
    t = np.arange(q)
    slope = np.polyfit(t, tail, 1)[0] if q > 1 else 0.0
    spread = tail.std() if tail.std() > 0 else 1.0
    return {
        "sweeps": int(len(x)),
        "first": float(x[0]),
        "max": float(x.max()),
        "last_quarter_mean": float(tail.mean()),
        "last_quarter_sd": float(tail.std()),
        "last_quarter_slope": float(slope),
        # total drift across the last quarter measured in tail standard deviations
        "last_quarter_drift_sd": float(slope * q / spread),
        "finite": bool(np.all(np.isfinite(x))),
    }
