"""Forward simulation of rating data from the generative model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import Hyperparameters, RatingsDataset
from .engine import draw_niw
from .stick_breaking import category_probabilities, check_cutpoints


@dataclass
class GroundTruth:
    theta: np.ndarray
    m_true: np.ndarray
    s_true: np.ndarray
    z_true: np.ndarray
    c_true: np.ndarray
    v_true: np.ndarray
    mu_true: np.ndarray
    Sigma_true: np.ndarray


def draw_ratings(v: np.ndarray, c, rng: np.random.Generator) -> np.ndarray:
    """Ordinal levels (1-based) drawn from the stick-breaking distribution at each response."""
    p = category_probabilities(v, c)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(v.shape)[..., None]
    return np.minimum((u > cdf).sum(axis=-1), p.shape[-1] - 1) + 1


def _pick_pairs(J, I, density, activity, rng, pair_weight=None):
    total = J * I
    count = int(round(density * total))
    count = min(max(count, 1), total)
    if count == total:
        return np.arange(total)
    if activity == "uniform":
        if pair_weight is None:
            return np.sort(rng.choice(total, size=count, replace=False))
        log_weight = np.zeros(total)
    elif activity == "powerlaw":
        log_weight = np.repeat(np.log(rng.pareto(1.5, size=J) + 1.0), I)
    else:
        raise ValueError(f"unknown activity pattern {activity!r}")
    if pair_weight is not None:
        log_weight = log_weight + np.log(pair_weight).ravel()
    # weighted sampling without replacement via Gumbel top-k
    keys = log_weight + rng.gumbel(size=total)
    return np.sort(np.argpartition(-keys, count - 1)[:count])


def generate(hp: Hyperparameters, J: int, I: int, A: int, K: int, density: float, c_true,
             rng: np.random.Generator, activity: str = "uniform", min_separation: float = 0.0,
             max_item_ratings: int | None = None, affinity: float = 1.0) -> tuple[RatingsDataset, GroundTruth]:
    """Simulate a dataset and the latent values that produced it.

    ``min_separation`` redraws the group offsets until every pair is at least
    that far apart; ``max_item_ratings`` caps the number of raters per item.
    ``affinity`` > 1 gives every item a home group whose members are that many
    times more likely to rate it, so small rater pools are skewed by group.
    Dense indices equal generation order (``u{j}``, ``i{i}``), so users or
    items left without ratings still occupy their slot.
    """
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    if hp.num_aspects != A:
        raise ValueError("hyperparameters do not match the aspect count")
    c_true = check_cutpoints(c_true)
    if c_true.size != K - 1:
        raise ValueError(f"{K} levels need {K - 1} cut-points")
    G = hp.num_groups

    theta = rng.dirichlet(hp.alpha)
    lam_chol = np.linalg.cholesky(hp.Lambda)
    for _ in range(10_000):
        m = rng.standard_normal((G, A)) @ lam_chol.T
        dist = np.sqrt(((m[:, None] - m[None]) ** 2).sum(-1))
        if G == 1 or dist[np.triu_indices(G, 1)].min() >= min_separation:
            break
    else:
        raise ValueError("could not draw group offsets with the requested separation")
    s = rng.choice(G, size=J, p=theta)
    mu, Sigma = draw_niw(hp.niw_mu0, hp.niw_kappa0, hp.niw_nu0, hp.niw_Psi0, rng)
    z = rng.multivariate_normal(mu, Sigma, size=I, method="cholesky")

    pair_weight = None
    if affinity != 1.0:
        if affinity <= 0:
            raise ValueError("affinity must be positive")
        home = rng.integers(0, G, size=I)
        pair_weight = np.where(s[:, None] == home[None, :], affinity, 1.0)
    pairs = _pick_pairs(J, I, density, activity, rng, pair_weight)
    users, items = np.divmod(pairs, I)
    if max_item_ratings is not None:
        order = rng.permutation(users.size)
        rank = np.empty(users.size, dtype=np.int64)
        seen = np.zeros(I, dtype=np.int64)
        for k in order:
            rank[k] = seen[items[k]]
            seen[items[k]] += 1
        keep = rank < max_item_ratings
        users, items = users[keep], items[keep]

    noise = rng.standard_normal((users.size, A)) @ np.linalg.cholesky(hp.B).T
    v = z[items] + m[s[users]] + noise
    r = draw_ratings(v, c_true, rng)

    data = RatingsDataset(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        ratings=r.astype(np.int64),
        num_levels=K,
        user_ids=tuple(f"u{j}" for j in range(J)),
        item_ids=tuple(f"i{i}" for i in range(I)),
        aspect_names=tuple(f"aspect{a + 1}" for a in range(A)),
    )
    truth = GroundTruth(theta, m, s, z, c_true, v, mu, Sigma)
    return data, truth


def fixture_hyperparameters(A: int = 4, G: int = 3, bias_scale: float = 2.0, quality_scale: float = 2.0,
                            concentration: float = 20.0) -> Hyperparameters:
    """Hyperparameters whose latent scale spans the default cut-points (-5, -1, 3, 7)."""
    eye = np.eye(A)
    return Hyperparameters(
        alpha=np.full(G, concentration),
        Lambda=bias_scale**2 * eye,
        B=0.25 * eye,
        niw_mu0=np.ones(A),
        niw_kappa0=1.0,
        niw_nu0=A + 2.0,
        niw_Psi0=quality_scale**2 * eye,
    )


def recovery_fixture(seed: int = 0, J: int = 200, I: int = 50, A: int = 4, K: int = 5, G: int = 3,
                     density: float = 0.2):
    """Well-separated three-group synthetic data for posterior-recovery checks."""
    from .domain import evenly_spaced_cutpoints

    hp = fixture_hyperparameters(A, G)
    c = evenly_spaced_cutpoints(K)
    data, truth = generate(hp, J, I, A, K, density, c, np.random.default_rng(seed), min_separation=2.0)
    return data, truth, hp


def sparse_fixture(seed: int = 0, J: int = 300, I: int = 150, A: int = 4, K: int = 5, G: int = 3,
                   density: float = 0.05, max_item_ratings: int = 10, affinity: float = 5.0):
    """Few raters per item, strongly separated group biases, and group-skewed rater pools:
    the regime where item averages mislead and bias-corrected quality should not."""
    from .domain import evenly_spaced_cutpoints

    hp = fixture_hyperparameters(A, G, bias_scale=3.0)
    c = evenly_spaced_cutpoints(K)
    data, truth = generate(hp, J, I, A, K, density, c, np.random.default_rng(seed), min_separation=4.0,
                           max_item_ratings=max_item_ratings, affinity=affinity)
    return data, truth, hp
