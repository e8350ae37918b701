"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the terminal
summary. The file also runs as a script: ``python tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import linear_sum_assignment

from aspectbias.baselines import kind_from_name
from aspectbias.diagnostics import geweke_test, pg_identity_checks, pg_moment_check
from aspectbias.domain import Hyperparameters, RunConfig
from aspectbias.engine import (
    LatentState,
    fit,
    sample_group_bias,
    sample_intrinsic,
    sample_latent_responses,
    sample_niw,
    sample_user_groups,
)
from aspectbias.evaluation import cross_validate, group_sd_analysis, group_sd_fraction, intrinsic_delta_analysis, paired_t_test
from aspectbias.stick_breaking import category_probabilities, in_mode_cell, mode_thresholds, stick_arrays
from aspectbias.synthetic import recovery_fixture, sparse_fixture

from conftest import ACCEPTANCE_RESULTS, make_dataset

pytestmark = pytest.mark.slow


def record(number, title, passed, detail, seconds):
    ACCEPTANCE_RESULTS[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}: {detail} ({seconds:.1f} s)"
    print(ACCEPTANCE_RESULTS[number])
    assert passed, ACCEPTANCE_RESULTS[number]


@pytest.fixture(scope="module")
def recovery():
    data, truth, hp = recovery_fixture(0)
    start = time.perf_counter()
    samples = fit(data, hp, RunConfig(seed=0, burn_in=300, num_samples=200))
    return data, truth, hp, samples, time.perf_counter() - start


# --------------------------------------------------------------------------- 1


def test_criterion_1_polya_gamma_moments():
    start = time.perf_counter()
    moments = pg_moment_check(cs=(0.0, 0.1, 1.0, 4.0), n=1_000_000, seed=0, tolerance=3.0)
    identities = pg_identity_checks(num_triples=20, num_mc=100_000, seed=0, tolerance=3.0)
    secs = time.perf_counter() - start
    worst = max(abs(m - e) / se for _, m, e, se, _ in moments)
    ok = all(r[-1] for r in moments) and all(r[-1] for r in identities) and secs < 30
    detail = (f"max |mean - exact| = {worst:.2f} SE over c in (0, 0.1, 1, 4); "
              f"{sum(r[-1] for r in identities)}/20 identity triples within 3 SE")
    record(1, "Polya-Gamma sampler", ok, detail, secs)


# --------------------------------------------------------------------------- 2


def test_criterion_2_stick_breaking():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_sum = worst_binom = 0.0
    for _ in range(10_000):
        K = int(rng.integers(2, 11))
        c = np.sort(rng.uniform(-8, 8, K - 1))
        if np.any(np.diff(c) <= 0):
            continue
        v = rng.uniform(-12, 12)
        p = category_probabilities(v, c)
        worst_sum = max(worst_sum, abs(p.sum() - 1.0))
        # binomial form: each stick is Binomial(x_k | N_k, sigmoid(c_k - v)); N_k = 0 sticks contribute 1
        r = np.arange(1, K + 1)
        N, kappa = stick_arrays(r, K)
        x = kappa + N / 2
        f = stats.logistic.cdf(c - v)
        binom = np.exp(stats.binom.logpmf(x, N, f).sum(axis=-1))
        worst_binom = max(worst_binom, np.abs(binom - p).max())

    # bracketing: gaps above log 2 keep every level's cell non-empty
    hits = 0
    for _ in range(1000):
        K = int(rng.integers(2, 11))
        c = rng.uniform(-6, 0) + np.concatenate([[0.0], np.cumsum(rng.uniform(np.log(2) + 1e-3, 4.0, K - 2))])
        t = np.concatenate([[c[0] - 10], mode_thresholds(c), [c[-1] + 10]])
        k = int(rng.integers(1, K + 1))
        v = t[k - 1] + rng.uniform(1e-9, 1 - 1e-9) * (t[k] - t[k - 1])
        hits += int(category_probabilities(v, c).argmax() + 1 == k and in_mode_cell(v, k, c))
    secs = time.perf_counter() - start
    ok = worst_sum < 1e-12 and worst_binom < 1e-12 and hits == 1000 and secs < 10
    detail = f"max |sum - 1| = {worst_sum:.1e}, max binomial-form gap = {worst_binom:.1e}, bracketing {hits}/1000"
    record(2, "stick-breaking likelihood", ok, detail, secs)


# --------------------------------------------------------------------------- 3


def _tiny_state():
    """Frozen state: 3 users, 2 items, 2 aspects, 2 groups, correlated B."""
    data = make_dataset([0, 0, 1, 2, 2], [0, 1, 0, 0, 1], [[1, 2], [3, 3], [2, 2], [3, 1], [2, 3]], 3)
    hp = Hyperparameters(
        alpha=np.array([1.0, 2.0]),
        Lambda=np.array([[1.5, 0.3], [0.3, 0.8]]),
        B=np.array([[0.6, 0.2], [0.2, 0.4]]),
        niw_mu0=np.array([0.2, -0.1]), niw_kappa0=1.5, niw_nu0=5.0, niw_Psi0=np.array([[1.2, 0.2], [0.2, 0.9]]),
    )
    state = LatentState(
        z=np.array([[0.3, -0.2], [1.0, 0.4]]),
        m=np.array([[0.5, -0.3], [-0.2, 0.6]]),
        s=np.array([0, 1, 0]),
        v=np.array([[0.9, -0.4], [1.2, 0.3], [0.1, 0.5], [0.6, -0.1], [1.4, 0.0]]),
        omega=np.zeros((5, 2, 2)),
        c=np.array([-0.5, 0.8]),
        mu=np.array([0.1, 0.2]),
        Sigma=np.array([[1.1, 0.3], [0.3, 0.7]]),
        group_counts=np.array([2, 1]),
    )
    return data, hp, state


def _ks_min(draws, means, sds):
    return min(stats.kstest(draws[:, a], stats.norm(means[a], sds[a]).cdf).pvalue for a in range(draws.shape[1]))


def test_criterion_3_conditional_samplers():
    start = time.perf_counter()
    n = 100_000
    rng = np.random.default_rng(0)
    data, hp, st0 = _tiny_state()
    Binv = np.linalg.inv(hp.B)
    pvals = {}

    # group bias m_g: prior N(0, Lambda) times Gaussian rating terms
    st = _tiny_state()[2]
    draws = np.empty((n, 2, 2))
    for t in range(n):
        draws[t] = sample_group_bias(st, data, hp, rng)
    p = []
    for g in range(2):
        rows = np.flatnonzero(st0.s[data.users] == g)
        cov = np.linalg.inv(rows.size * Binv + np.linalg.inv(hp.Lambda))
        mean = cov @ Binv @ (st0.v[rows] - st0.z[data.items[rows]]).sum(axis=0)
        p.append(_ks_min(draws[:, g], mean, np.sqrt(np.diag(cov))))
    pvals["group bias"] = min(p)

    # intrinsic quality z_i: population N(mu, Sigma) times Gaussian rating terms
    st = _tiny_state()[2]
    draws = np.empty((n, 2, 2))
    for t in range(n):
        draws[t] = sample_intrinsic(st, data, hp, rng)
    p = []
    Sinv = np.linalg.inv(st0.Sigma)
    for i in range(2):
        rows = np.flatnonzero(data.items == i)
        cov = np.linalg.inv(rows.size * Binv + Sinv)
        mean = cov @ (Binv @ (st0.v[rows] - st0.m[st0.s[data.users[rows]]]).sum(axis=0) + Sinv @ st0.mu)
        p.append(_ks_min(draws[:, i], mean, np.sqrt(np.diag(cov))))
    pvals["intrinsic"] = min(p)

    # group label of user 0 (updated first) given the others' labels
    counts = np.zeros(2, dtype=np.int64)
    for t in range(n):
        st = _tiny_state()[2]
        sample_user_groups(st, data, hp, rng)
        counts[st.s[0]] += 1
    rows = np.flatnonzero(data.users == 0)
    others = np.bincount(st0.s[1:], minlength=2)
    logp = np.log(others + hp.alpha) + np.array([
        stats.multivariate_normal(np.zeros(2), hp.B).logpdf(st0.v[rows] - st0.z[data.items[rows]] - st0.m[g]).sum()
        for g in range(2)])
    prob = np.exp(logp - logp.max())
    prob /= prob.sum()
    pvals["user group"] = stats.chisquare(counts, n * prob).pvalue

    # population (mu, Sigma): textbook normal-inverse-Wishart update
    st = _tiny_state()[2]
    sig11 = np.empty(n)
    mu1 = np.empty(n)
    for t in range(n):
        sample_niw(st, hp, rng)
        sig11[t], mu1[t] = st.Sigma[0, 0], st.mu[0]
    z = st0.z
    I = z.shape[0]
    zbar = z.mean(axis=0)
    kn, nun = hp.niw_kappa0 + I, hp.niw_nu0 + I
    mun = (hp.niw_kappa0 * hp.niw_mu0 + I * zbar) / kn
    dev = zbar - hp.niw_mu0
    Psin = hp.niw_Psi0 + (z - zbar).T @ (z - zbar) + hp.niw_kappa0 * I / kn * np.outer(dev, dev)
    dof = nun - 2 + 1
    pvals["population"] = min(
        stats.kstest(sig11, stats.invgamma(dof / 2, scale=Psin[0, 0] / 2).cdf).pvalue,
        stats.kstest(mu1, stats.t(dof, mun[0], np.sqrt(Psin[0, 0] / (kn * dof))).cdf).pvalue,
    )

    # latent response with Polya-Gamma variables: A=1, K=2, c=0, r=1, prior N(0, 1)
    N = n
    rdata = make_dataset(np.arange(N), np.zeros(N, int), np.ones((N, 1), int), 2)
    rhp = Hyperparameters(np.ones(1), np.eye(1), np.eye(1), np.zeros(1), 1.0, 3.0, np.eye(1))
    rst = LatentState(z=np.zeros((1, 1)), m=np.zeros((1, 1)), s=np.zeros(N, np.int64), v=np.zeros((N, 1)),
                      omega=np.zeros((N, 1, 1)), c=np.array([0.0]), mu=np.zeros(1), Sigma=np.eye(1),
                      group_counts=np.array([N]))
    for _ in range(30):
        sample_latent_responses(rst, rdata, rhp, rng)
    grid = np.linspace(-10, 10, 40_001)
    dens = np.exp(-grid**2 / 2) * stats.logistic.cdf(-grid)
    cdf = cumulative_trapezoid(dens, grid, initial=0.0)
    cdf /= cdf[-1]
    pvals["latent response"] = stats.kstest(rst.v[:, 0], lambda x: np.interp(x, grid, cdf)).pvalue

    secs = time.perf_counter() - start
    ok = all(p > 0.001 for p in pvals.values()) and secs < 120
    detail = ", ".join(f"{k} p={v:.3f}" for k, v in pvals.items())
    record(3, "full conditionals", ok, detail, secs)


# --------------------------------------------------------------------------- 4


def test_criterion_4_geweke():
    start = time.perf_counter()
    checks = geweke_test(num_forward=20_000, num_successive=20_000, seed=0, J=4, I=3, A=2, K=3, G=2,
                         scan="collapsed", tolerance=4.0)
    secs = time.perf_counter() - start
    worst = max(checks, key=lambda c: abs(c.z_score))
    ok = all(c.passed for c in checks) and secs < 300
    detail = f"{sum(c.passed for c in checks)}/{len(checks)} moments within 4 SE, worst {worst.name} z={worst.z_score:.2f}"
    record(4, "Geweke joint-distribution test", ok, detail, secs)


# --------------------------------------------------------------------------- 5


def _aligned_recovery(samples, truth, G):
    z, m, _ = samples.posterior_mean()
    groups = samples.mode_groups()
    conf = np.zeros((samples.num_groups, G))
    np.add.at(conf, (groups, truth.s_true), 1)
    rows, cols = linear_sum_assignment(-conf)
    accuracy = conf[rows, cols].sum() / groups.size
    # levels are identified only up to a shared per-aspect shift absorbed by the cut-points
    center = lambda x: x - x.mean(axis=0)
    m_corr = np.corrcoef(center(m[rows]).ravel(), center(truth.m_true[cols]).ravel())[0, 1]
    z_corr = np.corrcoef(center(z).ravel(), center(truth.z_true).ravel())[0, 1]
    return accuracy, m_corr, z_corr


def test_criterion_5_posterior_recovery(recovery):
    data, truth, hp, samples, secs = recovery
    acc, m_corr, z_corr = _aligned_recovery(samples, truth, 3)
    ok = acc >= 0.9 and m_corr >= 0.9 and z_corr >= 0.9 and secs < 600
    detail = f"group accuracy {acc:.3f}, bias corr {m_corr:.3f}, intrinsic corr {z_corr:.3f}"
    record(5, "posterior recovery", ok, detail, secs)


# --------------------------------------------------------------------------- 6


def test_criterion_6_model_ordering(recovery):
    data, _, hp, _, _ = recovery
    start = time.perf_counter()
    cfg = RunConfig(seed=0, burn_in=300, num_samples=200)
    ll = {name: cross_validate(data, kind_from_name(name), hp, cfg, k=5, model_name=name).loglik_by_observation()
          for name in ("full", "ordinal-no-bias", "continuous-bias")}
    secs = time.perf_counter() - start
    _, p_nobias = paired_t_test(ll["full"], ll["ordinal-no-bias"])
    _, p_cont = paired_t_test(ll["full"], ll["continuous-bias"])
    means = {k: v.mean() for k, v in ll.items()}
    ok = (means["full"] > means["ordinal-no-bias"] and means["full"] > means["continuous-bias"]
          and p_nobias < 0.01 and p_cont < 0.01 and secs < 1800)
    detail = (f"held-out loglik full {means['full']:.3f} > ordinal-no-bias {means['ordinal-no-bias']:.3f} "
              f"(p={p_nobias:.1e}), > continuous-bias {means['continuous-bias']:.3f} (p={p_cont:.1e})")
    record(6, "model ordering", ok, detail, secs)


# --------------------------------------------------------------------------- 7


def test_criterion_7_group_sd(recovery):
    data, _, _, samples, _ = recovery
    start = time.perf_counter()
    points = group_sd_analysis(samples, data)
    frac = group_sd_fraction(points)
    secs = time.perf_counter() - start
    record(7, "group sd analysis", frac >= 0.6, f"{frac:.3f} of {len(points)} points with group sd <= control sd", secs)


# --------------------------------------------------------------------------- 8


def test_criterion_8_intrinsic_quality():
    data, _, hp = sparse_fixture(0)
    start = time.perf_counter()
    samples = fit(data, hp, RunConfig(seed=0, burn_in=300, num_samples=200))
    res = intrinsic_delta_analysis(samples, data, max_ratings=30, min_gap=0.5)
    secs = time.perf_counter() - start
    gap = res.pearson_int - res.pearson_avg
    ok = data.item_counts().max() <= 10 and gap >= 0.1
    detail = (f"Pearson(obs, int) {res.pearson_int:.3f} - Pearson(obs, avg) {res.pearson_avg:.3f} = {gap:.3f} "
              f"over {len(res)} triples")
    record(8, "intrinsic quality analysis", ok, detail, secs)


# --------------------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path):
    from aspectbias.archive import save_archive

    data, _, hp = recovery_fixture(0)
    start = time.perf_counter()
    blobs = []
    for parallel, workers in ((False, 1), (True, 3), (False, 1), (True, 2)):
        cfg = RunConfig(seed=7, burn_in=20, num_samples=10, parallel_blocks=parallel, workers=workers)
        path = save_archive(tmp_path / f"m{len(blobs)}.bin", fit(data, hp, cfg), data)
        blobs.append(path.read_bytes())
    secs = time.perf_counter() - start
    ok = all(b == blobs[0] for b in blobs)
    record(9, "determinism", ok, f"{len(blobs)} archives (serial and 2-3 workers) byte-identical: {ok}", secs)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
