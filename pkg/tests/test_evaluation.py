import numpy as np
import pytest

from aspectbias import engine
from aspectbias.domain import Hyperparameters, RunConfig
from aspectbias.engine import ModelKind
from aspectbias.evaluation import (
    EvaluationReport,
    NoComparablePairs,
    NoEvaluablePairs,
    TooFewObservations,
    aspect_ranking_pearson,
    bias_labels,
    cross_validate,
    fcp,
    group_sd_analysis,
    group_sd_fraction,
    intrinsic_delta_analysis,
    kfold_split,
    paired_t_test,
    rmse,
    test_loglik as mean_test_loglik,
    write_report,
)

from conftest import make_dataset


def ten_observations():
    users, items = np.divmod(np.arange(10), 5)
    return make_dataset(users, items, (np.arange(20).reshape(10, 2) % 5) + 1, 5)


def fake_samples(z, m, s, c, K, B=0.25):
    """Single-draw posterior built by hand."""
    z, m = np.asarray(z, float), np.asarray(m, float)
    A = z.shape[1]
    hp = Hyperparameters(np.ones(m.shape[0]), np.eye(A), B * np.eye(A), np.zeros(A), 1.0, A + 2.0, np.eye(A))
    return engine.PosteriorSamples(
        z=z[None], m=m[None], s=np.asarray(s, np.int64)[None], c=np.asarray(c, float)[None],
        mu=np.zeros((1, A)), Sigma=np.eye(A)[None], log_density=np.zeros(1), sweeps=np.ones(1, int),
        hp=hp, kind=ModelKind(True, "group"), num_levels=K)


# --------------------------------------------------------------------------- folds


def test_kfold_partitions_whole_observations():
    data = ten_observations()
    folds = kfold_split(data, 5, seed=3)
    tests = [set(zip(t.users.tolist(), t.items.tolist())) for _, t in folds]
    assert [len(t) for t in tests] == [2] * 5
    assert set().union(*tests) == set(zip(data.users.tolist(), data.items.tolist()))
    for (train, test), pairs in zip(folds, tests):
        assert pairs.isdisjoint(zip(train.users.tolist(), train.items.tolist()))
        assert train.num_observations + test.num_observations == 10


def test_kfold_same_seed_same_folds():
    data = ten_observations()
    a = [t.users.tolist() + t.items.tolist() for _, t in kfold_split(data, 5, seed=1)]
    b = [t.users.tolist() + t.items.tolist() for _, t in kfold_split(data, 5, seed=1)]
    assert a == b


def test_kfold_errors():
    data = ten_observations()
    with pytest.raises(TooFewObservations):
        kfold_split(data, 11)
    with pytest.raises(TooFewObservations):
        kfold_split(data, 1)


# --------------------------------------------------------------------------- rmse


def test_rmse_examples():
    per, pooled = rmse([[3.5]], [[3]])
    assert pooled == pytest.approx(0.5) and per[0] == pytest.approx(0.5)
    obs = np.array([[1, 2], [3, 4]])
    assert rmse(obs, obs)[1] == 0.0
    per, pooled = rmse([[1.0, 2.0], [2.0, 5.0]], obs)
    assert pooled == pytest.approx(np.sqrt(np.mean(per**2)))
    with pytest.raises(ValueError):
        rmse(np.zeros((0, 2)), np.zeros((0, 2)))


def test_rmse_shift_formula():
    rng = np.random.default_rng(0)
    obs = rng.integers(1, 6, size=(50, 3))
    pred = obs + rng.normal(0, 0.7, size=obs.shape)
    base = rmse(pred, obs)[1]
    err = (pred - obs).mean()
    for delta in (-0.8, 0.3, 2.0):
        assert rmse(pred + delta, obs)[1] == pytest.approx(np.sqrt(base**2 + delta**2 + 2 * delta * err), rel=1e-12)


# --------------------------------------------------------------------------- fcp


def test_fcp_examples():
    users = [0, 0, 0]
    assert fcp(users, [1.0, 2.0, 3.0], [1, 2, 3])[0] == 1.0
    assert fcp(users, [3.0, 2.0, 1.0], [1, 2, 3])[0] == 0.0
    assert fcp(users, [1.1, 3.0, 2.0], [1, 2, 3])[0] == pytest.approx(2 / 3)


def test_fcp_pools_counts_over_users():
    # user 0: 1 of 1 concordant; user 1: 1 of 3 concordant
    users = [0, 0, 1, 1, 1]
    pred = [1.0, 2.0, 3.0, 1.0, 2.0]
    obs = [1, 2, 1, 2, 3]
    assert fcp(users, pred, obs)[0] == pytest.approx(2 / 4)
    assert fcp(users, pred, obs, per_user=True)[0] == pytest.approx((1 + 1 / 3) / 2)


def test_fcp_ties_and_exclusions():
    users = [0, 0, 0]
    # observed tie between the first two items is excluded; predicted tie earns tie_credit
    assert fcp(users, [1.0, 1.0, 2.0], [1, 2, 3])[0] == pytest.approx(2 / 3)
    assert fcp(users, [1.0, 1.0, 2.0], [1, 2, 3], tie_credit=0.5)[0] == pytest.approx(2.5 / 3)
    # observed tie (2, 2) excluded, leaving one discordant and one concordant pair
    assert fcp(users, [5.0, 1.0, 2.0], [2, 2, 3])[0] == pytest.approx(0.5)


def test_fcp_per_aspect_and_errors():
    users = [0, 0]
    out = fcp(users, [[1.0, 1.0], [2.0, 0.0]], [[1, 3], [2, 3]])
    assert out[0] == 1.0 and np.isnan(out[1])
    with pytest.raises(NoComparablePairs):
        fcp([0, 1], [1.0, 2.0], [1, 2])


# --------------------------------------------------------------------------- ranking


def test_ranking_pearson_examples():
    assert aspect_ranking_pearson([[1.0, 2.0, 3.0, 4.0]], [[2, 3, 4, 5]]) == pytest.approx(1.0)
    assert aspect_ranking_pearson([[4.0, 3.0, 2.0, 1.0]], [[2, 3, 4, 5]]) == pytest.approx(-1.0)
    # the constant observed row is skipped
    assert aspect_ranking_pearson([[1.0, 2, 3, 4], [4.0, 3, 2, 1]], [[4, 4, 4, 4], [1, 2, 3, 4]]) == pytest.approx(-1.0)
    with pytest.raises(NoEvaluablePairs):
        aspect_ranking_pearson([[1.0, 2.0]], [[3, 3]])
    with pytest.raises(ValueError):
        aspect_ranking_pearson([[1.0]], [[1]])


def test_ranking_pearson_uses_average_ranks_for_ties():
    # observed ranks (1.5, 1.5, 3) against predicted (1, 2, 3)
    expected = np.corrcoef([1, 2, 3], [1.5, 1.5, 3])[0, 1]
    assert aspect_ranking_pearson([[0.1, 0.2, 0.9]], [[2, 2, 5]]) == pytest.approx(expected)


# --------------------------------------------------------------------------- log-likelihood


def test_loglik_symmetric_two_level_case():
    s = fake_samples([[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], [0], [0.0], 2, B=1e-10)
    data = make_dataset([0, 0], [0, 0], [[1, 2, 1], [2, 2, 2]], 2)
    assert mean_test_loglik(s, data) == pytest.approx(3 * np.log(0.5), abs=1e-6)


def test_loglik_mean_is_unchanged_by_duplicating_a_representative():
    s = fake_samples([[0.3, -0.4]], [[0.2, 0.0]], [0, 0], [-1.0, 1.0], 3)
    data = make_dataset([0, 1], [0, 0], [[1, 2], [3, 2]], 3)
    base = mean_test_loglik(s, data)
    # an extra observation whose log-likelihood equals the current mean cannot move it;
    # doubling the whole set is the exact version of that
    doubled = make_dataset([0, 1, 0, 1], [0, 0, 0, 0], [[1, 2], [3, 2], [1, 2], [3, 2]], 3)
    assert mean_test_loglik(s, doubled) == pytest.approx(base, rel=1e-12)


def test_paired_t_test_direction():
    rng = np.random.default_rng(0)
    b = rng.normal(size=200)
    t, p = paired_t_test(b + 0.5 + rng.normal(size=200), b)
    assert t > 0 and p < 1e-4
    t, p = paired_t_test(b - 0.5 + rng.normal(size=200), b)
    assert p > 0.99


# --------------------------------------------------------------------------- group analyses


def test_group_sd_single_group_matches_control():
    data = make_dataset([0, 1, 2, 0, 1], [0, 0, 0, 1, 1], [[1, 2], [3, 5], [5, 1], [2, 2], [4, 2]], 5)
    points = group_sd_analysis(None, data, groups=np.zeros(3, dtype=int))
    assert len(points) == 4
    for p in points:
        assert p.group_sd == p.control_sd
    assert group_sd_fraction(points) == 1.0


def test_group_sd_identical_raters_fall_below_control():
    # users 0 and 1 (group 0) agree; user 2 (group 1) disagrees
    data = make_dataset([0, 1, 2], [0, 0, 0], [[4], [4], [1]], 5)
    points = group_sd_analysis(None, data, groups=np.array([0, 0, 1]))
    assert len(points) == 1
    p = points[0]
    assert p.group_sd == 0.0 and p.control_sd == pytest.approx(np.std([4, 4, 1], ddof=1))
    assert (p.group_raters, p.control_raters) == (2, 3)


def test_group_sd_empty_and_fraction_of_nothing():
    data = make_dataset([0], [0], [[3]], 5)
    assert group_sd_analysis(None, data, groups=np.zeros(1, dtype=int)) == []
    assert np.isnan(group_sd_fraction([]))


def test_bias_labels():
    assert bias_labels(np.array([0.5, -0.05, -0.3, 0.1]), 0.1) == ["positive", "neutral", "negative", "neutral"]


# --------------------------------------------------------------------------- intrinsic quality


def test_intrinsic_delta_zero_bin():
    # both items share intrinsic quality 3 while their averages sit far from it
    data = make_dataset([0, 0], [0, 1], [[1], [5]], 5)
    d = intrinsic_delta_analysis(None, data, intrinsic=np.array([[3.0], [3.0]]))
    assert len(d) == 1
    np.testing.assert_allclose(d.triples[0], [-4.0, -4.0, 0.0])
    zero = list(d.bins_int.centers).index(0.0)
    assert d.bins_int.counts[zero] == 1 and d.bins_int.mean_obs[zero] == -4.0


def test_intrinsic_delta_filters():
    data = make_dataset([0, 0, 1, 1], [0, 1, 0, 1], [[1], [5], [2], [4]], 5)
    intr = np.array([[3.0], [3.0]])
    assert len(intrinsic_delta_analysis(None, data, max_ratings=2, intrinsic=intr)) == 0
    # item 1's average 4.5 is within 0.5 of an intrinsic 4.2, so no pair qualifies
    assert len(intrinsic_delta_analysis(None, data, intrinsic=np.array([[3.0], [4.2]]))) == 0
    assert len(intrinsic_delta_analysis(None, data, intrinsic=intr)) == 2


# --------------------------------------------------------------------------- cross-validation and reports


@pytest.fixture(scope="module")
def small_report():
    from aspectbias.synthetic import recovery_fixture

    data, _, hp = recovery_fixture(0, J=40, I=12, density=0.4)
    cfg = RunConfig(seed=0, burn_in=15, num_samples=10)
    return data, cross_validate(data, ModelKind(True, "none"), hp, cfg, k=3, model_name="ordinal-no-bias")


def test_cross_validate_populates_metrics(small_report):
    data, rep = small_report
    assert isinstance(rep, EvaluationReport)
    A = data.num_aspects
    assert rep.per_aspect_rmse.shape == (A,) and np.all(rep.per_aspect_rmse >= 0)
    assert rep.per_aspect_fcp.shape == (A,) and np.all((rep.per_aspect_fcp >= 0) & (rep.per_aspect_fcp <= 1))
    assert -1 <= rep.aspect_ranking_pearson <= 1
    assert np.isfinite(rep.mean_test_loglik) and rep.mean_test_loglik < 0
    assert sum(f.test_index.size for f in rep.folds) == data.num_observations
    assert rep.loglik_by_observation().shape == (data.num_observations,)


def test_write_report_files(small_report, tmp_path):
    _, rep = small_report
    paths = write_report(rep, tmp_path)
    names = {p.name for p in paths}
    assert {"metrics.tsv", "loglik.tsv"} <= names
    header = (tmp_path / "metrics.tsv").read_text().splitlines()[0].split("\t")
    assert header == ["metric", "aspect", "value"]
