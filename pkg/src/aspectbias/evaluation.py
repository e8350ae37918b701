"""Held-out metrics, cross-validation and the user-group / intrinsic-quality analyses."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .domain import DataError, Hyperparameters, RatingsDataset, RunConfig
from .engine import ModelKind, PosteriorSamples, fit, observation_log_likelihoods, predict_many
from .stick_breaking import expected_rating

logger = logging.getLogger(__name__)


class TooFewObservations(DataError):
    code = "TooFewObservations"


class NoComparablePairs(ValueError):
    code = "NoComparablePairs"


class NoEvaluablePairs(ValueError):
    code = "NoEvaluablePairs"


# --------------------------------------------------------------------------- splitting


def kfold_split(data: RatingsDataset, k: int, seed: int = 0) -> list[tuple[RatingsDataset, RatingsDataset]]:
    """Shuffle observations (whole user-item rating vectors) into ``k`` folds.

    Returns ``k`` (train, test) pairs; fold sizes differ by at most one.
    """
    n = data.num_observations
    if k < 2:
        raise TooFewObservations(f"need at least 2 folds, got {k}")
    if n < k:
        raise TooFewObservations(f"{n} observations cannot fill {k} folds", observations=n, folds=k)
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    out = []
    for f in range(k):
        test = np.sort(folds[f])
        train = np.sort(np.concatenate([folds[g] for g in range(k) if g != f]))
        out.append((data.subset(train), data.subset(test)))
    return out


# --------------------------------------------------------------------------- metrics


def rmse(predicted, observed) -> tuple[np.ndarray, float]:
    """Per-aspect and pooled root mean squared error."""
    p = np.atleast_2d(np.asarray(predicted, dtype=float))
    o = np.atleast_2d(np.asarray(observed, dtype=float))
    if p.shape != o.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {o.shape}")
    if p.size == 0:
        raise ValueError("no predictions to score")
    sq = (p - o) ** 2
    return np.sqrt(sq.mean(axis=0)), float(np.sqrt(sq.mean()))


def _pair_counts(pred: np.ndarray, obs: np.ndarray) -> tuple[int, int, int]:
    """(concordant, discordant, predicted-tie) counts over pairs with distinct observed values."""
    iu = np.triu_indices(pred.size, 1)
    do = np.sign(obs[:, None] - obs[None, :])[iu]
    dp = np.sign(pred[:, None] - pred[None, :])[iu]
    keep = do != 0
    prod = (do * dp)[keep]
    return int((prod > 0).sum()), int((prod < 0).sum()), int((prod == 0).sum())


def fcp(users, predicted, observed, tie_credit: float = 0.0, per_user: bool = False) -> np.ndarray:
    """Fraction of concordant item pairs per aspect.

    For every user, item pairs whose observed ratings differ are compared by
    predicted order. Predicted ties are counted as pairs earning ``tie_credit``
    (0 by default, 0.5 for half credit). Pair counts are pooled over users
    unless ``per_user`` is set, in which case per-user fractions are averaged.
    Aspects without any comparable pair come out as nan.
    """
    users = np.asarray(users)
    p = np.asarray(predicted, dtype=float)
    o = np.asarray(observed, dtype=float)
    if p.ndim == 1:
        p, o = p[:, None], o[:, None]
    A = p.shape[1]
    order = np.argsort(users, kind="stable")
    bounds = np.flatnonzero(np.diff(users[order])) + 1
    groups = np.split(order, bounds) if users.size else []

    result = np.full(A, np.nan)
    any_pairs = False
    for a in range(A):
        num = den = 0.0
        fractions = []
        for idx in groups:
            if idx.size < 2:
                continue
            conc, disc, ties = _pair_counts(p[idx, a], o[idx, a])
            total = conc + disc + ties
            if total == 0:
                continue
            credit = conc + tie_credit * ties
            num += credit
            den += total
            fractions.append(credit / total)
        if den > 0:
            any_pairs = True
            result[a] = np.mean(fractions) if per_user else num / den
    if not any_pairs:
        raise NoComparablePairs("no user has two items with different observed ratings")
    return result


def aspect_ranking_pearson(predicted, observed) -> float:
    """Mean over user-item pairs of the Pearson correlation between predicted and
    observed aspect ranks (average ranks for ties).

    Pairs whose observed aspects are all equal are skipped; a constant
    prediction against varying observations scores 0.
    """
    p = np.atleast_2d(np.asarray(predicted, dtype=float))
    o = np.atleast_2d(np.asarray(observed, dtype=float))
    if p.shape[1] < 2:
        raise ValueError("ranking needs at least two aspects")
    rp = stats.rankdata(p, axis=1)
    ro = stats.rankdata(o, axis=1)
    rp -= rp.mean(axis=1, keepdims=True)
    ro -= ro.mean(axis=1, keepdims=True)
    so = np.sqrt((ro**2).sum(axis=1))
    sp = np.sqrt((rp**2).sum(axis=1))
    ok = so > 0
    if not ok.any():
        raise NoEvaluablePairs("every pair has identical observed aspect ratings")
    corr = np.zeros(ok.sum())
    nz = sp[ok] > 0
    corr[nz] = (rp[ok][nz] * ro[ok][nz]).sum(axis=1) / (sp[ok][nz] * so[ok][nz])
    return float(np.clip(corr, -1.0, 1.0).mean())


def test_loglik_per_observation(samples: PosteriorSamples, test: RatingsDataset, strict: bool = True,
                                mc_draws: int = 256, seed: int = 0) -> np.ndarray:
    return observation_log_likelihoods(samples, test, strict=strict, mc_draws=mc_draws, seed=seed)


def test_loglik(samples: PosteriorSamples, test: RatingsDataset, hp: Hyperparameters | None = None,
                strict: bool = True, mc_draws: int = 256, seed: int = 0) -> float:
    """Mean over test observations of the log posterior-predictive probability of the rating vector."""
    return float(test_loglik_per_observation(samples, test, strict, mc_draws, seed).mean())


def paired_t_test(a, b) -> tuple[float, float]:
    """One-sided paired t-test of mean(a - b) > 0; returns (t, p)."""
    res = stats.ttest_rel(np.asarray(a, float), np.asarray(b, float), alternative="greater")
    return float(res.statistic), float(res.pvalue)


# --------------------------------------------------------------------------- group analysis


@dataclass(frozen=True)
class GroupSdPoint:
    item: int
    aspect: int
    group: int
    group_sd: float
    control_sd: float
    group_raters: int
    control_raters: int


def group_sd_analysis(samples: PosteriorSamples, data: RatingsDataset, groups: np.ndarray | None = None) -> list[GroupSdPoint]:
    """Rating spread inside each user group against all raters of the same item.

    Users take their most frequent group across samples. One point per
    (item, aspect, group) with at least two group members among the raters;
    sample standard deviations (ddof=1) on both sides.
    """
    if groups is None:
        groups = samples.mode_groups()
    g_obs = groups[data.users]
    points = []
    order = np.argsort(data.items, kind="stable")
    bounds = np.flatnonzero(np.diff(data.items[order])) + 1
    for idx in np.split(order, bounds) if data.num_observations else []:
        if idx.size < 2:
            continue
        item = int(data.items[idx[0]])
        r = data.ratings[idx].astype(float)
        control = r.std(axis=0, ddof=1)
        for g in np.unique(g_obs[idx]):
            members = g_obs[idx] == g
            if members.sum() < 2:
                continue
            within = r[members].std(axis=0, ddof=1)
            for a in range(data.num_aspects):
                points.append(GroupSdPoint(item, a, int(g), float(within[a]), float(control[a]),
                                           int(members.sum()), int(idx.size)))
    return points


def group_sd_fraction(points: list[GroupSdPoint]) -> float:
    """Share of points whose within-group sd does not exceed the control sd."""
    if not points:
        return float("nan")
    return float(np.mean([p.group_sd <= p.control_sd for p in points]))


@dataclass(frozen=True)
class GroupBias:
    group: int
    size: int
    bias: np.ndarray


def group_mean_bias(samples: PosteriorSamples) -> list[GroupBias]:
    """Posterior-mean (label-aligned) bias vector and modal membership count of each group."""
    _, m_bar, _ = samples.posterior_mean()
    sizes = np.bincount(samples.mode_groups(), minlength=samples.num_groups)
    return [GroupBias(g, int(sizes[g]), m_bar[g]) for g in range(samples.num_groups)]


def bias_labels(bias: np.ndarray, threshold: float) -> list[str]:
    """Sign each bias component as positive, negative or neutral (|b| <= threshold)."""
    return ["positive" if b > threshold else "negative" if b < -threshold else "neutral" for b in bias]


# --------------------------------------------------------------------------- intrinsic quality


def intrinsic_ratings(samples: PosteriorSamples) -> np.ndarray:
    """I x A intrinsic quality on the rating scale.

    Ordinal models map the posterior-mean z through the expected rating under
    each retained cut-point sample; continuous models use z directly.
    """
    z_bar = samples.z.mean(axis=0)
    if not samples.kind.ordinal:
        return z_bar
    return expected_rating([z_bar] * len(samples), list(samples.c))


@dataclass
class DeltaBins:
    centers: np.ndarray
    mean_obs: np.ndarray
    counts: np.ndarray


@dataclass
class IntrinsicDeltas:
    """Triples (delta_obs, delta_avg, delta_int) with their correlations and binned curves."""

    triples: np.ndarray
    pearson_int: float
    pearson_avg: float
    bins_int: DeltaBins
    bins_avg: DeltaBins

    def __len__(self) -> int:
        return self.triples.shape[0]


def _bin_means(x: np.ndarray, y: np.ndarray, K: int) -> DeltaBins:
    centers = np.arange(-(K - 1), K, dtype=float)
    edges = np.concatenate([centers - 0.5, [centers[-1] + 0.5]])
    idx = np.clip(np.searchsorted(edges, x, side="left") - 1, 0, centers.size - 1)
    counts = np.bincount(idx, minlength=centers.size)
    sums = np.bincount(idx, weights=y, minlength=centers.size)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return DeltaBins(centers, means, counts)


def _pearson(x, y) -> float:
    if len(x) < 2 or np.std(x) == 0 or np.std(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def intrinsic_delta_analysis(samples: PosteriorSamples, data: RatingsDataset, max_ratings: int = 30,
                             min_gap: float = 0.5, intrinsic: np.ndarray | None = None) -> IntrinsicDeltas:
    """Compare observed rating differences with differences in average rating and in intrinsic quality.

    An (item, aspect) qualifies when the item has fewer than ``max_ratings``
    ratings and its intrinsic quality and average rating differ by at least
    ``min_gap``. For each user and aspect, every pair of qualifying items the
    user rated contributes (delta_obs, delta_avg, delta_int), first item minus
    second in index order.
    """
    if intrinsic is None:
        intrinsic = intrinsic_ratings(samples)
    I, A = data.num_items, data.num_aspects
    counts = data.item_counts()
    r = data.ratings.astype(float)
    sums = np.zeros((I, A))
    np.add.at(sums, data.items, r)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = sums / counts[:, None]
    qualifies = (counts[:, None] > 0) & (counts[:, None] < max_ratings) & (np.abs(intrinsic - avg) >= min_gap)

    rows = []
    order = np.lexsort((data.items, data.users))
    bounds = np.flatnonzero(np.diff(data.users[order])) + 1
    for idx in np.split(order, bounds) if data.num_observations else []:
        if idx.size < 2:
            continue
        items = data.items[idx]
        iu, ju = np.triu_indices(idx.size, 1)
        for a in range(A):
            ok = qualifies[items[iu], a] & qualifies[items[ju], a]
            if not ok.any():
                continue
            i1, i2 = items[iu[ok]], items[ju[ok]]
            rows.append(np.column_stack([
                r[idx[iu[ok]], a] - r[idx[ju[ok]], a],
                avg[i1, a] - avg[i2, a],
                intrinsic[i1, a] - intrinsic[i2, a],
            ]))
    triples = np.concatenate(rows) if rows else np.zeros((0, 3))
    K = data.num_levels
    return IntrinsicDeltas(
        triples=triples,
        pearson_int=_pearson(triples[:, 0], triples[:, 2]),
        pearson_avg=_pearson(triples[:, 0], triples[:, 1]),
        bins_int=_bin_means(triples[:, 2], triples[:, 0], K),
        bins_avg=_bin_means(triples[:, 1], triples[:, 0], K),
    )


# --------------------------------------------------------------------------- cross-validation


@dataclass
class FoldResult:
    fold: int
    test_index: np.ndarray
    predicted: np.ndarray
    observed: np.ndarray
    users: np.ndarray
    loglik: np.ndarray


@dataclass
class EvaluationReport:
    model: str
    per_aspect_rmse: np.ndarray
    rmse: float
    per_aspect_fcp: np.ndarray
    mean_test_loglik: float
    aspect_ranking_pearson: float
    folds: list[FoldResult] = field(default_factory=list)
    group_sd_pairs: list[GroupSdPoint] = field(default_factory=list)
    group_biases: list[GroupBias] = field(default_factory=list)
    intrinsic_deltas: IntrinsicDeltas | None = None
    cutpoints: np.ndarray | None = None
    aspect_names: tuple = ()

    def loglik_by_observation(self) -> np.ndarray:
        """Held-out log-likelihoods in original observation order (for paired tests)."""
        n = sum(f.test_index.size for f in self.folds)
        out = np.empty(n)
        for f in self.folds:
            out[f.test_index] = f.loglik
        return out


def cross_validate(data: RatingsDataset, kind: ModelKind, hp: Hyperparameters, cfg: RunConfig,
                   k: int = 5, split_seed: int = 0, model_name: str = "") -> EvaluationReport:
    """k-fold held-out RMSE, FCP, aspect-ranking correlation and log-likelihood for one model."""
    folds = []
    order = np.random.default_rng(split_seed).permutation(data.num_observations)
    chunks = np.array_split(order, k)
    for f, (train, test) in enumerate(kfold_split(data, k, split_seed)):
        logger.info("fold %d/%d: %d train, %d test", f + 1, k, train.num_observations, test.num_observations)
        samples = fit(train, hp, cfg, kind)
        pred = predict_many(samples, test.users, test.items)
        ll = test_loglik_per_observation(samples, test, seed=cfg.seed)
        folds.append(FoldResult(f, np.sort(chunks[f]), pred, np.asarray(test.ratings), np.asarray(test.users), ll))
    return _aggregate(folds, model_name, data.aspect_names)


def _aggregate(folds: list[FoldResult], model_name: str, aspect_names) -> EvaluationReport:
    pred = np.concatenate([f.predicted for f in folds])
    obs = np.concatenate([f.observed for f in folds])
    users = np.concatenate([f.users for f in folds])
    per_aspect, pooled = rmse(pred, obs)
    try:
        fcps = fcp(users, pred, obs)
    except NoComparablePairs:
        fcps = np.full(obs.shape[1], np.nan)
    try:
        ranking = aspect_ranking_pearson(pred, obs) if obs.shape[1] > 1 else float("nan")
    except NoEvaluablePairs:
        ranking = float("nan")
    ll = np.concatenate([f.loglik for f in folds])
    return EvaluationReport(
        model=model_name,
        per_aspect_rmse=per_aspect,
        rmse=pooled,
        per_aspect_fcp=fcps,
        mean_test_loglik=float(ll.mean()),
        aspect_ranking_pearson=ranking,
        folds=folds,
        aspect_names=tuple(aspect_names),
    )


def attach_analyses(report: EvaluationReport, samples: PosteriorSamples, data: RatingsDataset,
                    max_ratings: int = 30, min_gap: float = 0.5) -> EvaluationReport:
    """Add the full-data group and intrinsic-quality analyses to a cross-validation report."""
    if samples.kind.bias_mode != "none":
        report.group_sd_pairs = group_sd_analysis(samples, data)
        report.group_biases = group_mean_bias(samples)
    report.intrinsic_deltas = intrinsic_delta_analysis(samples, data, max_ratings, min_gap)
    report.cutpoints = samples.c.mean(axis=0) if samples.c.size else None
    return report


# --------------------------------------------------------------------------- report files


def _write(path: Path, header: list[str], rows, delimiter: str) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{float(x):.6g}"


def write_report(report: EvaluationReport, out_dir, delimiter: str = "\t") -> list[Path]:
    """Write the report as delimited tables; returns the written paths.

    metrics.tsv          metric, aspect, value
    loglik.tsv           observation, fold, loglik
    group_sd.tsv         item, aspect, group, group_sd, control_sd, group_raters, control_raters
    group_bias.tsv       group, size, aspect, bias
    intrinsic_deltas.tsv delta_obs, delta_avg, delta_int
    delta_bins.tsv       axis, center, mean_delta_obs, count
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = report.aspect_names or tuple(f"aspect{a + 1}" for a in range(report.per_aspect_rmse.size))
    rows = [("model", "all", report.model)]
    rows += [("rmse", n, _fmt(v)) for n, v in zip(names, report.per_aspect_rmse)]
    rows.append(("rmse", "all", _fmt(report.rmse)))
    rows += [("fcp", n, _fmt(v)) for n, v in zip(names, report.per_aspect_fcp)]
    rows.append(("test_loglik", "all", _fmt(report.mean_test_loglik)))
    rows.append(("aspect_ranking_pearson", "all", _fmt(report.aspect_ranking_pearson)))
    if report.intrinsic_deltas is not None:
        rows.append(("pearson_obs_int", "all", _fmt(report.intrinsic_deltas.pearson_int)))
        rows.append(("pearson_obs_avg", "all", _fmt(report.intrinsic_deltas.pearson_avg)))
    if report.group_sd_pairs:
        rows.append(("group_sd_fraction", "all", _fmt(group_sd_fraction(report.group_sd_pairs))))
    paths = [_write(out / "metrics.tsv", ["metric", "aspect", "value"], rows, delimiter)]

    ll_rows = []
    for f in report.folds:
        ll_rows += [(int(i), f.fold, _fmt(v)) for i, v in zip(f.test_index, f.loglik)]
    ll_rows.sort()
    paths.append(_write(out / "loglik.tsv", ["observation", "fold", "loglik"], ll_rows, delimiter))

    paths.append(_write(
        out / "group_sd.tsv",
        ["item", "aspect", "group", "group_sd", "control_sd", "group_raters", "control_raters"],
        [(p.item, names[p.aspect], p.group, _fmt(p.group_sd), _fmt(p.control_sd), p.group_raters, p.control_raters)
         for p in report.group_sd_pairs],
        delimiter,
    ))
    paths.append(_write(
        out / "group_bias.tsv", ["group", "size", "aspect", "bias"],
        [(g.group, g.size, names[a], _fmt(b)) for g in report.group_biases for a, b in enumerate(g.bias)],
        delimiter,
    ))
    deltas = report.intrinsic_deltas
    paths.append(_write(
        out / "intrinsic_deltas.tsv", ["delta_obs", "delta_avg", "delta_int"],
        [tuple(_fmt(x) for x in row) for row in (deltas.triples if deltas is not None else [])],
        delimiter,
    ))
    bin_rows = []
    if deltas is not None:
        for axis, bins in (("intrinsic", deltas.bins_int), ("average", deltas.bins_avg)):
            bin_rows += [(axis, _fmt(c), _fmt(m), int(n)) for c, m, n in zip(bins.centers, bins.mean_obs, bins.counts)]
    paths.append(_write(out / "delta_bins.tsv", ["axis", "center", "mean_delta_obs", "count"], bin_rows, delimiter))
    return paths
