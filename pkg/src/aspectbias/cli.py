"""Command-line entry point: ``aspectbias {fit,predict,evaluate,simulate,diagnose}``.

Exit codes: 0 success, 1 bad input (one ``error: <Code>: message`` line on
stderr), 2 numerical failure (the line names a state dump), 3 a diagnostic
check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import archive, diagnostics, evaluation, plotting
from .baselines import MODEL_KINDS, fit_baseline, kind_from_name
from .domain import DataError, Hyperparameters, HyperparameterError, RunConfig, evenly_spaced_cutpoints, validate_dataset
from .engine import NumericalError, UnknownEntity, UnknownItem, UnknownUser, predict_many
from .synthetic import fixture_hyperparameters, generate

logger = logging.getLogger("aspectbias")

WORKERS_ENV = "ASPECTBIAS_WORKERS"


class InputError(DataError):
    code = "InputError"


# --------------------------------------------------------------------------- files


def read_ratings(path, num_levels: int, delimiter: str = ","):
    """Read ``user_id, item_id, <aspect columns...>`` with a header row."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None or len(header) < 3 or [h.strip() for h in header[:2]] != ["user_id", "item_id"]:
            raise InputError(f"{path}: header must start with user_id{delimiter}item_id and name at least one aspect")
        aspects = [h.strip() for h in header[2:]]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) < 2:
                raise InputError(f"{path}:{line_no}: too few columns")
            values = []
            for x in row[2:]:
                try:
                    values.append(float(x))
                except ValueError:
                    raise DataError(f"{path}:{line_no}: rating {x!r} is not a number", line=line_no) from None
            rows.append((row[0].strip(), row[1].strip(), values))
    return validate_dataset(rows, num_levels, aspects)


def write_ratings(path, data, delimiter: str = ",") -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["user_id", "item_id", *data.aspect_names])
        for user, item, ratings in data.rows():
            w.writerow([user, item, *ratings])
    return Path(path)


def read_pairs(path, delimiter: str = ","):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["user_id", "item_id"]:
            raise InputError(f"{path}: header must start with user_id{delimiter}item_id")
        return [(r[0].strip(), r[1].strip()) for r in reader if r and any(x.strip() for x in r)]


def _write_table(path, header, rows, delimiter="\t") -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def _f(x) -> str:
    return f"{float(x):.6g}"


# --------------------------------------------------------------------------- configuration


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"{WORKERS_ENV} must be >= 1")
    return n


def _run_config(args) -> RunConfig:
    workers = _workers()
    try:
        return RunConfig(
            seed=args.seed,
            burn_in=args.burn_in,
            num_samples=args.samples,
            thinning=args.thin,
            init_cutpoints=evenly_spaced_cutpoints(args.levels),
            parallel_blocks=workers > 1,
            workers=workers,
            cutpoint_rule=args.cutpoint_rule,
            scan=args.scan,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _hyperparameters(args, num_aspects: int) -> Hyperparameters:
    if getattr(args, "hyperparameters", None):
        try:
            hp = Hyperparameters.from_dict(json.loads(Path(args.hyperparameters).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise InputError(f"cannot read hyperparameters {args.hyperparameters}: {exc}") from None
        if hp.num_aspects != num_aspects:
            raise HyperparameterError(f"hyperparameters are for {hp.num_aspects} aspects, data has {num_aspects}")
        return hp if hp.num_groups == args.groups else hp.with_groups(args.groups)
    return Hyperparameters.default(num_aspects, args.groups)


def _config_dict(args) -> dict:
    skip = {"func", "output", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _out_dir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    data = read_ratings(args.input, args.levels, args.delimiter)
    hp = _hyperparameters(args, data.num_aspects)
    cfg = _run_config(args)
    out = _out_dir(args)
    samples = fit_baseline(args.model, data, hp, cfg)
    model_path = archive.save_archive(out / "model.bin", samples, data)
    retained = set(samples.sweeps.tolist())
    log_path = _write_table(out / "fit_log.tsv", ["sweep", "log_density", "retained"],
                            [(t + 1, repr(float(x)), int(t + 1 in retained)) for t, x in enumerate(samples.log_density)])
    plots = [plotting.plot_trace(samples.log_density, out / "trace.png", cfg.burn_in)]
    if samples.kind.ordinal and samples.c.size:
        plots.append(plotting.plot_category_curves(samples.c.mean(0), out / "category_curves.png"))
    outputs = [model_path, archive.sidecar_path(model_path), log_path, *plots]
    archive.write_manifest(out, "fit", args.seed, _config_dict(args), data, outputs)
    print(f"wrote {model_path} ({len(samples)} samples, {samples.kind.bias_mode} bias)")
    return 0


def cmd_predict(args) -> int:
    samples, meta = archive.load_archive(args.archive)
    pairs = read_pairs(args.input, args.delimiter)
    u_index = {u: k for k, u in enumerate(meta["user_ids"])}
    i_index = {i: k for k, i in enumerate(meta["item_ids"])}
    users = np.array([u_index.get(u, -1) for u, _ in pairs], dtype=np.int64)
    items = np.array([i_index.get(i, -1) for _, i in pairs], dtype=np.int64)
    if args.strict:
        for (u, i), uj, ii in zip(pairs, users, items):
            if uj < 0:
                raise UnknownUser(f"user {u!r} not in the model")
            if ii < 0:
                raise UnknownItem(f"item {i!r} not in the model")
    out = _out_dir(args)
    aspects = meta["aspect_names"]
    pred = predict_many(samples, users, items, mode=args.prediction, strict=args.strict) if pairs else np.zeros((0, len(aspects)))
    pred_path = _write_table(out / "predictions.tsv", ["user_id", "item_id", *aspects],
                             [(u, i, *map(_f, p)) for (u, i), p in zip(pairs, pred)])

    rows = []
    if samples.kind.bias_mode != "none":
        _, m_bar, _ = samples.posterior_mean()
        groups = samples.mode_groups()
        for u in dict.fromkeys(u for u, _ in pairs):
            if u not in u_index:
                continue
            g = int(groups[u_index[u]])
            labels = evaluation.bias_labels(m_bar[g], args.bias_threshold)
            rows += [(u, g, a, _f(b), lab) for a, b, lab in zip(aspects, m_bar[g], labels)]
    label_path = _write_table(out / "bias_labels.tsv", ["user_id", "group", "aspect", "bias", "label"], rows)
    archive.write_manifest(out, "predict", args.seed, _config_dict(args), None, [pred_path, label_path])
    print(f"wrote {pred_path} ({len(pairs)} pairs)")
    return 0


def cmd_evaluate(args) -> int:
    data = read_ratings(args.input, args.levels, args.delimiter)
    hp = _hyperparameters(args, data.num_aspects)
    cfg = _run_config(args)
    out = _out_dir(args)
    kind = kind_from_name(args.model)
    report = evaluation.cross_validate(data, kind, hp, cfg, k=args.folds, split_seed=args.seed, model_name=args.model)
    samples = fit_baseline(kind, data, hp, cfg)
    evaluation.attach_analyses(report, samples, data, args.max_ratings, args.min_gap)
    paths = evaluation.write_report(report, out)

    if kind.ordinal and samples.c.size:
        grid, probs = plotting.category_curves(samples.c.mean(0))
        paths.append(_write_table(out / "category_curves.tsv", ["v", *[f"level{k + 1}" for k in range(probs.shape[1])]],
                                  [(_f(x), *map(_f, p)) for x, p in zip(grid, probs)]))
        paths.append(plotting.plot_category_curves(samples.c.mean(0), out / "category_curves.png"))
    if report.group_biases:
        paths.append(plotting.plot_group_bias(report.group_biases, data.aspect_names, out / "group_bias.png"))
        paths.append(plotting.plot_group_sd(report.group_sd_pairs, out / "group_sd.png"))
    if report.intrinsic_deltas is not None:
        paths.append(plotting.plot_delta_bins(report.intrinsic_deltas, out / "delta_bins.png"))
    archive.write_manifest(out, "evaluate", args.seed, _config_dict(args), data, paths)

    print(f"model\t{args.model}")
    print(f"rmse\t{_f(report.rmse)}")
    print(f"test_loglik\t{_f(report.mean_test_loglik)}")
    print("fcp\t" + "\t".join(_f(x) for x in report.per_aspect_fcp))
    print(f"aspect_ranking_pearson\t{_f(report.aspect_ranking_pearson)}")
    return 0


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    hp = fixture_hyperparameters(args.aspects, args.groups, args.bias_scale, args.quality_scale)
    c = evenly_spaced_cutpoints(args.levels)
    try:
        data, truth = generate(hp, args.users, args.items, args.aspects, args.levels, args.density, c,
                               np.random.default_rng(args.seed), activity=args.activity,
                               min_separation=args.min_separation, max_item_ratings=args.max_item_ratings,
                               affinity=args.affinity)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    aspects = data.aspect_names
    paths = [write_ratings(out / "ratings.csv", data)]
    paths.append(_write_table(out / "truth_groups.tsv", ["user_id", "group"],
                              [(u, int(g)) for u, g in zip(data.user_ids, truth.s_true)]))
    paths.append(_write_table(out / "truth_bias.tsv", ["group", *aspects],
                              [(g, *map(_f, row)) for g, row in enumerate(truth.m_true)]))
    paths.append(_write_table(out / "truth_intrinsic.tsv", ["item_id", *aspects],
                              [(i, *map(_f, row)) for i, row in zip(data.item_ids, truth.z_true)]))
    paths.append(_write_table(out / "truth_cutpoints.tsv", ["k", "cutpoint"],
                              [(k + 1, _f(x)) for k, x in enumerate(truth.c_true)]))
    hp_path = out / "hyperparameters.json"
    hp_path.write_text(json.dumps(hp.to_dict(), indent=2, sort_keys=True) + "\n")
    paths.append(hp_path)
    archive.write_manifest(out, "simulate", args.seed, _config_dict(args), data, paths)
    print(f"wrote {paths[0]} ({data.num_observations} observations)")
    return 0


def cmd_diagnose(args) -> int:
    out = _out_dir(args)
    paths = []
    failed = []
    if args.geweke > 0:
        for scan in ("collapsed", "plain") if args.scan == "both" else (args.scan,):
            checks = diagnostics.geweke_test(args.geweke, args.geweke, seed=args.seed, scan=scan)
            paths.append(_write_table(out / f"geweke_{scan}.tsv",
                                      ["statistic", "forward", "successive", "z_score", "passed"],
                                      [(c.name, _f(c.forward), _f(c.successive), _f(c.z_score), int(c.passed)) for c in checks]))
            failed += [f"geweke[{scan}] {c.name}" for c in checks if not c.passed]
    if args.pg_draws > 0:
        rows = diagnostics.pg_moment_check(n=args.pg_draws, seed=args.seed)
        paths.append(_write_table(out / "pg_moments.tsv", ["c", "mean", "exact", "stderr", "passed"],
                                  [(_f(c), _f(m), _f(e), _f(s), int(p)) for c, m, e, s, p in rows]))
        failed += [f"pg mean c={r[0]}" for r in rows if not r[4]]
        ident = diagnostics.pg_identity_checks(num_mc=max(args.pg_draws // 10, 1000), seed=args.seed)
        paths.append(_write_table(out / "pg_identity.tsv", ["a", "b", "psi", "lhs", "rhs", "stderr", "passed"],
                                  [(*map(_f, r[:6]), int(r[6])) for r in ident]))
        failed += [f"pg identity a={r[0]:.3g}" for r in ident if not r[6]]
    if args.archive:
        samples, _ = archive.load_archive(args.archive)
        stats = diagnostics.trace_statistics(samples.log_density)
        paths.append(_write_table(out / "trace.tsv", ["statistic", "value"], [(k, v) for k, v in stats.items()]))
        paths.append(plotting.plot_trace(samples.log_density, out / "trace.png"))
        if not stats["finite"]:
            failed.append("trace not finite")
    archive.write_manifest(out, "diagnose", args.seed, _config_dict(args), None, paths)
    for name in failed:
        print(f"FAIL {name}")
    print(f"{'FAIL' if failed else 'PASS'}: {len(failed)} failed checks")
    return 3 if failed else 0


# --------------------------------------------------------------------------- parser


def _add_chain_flags(p):
    p.add_argument("--model", choices=list(MODEL_KINDS), default="full")
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--burn-in", type=int, default=300)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--hyperparameters", help="JSON file overriding the default hyperparameters")
    p.add_argument("--cutpoint-rule", choices=["mode", "literal"], default="mode")
    p.add_argument("--scan", choices=["collapsed", "plain"], default="collapsed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aspectbias", description="Ordinal multi-aspect rating model with user-group biases.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", required=True)
        p.add_argument("--output", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--delimiter", default=",")

    p = sub.add_parser("fit", help="fit a model and write an archive")
    common(p)
    _add_chain_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="expected ratings and bias labels for user-item pairs")
    common(p)
    p.add_argument("--archive", required=True, help="model.bin written by fit")
    p.add_argument("--strict", action="store_true", help="fail on users or items missing from the model")
    p.add_argument("--bias-threshold", type=float, default=0.1)
    p.add_argument("--prediction", choices=["marginal", "plugin"], default="marginal")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="k-fold cross-validation plus group and intrinsic-quality analyses")
    common(p)
    _add_chain_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--max-ratings", type=int, default=30)
    p.add_argument("--min-gap", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with its ground truth")
    common(p, needs_input=False)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=50)
    p.add_argument("--aspects", type=int, default=4)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--groups", type=int, default=3)
    p.add_argument("--density", type=float, default=0.2)
    p.add_argument("--bias-scale", type=float, default=2.0)
    p.add_argument("--quality-scale", type=float, default=2.0)
    p.add_argument("--min-separation", type=float, default=2.0)
    p.add_argument("--max-item-ratings", type=int)
    p.add_argument("--activity", choices=["uniform", "powerlaw"], default="uniform")
    p.add_argument("--affinity", type=float, default=1.0,
                   help="how much more likely a user is to rate items whose home group is their own")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="Geweke test, Polya-Gamma checks and trace statistics")
    common(p, needs_input=False)
    p.add_argument("--archive", help="model archive whose log-density trace to summarize")
    p.add_argument("--geweke", type=int, default=20000, help="forward and successive iterations (0 skips)")
    p.add_argument("--scan", choices=["collapsed", "plain", "both"], default="collapsed")
    p.add_argument("--pg-draws", type=int, default=1_000_000, help="draws per PG moment check (0 skips)")
    p.set_defaults(func=cmd_diagnose)
    return parser


def _dump_state(exc: NumericalError, out: Path | None) -> str:
    target = (out or Path.cwd()) / "numerical_failure_state.npz"
    target.parent.mkdir(parents=True, exist_ok=True)
    state = exc.state
    arrays = {} if state is None else {k: np.asarray(v) for k, v in vars(state).items()}
    np.savez(target, **arrays)
    return str(target)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        path = _dump_state(exc, Path(args.output) if getattr(args, "output", None) else None)
        print(f"error: NumericalError: {exc}; state dumped to {path}", file=sys.stderr)
        return 2
    except (DataError, HyperparameterError, archive.ArchiveError, UnknownEntity, ValueError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        message = exc.args[0] if exc.args else str(exc)
        print(f"error: {code}: {' '.join(str(message).split())}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
