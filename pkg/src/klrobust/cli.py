"""Command line front end: ``estimate``, ``simulate``, ``benchmark`` and ``curve``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import stats

from .core import (
    Claim,
    ConvergenceError,
    Dataset,
    DimensionError,
    DiscreteDistribution,
    KLRobustError,
    NotAbsolutelyContinuousError,
    kl_discrete,
)
from .gmm import _plugin_inference, estimate_robustness, Theta
from .learners import DEFAULT_FOLDS, DEFAULT_TRIM, LearnerSpec, fit_predict_crossfit, make_folds
from .simulate import DgpSpec, population_delta_oracle, run_mc
from .solver import concentration_profile, lambda_curve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
_MISSING = {"", "na", "nan", "null"}


class DataError(KLRobustError, ValueError):
    """Input file problems: missing columns, bad cells, non-binary treatment."""


@dataclass
class LoadInfo:
    rows_read: int
    rows_dropped: int
    columns: tuple


def _read_table(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
            header = [h.strip() for h in header]
            rows = [row for row in reader if row]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    return header, rows


def _column(header, name):
    try:
        return header.index(name)
    except ValueError:
        raise DataError(f"column not found: {name}") from None


def _parse_float(cell, col, row):
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"non-numeric value {cell!r} in column {col} at row {row}") from None


def load_csv(path, outcome, treatment, covariates=None, categorical=(), extra=()):
    """Read an experiment from CSV.

    ``covariates=None`` uses every column other than the outcome, the
    treatment and ``extra``. Categorical covariates are one-hot encoded with
    one indicator per observed level (sorted). Rows with a missing cell in a
    selected column are dropped. ``extra`` columns are parsed and returned
    separately (used for moment functions and CATE columns).

    Returns:
        tuple: ``(Dataset, LoadInfo, extra_matrix)``.
    """
    header, rows = _read_table(path)
    categorical = tuple(categorical or ())
    extra = tuple(extra or ())
    if covariates is None:
        skip = {outcome, treatment, *extra}
        covariates = [h for h in header if h not in skip]
    covariates = list(covariates)
    for name in [outcome, treatment, *covariates, *categorical, *extra]:
        _column(header, name)
    unknown_cat = [c for c in categorical if c not in covariates]
    if unknown_cat:
        raise DataError(f"categorical columns are not covariates: {unknown_cat}")
    selected = [outcome, treatment, *covariates, *extra]
    idx = {name: _column(header, name) for name in selected}

    kept = []
    for i, row in enumerate(rows, start=2):
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        if any(row[idx[name]].strip().lower() in _MISSING for name in selected):
            continue
        kept.append((i, row))
    if not kept:
        raise DataError(f"{path}: no complete rows")

    y = np.array([_parse_float(r[idx[outcome]], outcome, i) for i, r in kept])
    d = np.array([_parse_float(r[idx[treatment]], treatment, i) for i, r in kept])
    bad = np.flatnonzero((d != 0) & (d != 1))
    if bad.size:
        i = kept[int(bad[0])][0]
        raise DataError(f"treatment must be binary; row {i} has {d[bad[0]]:g}")

    blocks, names = [], []
    for c in covariates:
        cells = [r[idx[c]].strip() for _, r in kept]
        if c in categorical:
            levels = sorted(set(cells))
            for lv in levels:
                blocks.append(np.array([cell == lv for cell in cells], dtype=float))
                names.append(f"{c}={lv}")
        else:
            blocks.append(np.array([_parse_float(r[idx[c]], c, i) for i, r in kept]))
            names.append(c)
    if not blocks:
        raise DataError("no covariate columns selected")
    x = np.column_stack(blocks)
    ex = np.column_stack([[_parse_float(r[idx[c]], c, i) for i, r in kept] for c in extra]) if extra else None
    try:
        data = Dataset(x, d, y, names)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return data, LoadInfo(len(rows), len(rows) - len(kept), tuple(names)), ex


def _split(text):
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def difference_in_means(data: Dataset):
    """``(ate, se)`` from the two-sample difference in means."""
    t, c = data.y[data.d == 1], data.y[data.d == 0]
    if t.size < 2 or c.size < 2:
        raise DataError("each arm needs at least two units")
    ate = float(t.mean() - c.mean())
    se = math.sqrt(t.var(ddof=1) / t.size + c.var(ddof=1) / c.size)
    return ate, se


def resolve_tau_tilde(text, data: Dataset, direction: str):
    """Literal threshold or ``z:<alpha>``, meaning ``±z_{1-alpha}`` times the ATE standard error."""
    text = str(text).strip()
    if text.lower().startswith("z:"):
        try:
            alpha = float(text[2:])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad tau-tilde {text!r}") from None
        if not 0 < alpha < 1:
            raise argparse.ArgumentTypeError("alpha in z:<alpha> must lie in (0, 1)")
        _, se = difference_in_means(data)
        z = float(stats.norm.ppf(1 - alpha))
        value = z * se if direction == "geq" else -z * se
        return value, {"form": "z", "alpha": alpha, "se_ate": se}
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tau-tilde {text!r}") from None
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError("tau-tilde must be finite")
    return value, {"form": "literal"}


def _learner_spec(args):
    hp = {}
    if getattr(args, "n_trees", None) is not None:
        if args.learner == "linear":
            raise argparse.ArgumentTypeError("--n-trees does not apply to the linear learner")
        hp["n_trees"] = args.n_trees
    return LearnerSpec(args.learner, hp, seed=args.seed)


def _write_atomic(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _emit(text, out):
    if out:
        _write_atomic(out, text)
    else:
        sys.stdout.write(text)


def report_schema() -> dict:
    return json.loads(resources.files("klrobust").joinpath("report_schema.json").read_text("utf-8"))


def _fmt(v, spec=".4f"):
    return "n/a" if v is None else format(v, spec)


def report_markdown(rep: dict) -> str:
    """Markdown rendering of a JSON report."""
    c = rep["claim"]
    sym = ">=" if c["direction"] == "geq" else "<="
    lines = [
        "# Robustness report",
        "",
        f"Claim: ATE {sym} {c['tau_tilde']:.6g}  ",
        f"Status: {rep['status']}  ",
        f"n = {rep['n']}, alpha = {rep['alpha']}",
        "",
        "| quantity | value |",
        "|---|---|",
        f"| ATE (AIPW) | {_fmt(rep['ate_hat'])} |",
        f"| delta* | {_fmt(rep['delta_star_hat'])} |",
        f"| SE | {_fmt(rep['se_delta'])} |",
        f"| one-sided lower bound | {_fmt(rep['lower_bound'])} |",
    ]
    th = rep["theta_hat"]
    if th is not None:
        lines.append(f"| nu | {th['nu']:.6f} |")
        lines.append(f"| lambda | {th['lambda']:.6f} |")
    if rep["plugin"] is not None:
        lines.append(f"| delta* (plug-in) | {rep['plugin']['delta_star']:.4f} |")
    z = rep["zeta"]
    if z is not None:
        lines += ["", "| least favorable moment | estimate | SE |", "|---|---|---|"]
        for lab, e, s in zip(z["labels"], z["estimates"], z["se"]):
            lines.append(f"| {lab} | {e:.4f} | {s:.4f} |")
    lines += ["", "| diagnostic | value |", "|---|---|"]
    for k, v in rep["diagnostics"].items():
        lines.append(f"| {k} | {v} |")
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    zeta_cols = _split(args.zeta_cols) or []
    data, info, u = load_csv(
        args.input, args.outcome, args.treatment, _split(args.covariates), _split(args.categorical) or (),
        extra=zeta_cols,
    )
    tau_tilde, tt_info = resolve_tau_tilde(args.tau_tilde, data, args.claim)
    claim = Claim(args.claim, tau_tilde)
    spec = _learner_spec(args)
    try:
        plan = make_folds(data.n, args.folds, data.d, args.seed)
        cate = fit_predict_crossfit(data, spec, plan, args.trim, n_jobs=args.n_jobs)
    except ValueError as exc:
        raise DataError(f"cross-fitting: {exc}") from exc
    rep = estimate_robustness(
        data, cate, claim, alpha=args.alpha, zeta_u=u, zeta_labels=zeta_cols or None,
    )
    out = rep.to_dict()
    out["input"] = {
        "rows_read": info.rows_read,
        "rows_dropped": info.rows_dropped,
        "covariates": list(info.columns),
        "tau_tilde": tt_info,
        "learner": spec.kind.value,
        "folds": args.folds,
        "trim": args.trim,
        "seed": args.seed,
    }
    if args.format == "json":
        text = json.dumps(out, indent=2) + "\n"
    else:
        text = report_markdown(out)
    _emit(text, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = DgpSpec(f"DGP{args.dgp}", n=args.n, k=args.k, seed=args.seed)
    learner = None if args.oracle else _learner_spec(args)
    pop = population_delta_oracle(spec.id, args.tau_tilde)
    result = run_mc(
        spec, args.m, learner, args.tau_tilde, K=args.folds, trim_eps=args.trim, n_jobs=args.n_jobs,
        population_delta=pop,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    _write_atomic(os.path.join(args.out_dir, "mc.csv"), result.to_csv())
    _write_atomic(os.path.join(args.out_dir, "mc.md"), result.to_markdown())
    print(f"population delta*: {pop!r}")
    print(result.to_markdown(), end="")
    return EXIT_OK


def _bin_columns(exp_rows, tgt_rows, continuous, bins):
    """Replace continuous columns by pooled-quantile bin labels."""
    exp_out = [list(r) for r in exp_rows]
    tgt_out = [list(r) for r in tgt_rows]
    for j in continuous:
        pooled = np.array([r[j] for r in exp_rows] + [r[j] for r in tgt_rows], dtype=float)
        edges = np.unique(np.quantile(pooled, np.linspace(0, 1, bins + 1)[1:-1]))
        for rows, out in ((exp_rows, exp_out), (tgt_rows, tgt_out)):
            vals = np.array([r[j] for r in rows], dtype=float)
            for r, b in zip(out, np.searchsorted(edges, vals, side="right")):
                r[j] = f"bin{int(b)}"
    return [tuple(r) for r in exp_out], [tuple(r) for r in tgt_out]


def benchmark_kl(experimental, target, columns, continuous=(), bins=10) -> float:
    """``KL(target || experimental)`` over the discretized shared covariates."""
    cols = list(columns)
    tables = []
    for path in (experimental, target):
        header, rows = _read_table(path)
        idx = [_column(header, c) for c in cols]
        parsed = []
        for i, row in enumerate(rows, start=2):
            cells = [row[k].strip() for k in idx]
            if any(c.lower() in _MISSING for c in cells):
                continue
            for j, c in enumerate(cols):
                if c in continuous:
                    cells[j] = _parse_float(cells[j], c, i)
            parsed.append(tuple(cells))
        if not parsed:
            raise DataError(f"{path}: no complete rows")
        tables.append(parsed)
    cont_idx = [cols.index(c) for c in continuous]
    exp_rows, tgt_rows = _bin_columns(tables[0], tables[1], cont_idx, bins)
    support = sorted(set(exp_rows) | set(tgt_rows))
    labels = ["|".join(map(str, s)) for s in support]

    def dist(rows):
        counts = {s: 0 for s in support}
        for r in rows:
            counts[r] += 1
        return DiscreteDistribution.from_counts(labels, [counts[s] for s in support])

    return kl_discrete(dist(tgt_rows), dist(exp_rows))


def cmd_benchmark(args) -> int:
    columns = _split(args.columns)
    continuous = _split(args.continuous) or []
    missing = [c for c in continuous if c not in columns]
    if missing:
        raise argparse.ArgumentTypeError(f"continuous columns must be among --columns: {missing}")
    kl = benchmark_kl(args.experimental, args.target, columns, continuous, args.bins)
    lines = [f"KL(target || experimental) = {kl!r}"]
    if args.report:
        with open(args.report, encoding="utf-8") as fh:
            rep = json.load(fh)
        delta = rep.get("delta_star_hat")
        if delta is None:
            lines.append("report has no finite delta*; the claim cannot be overturned by covariate shift")
        elif delta > kl:
            lines.append(
                f"delta* = {delta!r} exceeds the target divergence; the claim plausibly extrapolates to the target"
            )
        else:
            lines.append(
                f"delta* = {delta!r} does not exceed the target divergence; extrapolation is not supported"
            )
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def curve_rows(tau, grid, alpha=0.05):
    """Rows ``(tau_tilde, lambda, delta*, lower, feasible)`` with the ATE point added."""
    tau = np.asarray(tau, dtype=float)
    ate = float(np.mean(tau))
    grid = [float(g) for g in grid]
    if len(set(grid)) < len(grid):
        warnings.warn("duplicate grid points removed", UserWarning, stacklevel=2)
    pts = sorted(set(grid) | {ate})
    rows = []
    for p in lambda_curve(tau, pts):
        if not p.feasible:
            rows.append((p.tau_tilde, math.nan, math.nan, math.nan, False))
            continue
        theta = Theta(math.exp(-p.delta_star), p.lambda_)
        try:
            _, inf = _plugin_inference(tau, p.tau_tilde, theta, alpha)
            lower = inf.lower_bound
        except KLRobustError:
            lower = math.nan
        rows.append((p.tau_tilde, p.lambda_, p.delta_star, lower, True))
    return rows


def cmd_curve(args) -> int:
    extra = [args.tau_column] if args.tau_column else []
    data, _, ex = load_csv(args.input, args.outcome, args.treatment, _split(args.covariates),
                           _split(args.categorical) or (), extra=extra)
    if args.tau_column:
        tau = ex[:, 0]
    else:
        spec = _learner_spec(args)
        plan = make_folds(data.n, args.folds, data.d, args.seed)
        tau = fit_predict_crossfit(data, spec, plan, args.trim, n_jobs=args.n_jobs).tau_hat
    grid = [float(g) for g in _split(args.grid)]
    rows = curve_rows(tau, grid, args.alpha)
    buf = ["tau_tilde,lambda,delta_star,lower_bound,feasible"]
    for r in rows:
        buf.append(",".join([repr(r[0]), repr(r[1]), repr(r[2]), repr(r[3]), str(r[4]).lower()]))
    _emit("\n".join(buf) + "\n", args.out)
    if args.concentration:
        feasible = [r[0] for r in rows if r[4]]
        prof = concentration_profile(tau, data.x, feasible, args.radius)
        lines = ["tau_tilde,mass_near_peak"]
        for row in prof.rows:
            lines.append(",".join(repr(float(v)) for v in row))
        target = (args.out + ".concentration.csv") if args.out else None
        _emit("\n".join(lines) + "\n", target)
    return EXIT_OK


def _add_data_args(p):
    p.add_argument("--input", required=True)
    p.add_argument("--outcome", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--covariates", help="comma separated; default all other columns")
    p.add_argument("--categorical", help="comma separated covariates to one-hot encode")


def _add_learner_args(p):
    p.add_argument("--learner", choices=["forest", "boosting", "linear"], default="forest")
    p.add_argument("--n-trees", type=int)
    p.add_argument("--folds", type=int, default=DEFAULT_FOLDS)
    p.add_argument("--trim", type=float, default=DEFAULT_TRIM)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="klrobust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="robustness of a claim on an experimental CSV")
    _add_data_args(p)
    _add_learner_args(p)
    p.add_argument("--claim", choices=["geq", "leq"], default="geq")
    p.add_argument("--tau-tilde", required=True, help="number or z:<alpha>")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--zeta-cols", help="columns whose least favorable means are reported")
    p.add_argument("--out")
    p.add_argument("--format", choices=["json", "md"], default="json")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="Monte Carlo study on a synthetic design")
    p.add_argument("--dgp", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--tau-tilde", type=float, default=1.3)
    p.add_argument("--oracle", action="store_true", help="use the true nuisances")
    _add_learner_args(p)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="KL divergence of a target population from the experiment")
    p.add_argument("--experimental", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--columns", required=True)
    p.add_argument("--continuous", help="columns binned by pooled quantiles")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--report", help="JSON report from estimate to compare against")
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("curve", help="lambda and delta* over a grid of thresholds")
    _add_data_args(p)
    _add_learner_args(p)
    p.add_argument("--grid", required=True, help="comma separated thresholds")
    p.add_argument("--tau-column", help="read CATE values from this column instead of estimating")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--concentration", action="store_true")
    p.add_argument("--radius", type=float, default=0.1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_curve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"klrobust: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, NotAbsolutelyContinuousError) as exc:
        print(f"klrobust: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, KLRobustError, np.linalg.LinAlgError) as exc:
        print(f"klrobust: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"klrobust: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
