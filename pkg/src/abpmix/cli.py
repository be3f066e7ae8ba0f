"""Command-line surface.

Subcommands: fit, compare, profiles, band, simulate.  Exit codes:
0 success, 2 usage/validation error, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import blup, dataio, inference, serialize, svg
from .basis import TimeGrid
from .errors import AbpmixError
from .estimation import MixedModelProblem

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGED = 3


def _g17(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fit_one(spec, cohort, args):
    problem = MixedModelProblem(spec, cohort)
    return problem.fit(method=args.method.upper(), tol=args.tol, max_iter=args.max_iter)


def _fixed_effects_rows(fitted):
    rows = []
    # inference refuses non-converged fits; diagnostics still get the
    # estimates and standard errors, just no p-values or R2
    if fitted.converged:
        tests = {j: res for j, _, res in inference.per_column_tests(fitted)}
        _, partials = inference.r2_statistics(fitted)
        partial_by_label = dict(partials)
    else:
        tests, partial_by_label = {}, {}
    se = np.sqrt(np.diag(fitted.cov_beta))
    degree_of = {}
    for j, label in enumerate(fitted.column_labels[: fitted.spec.fixed.n_columns]):
        degree_of[label] = j
    for j, label in enumerate(fitted.column_labels):
        deg = degree_of.get(label, "")
        r2 = partial_by_label.get(label, "")
        res = tests.get(j)
        rows.append(
            [
                label,
                deg,
                _g17(fitted.beta_hat[j]),
                _g17(se[j]),
                _g17(res.p_value) if res is not None else "",
                _g17(r2) if r2 != "" else "",
            ]
        )
    return rows


def _cmd_fit(args) -> int:
    spec = serialize.load_model_spec(args.model)
    cohort = dataio.read_cohort(args.data, outcome=args.outcome)
    fitted = _fit_one(spec, cohort, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(serialize.fitted_model_to_json(fitted), encoding="utf-8")
    _write_csv(
        out / "fixed_effects.csv",
        ["parameter", "degree", "estimate", "se", "p_value", "semi_partial_r2"],
        _fixed_effects_rows(fitted),
    )
    _write_csv(
        out / "variance_components.csv",
        ["component", "estimate", "se"],
        [
            [name, _g17(est), _g17(se) if np.isfinite(se) else ""]
            for name, est, se in inference.variance_component_table(fitted)
        ],
    )
    if not fitted.converged:
        print(f"non-convergence: gradient_norm={fitted.gradient_norm:.3e}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _cmd_compare(args) -> int:
    if len(args.model) < 2:
        print("error: need >= 2 models to compare", file=sys.stderr)
        return EXIT_USAGE
    cohort = dataio.read_cohort(args.data, outcome=args.outcome)
    results = []
    fits = []
    for path in args.model:
        try:
            spec = serialize.load_model_spec(path)
            fitted = _fit_one(spec, cohort, args)
            fits.append(fitted)
            aic, bic = inference.information_criteria(fitted)
            model_r2 = inference.r2_statistics(fitted)[0] if fitted.converged else np.nan
            results.append(
                {
                    "model": Path(path).stem,
                    "aic": aic,
                    "bic": bic,
                    "model_r2": model_r2,
                    "converged": fitted.converged,
                    "n_cov_params": fitted.n_cov_params,
                    "error": "",
                }
            )
        except AbpmixError as exc:
            results.append(
                {
                    "model": Path(path).stem,
                    "aic": np.inf,
                    "bic": np.inf,
                    "model_r2": np.nan,
                    "converged": False,
                    "n_cov_params": -1,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
    if not any(r["error"] == "" for r in results):
        print("error: every model failed to fit", file=sys.stderr)
        return EXIT_USAGE
    inference.assert_comparable(fits, force_reml_compare=args.force_reml_compare)
    results.sort(key=lambda r: (r["aic"], r["n_cov_params"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in results:
        rows.append(
            [
                r["model"],
                _g17(r["aic"]) if np.isfinite(r["aic"]) else "",
                _g17(r["bic"]) if np.isfinite(r["bic"]) else "",
                _g17(r["model_r2"]) if np.isfinite(r["model_r2"]) else "",
                str(r["converged"]).lower(),
                r["n_cov_params"] if r["n_cov_params"] >= 0 else "",
                r["error"],
            ]
        )
    _write_csv(
        out / "comparison.csv",
        ["model", "aic", "bic", "model_r2", "converged", "n_cov_params", "error"],
        rows,
    )
    return EXIT_OK


def _plot_rows(times, label, values, lower=None, upper=None):
    rows = []
    for i, t in enumerate(times):
        lo = _g17(lower[i]) if lower is not None else ""
        hi = _g17(upper[i]) if upper is not None else ""
        rows.append([_g17(t), label, _g17(values[i]), lo, hi])
    return rows


def _eval_grid(args) -> TimeGrid:
    return TimeGrid.equispaced(args.grid_points, 0.0, 24.0)


def _cmd_profiles(args) -> int:
    fitted = serialize.load_fitted_model(args.fit)
    cohort = dataio.read_cohort(args.data, outcome=args.outcome)
    fitted.attach_data(cohort)
    grid = _eval_grid(args)
    subject_ids = [s for s in (args.subjects.split(",") if args.subjects else []) if s]
    known = {s.id for s in cohort}
    for sid in subject_ids:
        if sid not in known:
            print(f"error: unknown subject id {sid!r}", file=sys.stderr)
            return EXIT_USAGE

    def profile_for(sid):
        return blup.subject_profile(fitted, cohort.subject(sid), grid)

    if args.workers > 1 and subject_ids:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            profiles = list(pool.map(profile_for, subject_ids))
    else:
        profiles = [profile_for(sid) for sid in subject_ids]
    pop = blup.population_curve(fitted, grid)
    band = blup.prediction_band(fitted, grid, level=args.band_level,
                                multiplier=args.band_multiplier)
    rows = []
    for prof in profiles:
        rows += _plot_rows(grid.points, f"subject:{prof.subject_id}", prof.values)
    rows += _plot_rows(grid.points, "population", pop.values)
    rows += _plot_rows(grid.points, "band", band.center, band.lower, band.upper)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "profiles.csv", ["time", "series", "value", "lower", "upper"], rows)
    if args.svg:
        series = [(f"subject:{p.subject_id}", p.values) for p in profiles]
        series.append(("population", pop.values))
        text = svg.render_plot(
            grid.points, series, band=(band.lower, band.upper),
            start_hour=args.start_hour, title="predicted profiles",
        )
        (out / "profiles.svg").write_text(text, encoding="utf-8")
    return EXIT_OK


def _cmd_band(args) -> int:
    cohort = dataio.read_cohort(args.data, outcome=args.outcome)
    if args.fit:
        fitted = serialize.load_fitted_model(args.fit)
        fitted.attach_data(cohort)
    else:
        if not args.thresholds or not args.model:
            print("error: band needs either --fit or both --model and --thresholds",
                  file=sys.stderr)
            return EXIT_USAGE
        thresholds = serialize.load_thresholds(args.thresholds)
        normals = dataio.filter_normals(cohort, thresholds)
        spec = serialize.load_model_spec(args.model)
        fitted = _fit_one(spec, normals, args)
        if not fitted.converged:
            print(f"non-convergence: gradient_norm={fitted.gradient_norm:.3e}", file=sys.stderr)
            return EXIT_NONCONVERGED
    grid = _eval_grid(args)
    pop = blup.population_curve(fitted, grid)
    band = blup.prediction_band(fitted, grid, level=args.band_level,
                                multiplier=args.band_multiplier)
    rows = _plot_rows(grid.points, "population", pop.values)
    rows += _plot_rows(grid.points, "band", band.center, band.lower, band.upper)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "band.csv", ["time", "series", "value", "lower", "upper"], rows)
    if args.svg:
        text = svg.render_plot(
            grid.points, [("population", pop.values)], band=(band.lower, band.upper),
            start_hour=args.start_hour, title="prediction band",
        )
        (out / "band.svg").write_text(text, encoding="utf-8")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = serialize.load_simulation_config(args.config)
    if args.seed is not None:
        import dataclasses

        config = dataclasses.replace(config, seed=args.seed)
    cohort = dataio.simulate_cohort(config, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_cohort(out / "cohort.csv", cohort, outcome=args.outcome)
    return EXIT_OK


def _add_common(parser, data=True, fitopts=False, plot=False):
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--outcome", choices=["sbp", "dbp"], default="sbp")
    parser.add_argument("--workers", type=int, default=1)
    if data:
        parser.add_argument("--data", required=True, help="cohort CSV")
    if fitopts:
        parser.add_argument("--method", choices=["reml", "ml"], default="reml")
        parser.add_argument("--tol", type=float, default=1e-6)
        parser.add_argument("--max-iter", type=int, default=500)
    if plot:
        parser.add_argument("--band-level", type=float, default=0.90)
        parser.add_argument("--band-multiplier", type=float, default=None,
                            help="override the normal quantile (e.g. 2.0)")
        parser.add_argument("--grid-points", type=int, default=97)
        parser.add_argument("--start-hour", type=int, default=None,
                            help="clock hour of recording start, for axis labels")
        parser.add_argument("--svg", action="store_true", help="also render an SVG")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abpmix",
        description="Mixed-model analysis of 24-hour ambulatory blood pressure cohorts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model and write estimates")
    p.add_argument("--model", required=True, help="model spec JSON")
    _add_common(p, fitopts=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("compare", help="fit several models and rank by AIC")
    p.add_argument("--model", action="append", required=True,
                   help="model spec JSON (repeat for each candidate)")
    p.add_argument("--force-reml-compare", action="store_true",
                   help="allow REML criteria across different fixed structures")
    _add_common(p, fitopts=True)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("profiles", help="subject profiles + population curve + band")
    p.add_argument("--fit", required=True, help="fit.json from a previous run")
    p.add_argument("--subjects", default="", help="comma-separated subject ids")
    _add_common(p, plot=True)
    p.set_defaults(func=_cmd_profiles)

    p = sub.add_parser("band", help="prediction band from a reference cohort")
    p.add_argument("--fit", default=None, help="reuse an existing fit.json")
    p.add_argument("--model", default=None, help="model spec JSON (fit on normals)")
    p.add_argument("--thresholds", default=None, help="per-hour normal bounds JSON")
    _add_common(p, fitopts=True, plot=True)
    p.set_defaults(func=_cmd_band)

    p = sub.add_parser("simulate", help="draw a synthetic cohort")
    p.add_argument("--config", required=True, help="simulation config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    _add_common(p, data=False)
    p.set_defaults(func=_cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except AbpmixError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
