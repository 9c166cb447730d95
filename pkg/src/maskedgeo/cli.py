"""Command-line interface: simulate, fit, evaluate, study, cpo, plot-data.

Every subcommand exits 0 only when all requested fits succeeded; any
failure produces a machine-readable manifest (failures.json in the output
directory) and a nonzero exit. Exit code 2 marks configuration or input
validation errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fields import gen_covariate, simulate_spacetime_truth
from .fitting import fit_model, predict_risk
from .gmrf import MaternParams
from .grids import GridGeometry, PopulationWeights, block_partition
from .io import (
    GeographyBundle,
    PLOT_KINDS,
    SchemaError,
    emit_plot_data,
    load_geography,
    load_observations,
    report_to_csv,
    save_fit,
    save_geography,
    save_observations,
    save_report,
)
from .metrics import cpo_holdout, rmse
from .model import ModelSpec
from .sampling import apply_masking, draw_observations, place_clusters, unmask
from .study import (
    METHODS,
    consolidate,
    desk_profile,
    paper_profile,
    run_study,
    study_failures,
)

log = logging.getLogger(__name__)

THREADS_ENV = "MASKEDGEO_THREADS"

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2

PROFILES = {"desk": desk_profile, "paper": paper_profile}


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _parse_fixed(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        name, _, value = pair.partition("=")
        if not _ or not name:
            raise SchemaError(f"--fixed expects name=value, got {pair!r}")
        out[name] = float(value)
    return out


def _write_failures(outdir: Path, failures: list) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "failures.json").write_text(json.dumps(failures, indent=1))


def cmd_simulate(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    g = GridGeometry.unit_square(args.grid_size)
    part = block_partition(g, args.strata_side)
    pop = PopulationWeights.uniform(g.n_cells)
    matern = MaternParams(args.rho, args.sigma)
    x = gen_covariate(g, args.covariate, seed=args.seed, matern=matern,
                      partition=part)
    truth = simulate_spacetime_truth(g, 1, matern, None, args.beta0,
                                     args.beta1, x, seed=args.seed + 1)
    locs = place_clusters(pop, part,
                          {k: args.clusters_per_stratum
                           for k in range(part.n_strata)}, seed=args.seed + 2)
    obs = draw_observations(truth, locs, args.n_trials, seed=args.seed + 3,
                            strata=part)
    masked = apply_masking(obs, part, args.masking, args.mask_fraction,
                           seed=args.seed + 4)
    save_geography(GeographyBundle(grid=g, strata=part, pop=pop),
                   outdir / "geography.json")
    save_observations(masked, outdir / "observations.csv")
    np.savez(outdir / "truth.npz", probabilities=truth.probabilities,
             covariate=x.values)
    print(f"wrote geography.json, observations.csv, truth.npz to {outdir}")
    return EXIT_OK


def cmd_fit(args) -> int:
    outdir = Path(args.out)
    bundle = load_geography(args.geography)
    obs = load_observations(args.observations)
    if args.method == "unmasked":
        # only possible when the file carries simulated true locations
        obs = unmask(obs)
    fixed = _parse_fixed(args.fixed) if args.fixed else None
    cov = None
    truth_path = Path(args.geography).with_name("truth.npz")
    if truth_path.exists():
        with np.load(truth_path) as z:
            cov = z["covariate"][None, :]
    try:
        fit = fit_model(ModelSpec(method=args.method), bundle.grid,
                        bundle.strata, obs, pop=bundle.pop, covariates=cov,
                        fixed=fixed, maxfev=args.maxfev)
    except Exception as exc:  # noqa: BLE001 - reported via manifest
        _write_failures(outdir, [{"method": args.method,
                                  "error": f"{type(exc).__name__}: {exc}"}])
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    outdir.mkdir(parents=True, exist_ok=True)
    save_fit(fit, outdir / f"fit_{args.method}.npz")
    pred = predict_risk(fit, n_samples=args.samples, seed=args.seed,
                        ci=(0.025, 0.975))
    np.savez(outdir / f"risk_{args.method}.npz", **pred)
    line = (f"method={args.method} log_marginal={fit.log_marginal:.3f} "
            f"converged={fit.opt_converged}")
    if truth_path.exists():
        with np.load(truth_path) as z:
            line += f" rmse={rmse(pred['mean'][0], z['probabilities'][0]):.4f}"
    print(line)
    return EXIT_OK


def _build_config(args):
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    if args.methods:
        overrides["methods"] = tuple(args.methods)
    if args.replicates:
        overrides["n_replicates"] = args.replicates
    return PROFILES[args.profile](**overrides)


def cmd_study(args) -> int:
    config = _build_config(args)
    workdir = Path(args.workdir)
    results = run_study(config, workdir, n_threads=args.threads,
                        progress=True)
    failures = study_failures(results)
    if failures:
        _write_failures(workdir, failures)
        print(f"{len(failures)} replicates failed; see "
              f"{workdir / 'failures.json'}", file=sys.stderr)
        return EXIT_FAILURES
    report = consolidate(config, results)
    save_report(report, workdir / "report.json")
    report_to_csv(report, workdir / "report.csv")
    print(f"wrote report.json, report.csv to {workdir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    # consolidates a finished (or resumed) study directory without
    # re-running anything beyond missing replicates
    return cmd_study(args)


def cmd_cpo(args) -> int:
    bundle = load_geography(args.geography)
    obs = load_observations(args.observations)
    fixed = _parse_fixed(args.fixed) if args.fixed else None
    n_times = max(r.time for r in obs.all_records) + 1
    try:
        report = cpo_holdout(ModelSpec(method=args.method), bundle.grid,
                             bundle.strata, obs, pop=bundle.pop,
                             n_times=n_times, n_samples=args.samples,
                             seed=args.seed, fixed=fixed,
                             maxfev=args.maxfev)
    except Exception as exc:  # noqa: BLE001 - reported via manifest
        _write_failures(Path(args.out).parent, [
            {"method": args.method, "error": f"{type(exc).__name__}: {exc}"}])
        print(f"cpo failed: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    table = report.as_table()
    with open(args.out, "w") as f:
        json.dump(table, f, indent=1)
    for row in table:
        print(f"year={row['year']} n={row['n_records']} "
              f"log_cpo={row['total_log_cpo']:.2f}")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    config = _build_config(args)
    results = run_study(config, Path(args.workdir), n_threads=args.threads)
    failures = study_failures(results)
    if failures:
        _write_failures(Path(args.workdir), failures)
        return EXIT_FAILURES
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    kinds = PLOT_KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        emit_plot_data(config, results, kind, outdir / f"{kind}.csv")
    print(f"wrote {', '.join(k + '.csv' for k in kinds)} to {outdir}")
    return EXIT_OK


def _add_study_args(p):
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--config", help="JSON file of configuration overrides")
    p.add_argument("--workdir", required=True)
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--replicates", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskedgeo", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one masked survey dataset")
    p.add_argument("--grid-size", type=int, default=30)
    p.add_argument("--strata-side", type=int, default=5)
    p.add_argument("--clusters-per-stratum", type=int, default=4)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--beta0", type=float, default=-2.0)
    p.add_argument("--beta1", type=float, default=2.0)
    p.add_argument("--covariate", default="spatial",
                   choices=("iid", "spatial", "regional"))
    p.add_argument("--n-trials", type=int, default=250)
    p.add_argument("--masking", default="overlap",
                   choices=("overlap", "non_overlap"))
    p.add_argument("--mask-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one method to saved data")
    p.add_argument("--geography", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--method", default="mixture", choices=METHODS)
    p.add_argument("--fixed", nargs="+", metavar="NAME=VALUE",
                   help="pin transformed hyperparameters")
    p.add_argument("--maxfev", type=int, default=80)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("study", help="run or resume a replicated study")
    _add_study_args(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("evaluate",
                       help="consolidate a study directory into reports")
    _add_study_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cpo", help="leave-one-year-out predictive score")
    p.add_argument("--geography", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--method", default="mixture", choices=METHODS)
    p.add_argument("--fixed", nargs="+", metavar="NAME=VALUE")
    p.add_argument("--maxfev", type=int, default=80)
    p.add_argument("--samples", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cpo)

    p = sub.add_parser("plot-data",
                       help="emit long-format plot tables from a study")
    _add_study_args(p)
    p.add_argument("--kind", default="all", choices=("all",) + PLOT_KINDS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_data)

    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
