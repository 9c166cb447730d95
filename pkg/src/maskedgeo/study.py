"""Replicated simulation studies comparing the masking methods.

A study is a grid of scenario cells (spatial range x covariate kind), each
replicated with independent seeds. Every replicate simulates one truth,
draws and masks one survey, fits all requested methods, and records
cell-level error metrics. Per-replicate results are written to small npz
files so a crashed run resumes where it stopped, and the consolidated
report is deterministic in the root seed regardless of worker threads.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from .fields import gen_covariate, simulate_spacetime_truth
from .fitting import fit_model, predict_risk
from .gmrf import MaternParams
from .grids import GridGeometry, PopulationWeights, block_partition
from .likelihood import build_design
from .metrics import bias, coverage, pct_increase_vs_unmasked, rmse
from .model import Hyperparameters, ModelSpec
from .sampling import apply_masking, draw_observations, place_clusters, unmask

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "ScenarioCell",
    "desk_profile",
    "paper_profile",
    "run_replicate",
    "run_study",
    "study_failures",
    "consolidate",
    "config_dict",
]

METHODS = ("unmasked", "ignore", "resample", "ecological", "mixture")

# purpose codes for per-replicate child seeds; appending to this list is
# safe, reordering is not (it changes every simulated draw)
SEED_PURPOSES = ("covariate", "truth", "clusters", "observations", "masking",
                 "resample", "posterior")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one simulation study."""

    name: str
    grid_size: int
    rhos: tuple
    covariate_kinds: tuple
    n_strata_side: int
    clusters_per_stratum: int
    n_trials: int
    n_replicates: int
    methods: tuple = METHODS
    sigma: float = 1.0
    beta0: float = -2.0
    beta1: float = 2.0
    masking: str = "overlap"
    mask_fraction: float = 0.5
    root_seed: int = 20260823
    maxfev: int = 25
    xatol: float = 0.02
    n_posterior_samples: int = 200
    ci: tuple = (0.025, 0.975)

    def __post_init__(self):
        if self.grid_size < 2 or self.n_strata_side < 1:
            raise ValueError("degenerate geometry")
        if self.n_replicates < 1:
            raise ValueError("need at least one replicate")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if "unmasked" not in self.methods:
            raise ValueError("the unmasked reference method is required")

    @property
    def scenarios(self) -> list:
        return [ScenarioCell(index=i, rho=r, covariate_kind=k)
                for i, (r, k) in enumerate(product(self.rhos,
                                                   self.covariate_kinds))]

    @property
    def n_clusters(self) -> int:
        return self.n_strata_side**2 * self.clusters_per_stratum


@dataclass(frozen=True)
class ScenarioCell:
    index: int
    rho: float
    covariate_kind: str

    @property
    def label(self) -> str:
        return f"rho={self.rho:g},x={self.covariate_kind}"


def desk_profile(**overrides) -> ExperimentConfig:
    """Small study sized for a workstation run within tens of minutes."""
    base = dict(name="desk", grid_size=30, rhos=(0.3, 0.5),
                covariate_kinds=("iid", "spatial"), n_strata_side=5,
                clusters_per_stratum=4, n_trials=250, n_replicates=50)
    base.update(overrides)
    return ExperimentConfig(**base)


def paper_profile(**overrides) -> ExperimentConfig:
    """Full-size study matching the published experiment scale."""
    base = dict(name="paper", grid_size=60, rhos=(0.3, 0.5),
                covariate_kinds=("iid", "spatial"), n_strata_side=5,
                clusters_per_stratum=12, n_trials=250, n_replicates=50)
    base.update(overrides)
    return ExperimentConfig(**base)


def _child_seeds(config: ExperimentConfig, scenario: int, rep: int) -> dict:
    """Independent named integer seeds for one replicate, stable under the
    root seed and addressed by (scenario, replicate, purpose)."""
    out = {}
    for code, purpose in enumerate(SEED_PURPOSES):
        ss = np.random.SeedSequence(config.root_seed,
                                    spawn_key=(scenario, rep, code))
        out[purpose] = int(ss.generate_state(1)[0])
    return out


def _task_path(workdir: Path, scenario: int, rep: int) -> Path:
    return workdir / "partial" / f"s{scenario:03d}_r{rep:04d}.npz"


def run_replicate(config: ExperimentConfig, scenario: ScenarioCell,
                  rep: int) -> dict:
    """Simulate one dataset and fit every method; returns per-method metrics."""
    seeds = _child_seeds(config, scenario.index, rep)
    g = GridGeometry.unit_square(config.grid_size)
    part = block_partition(g, config.n_strata_side)
    pop = PopulationWeights.uniform(g.n_cells)
    matern = MaternParams(scenario.rho, config.sigma)
    x = gen_covariate(g, scenario.covariate_kind, seed=seeds["covariate"],
                      matern=matern, partition=part)
    truth = simulate_spacetime_truth(g, 1, matern, None, config.beta0,
                                     config.beta1, x, seed=seeds["truth"])
    locs = place_clusters(pop, part,
                          {k: config.clusters_per_stratum
                           for k in range(part.n_strata)},
                          seed=seeds["clusters"])
    obs = draw_observations(truth, locs, config.n_trials,
                            seed=seeds["observations"], strata=part)
    masked = apply_masking(obs, part, config.masking, config.mask_fraction,
                           seed=seeds["masking"])

    p_true = truth.probabilities[0]
    out = {"scenario": scenario.index, "replicate": rep}
    start_hypers = None
    plugin_hypers = None
    for method in config.methods:
        data = unmask(masked) if method == "unmasked" else masked
        t0 = time.perf_counter()
        # the mixture's own Laplace marginal is biased toward long ranges
        # (the mode commits each masked record to one candidate cell, which
        # distorts the curvature term), so its hyperparameters are pinned at
        # the point-location estimate from the same masked data
        fixed = plugin_hypers if method == "mixture" else None
        fit = fit_model(ModelSpec(method=method), g, part, data, pop=pop,
                        covariates=x.values[None, :],
                        resample_seed=seeds["resample"],
                        start=start_hypers, maxfev=config.maxfev,
                        xatol=config.xatol, fixed=fixed)
        if method == "unmasked":
            # later methods start the hyperparameter search from the
            # unmasked optimum of the same data, saving most evaluations
            start_hypers = fit.hypers
        if method == "ignore":
            plugin_hypers = {n: float(getattr(fit.hypers, n))
                             for n in fit.hyper_names}
        pred = predict_risk(fit, n_samples=config.n_posterior_samples,
                            seed=seeds["posterior"], ci=config.ci)
        out[method] = {
            "rmse": rmse(pred["mean"][0], p_true),
            "bias": bias(pred["mean"][0], p_true),
            "coverage": coverage(pred["lower"][0], pred["upper"][0], p_true),
            "log_marginal": fit.log_marginal,
            "converged": float(fit.opt_converged),
            "seconds": time.perf_counter() - t0,
        }
    for method in config.methods:
        out[method]["pct_increase"] = pct_increase_vs_unmasked(
            out[method]["rmse"], out["unmasked"]["rmse"])
    return out


_FIELDS = ("rmse", "bias", "coverage", "pct_increase", "log_marginal",
           "converged", "seconds")
# wall time is recorded per replicate but kept out of consolidated reports,
# which must be byte-identical across reruns and thread counts
_REPORT_FIELDS = _FIELDS[:-1]


def _save_task(path: Path, result: dict, config: ExperimentConfig) -> None:
    arrays = {"scenario": np.int64(result["scenario"]),
              "replicate": np.int64(result["replicate"])}
    for method in config.methods:
        arrays[method] = np.array([result[method][f] for f in _FIELDS])
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _load_task(path: Path, config: ExperimentConfig) -> dict | None:
    try:
        with np.load(path) as z:
            out = {"scenario": int(z["scenario"]),
                   "replicate": int(z["replicate"])}
            for method in config.methods:
                out[method] = dict(zip(_FIELDS, map(float, z[method])))
        return out
    except (OSError, KeyError, ValueError):
        return None


def run_study(config: ExperimentConfig, workdir, n_threads: int = 1,
              progress: bool = False) -> list:
    """Run (or resume) every replicate of every scenario cell.

    Tasks are independent and deterministically seeded, so the set of
    partial files — and the consolidated report built from them — is
    identical for any thread count. Returns the full result list sorted by
    (scenario, replicate).
    """
    workdir = Path(workdir)
    tasks = [(s, r) for s in config.scenarios
             for r in range(config.n_replicates)]

    def run_one(task):
        scenario, rep = task
        path = _task_path(workdir, scenario.index, rep)
        cached = _load_task(path, config) if path.exists() else None
        if cached is not None:
            return cached
        try:
            result = run_replicate(config, scenario, rep)
        except Exception as exc:  # noqa: BLE001 - recorded, not swallowed
            log.warning("failed scenario=%d rep=%d: %s", scenario.index, rep,
                        exc)
            return {"scenario": scenario.index, "replicate": rep,
                    "error": f"{type(exc).__name__}: {exc}"}
        _save_task(path, result, config)
        if progress:
            log.info("done scenario=%d rep=%d", scenario.index, rep)
        return result

    if n_threads <= 1:
        results = [run_one(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run_one, tasks))
    return sorted(results, key=lambda d: (d["scenario"], d["replicate"]))


def study_failures(results: list) -> list:
    """Failure entries recorded by run_study, one dict per failed replicate."""
    return sorted((d for d in results if "error" in d),
                  key=lambda d: (d["scenario"], d["replicate"]))


def consolidate(config: ExperimentConfig, results: list) -> dict:
    """Aggregate replicate metrics into one report dictionary.

    The report has one row per (scenario, method) with replicate means, and
    is a plain nested structure of str/float/int so serialization is
    byte-stable.
    """
    failed = study_failures(results)
    if failed:
        raise ValueError(f"{len(failed)} replicates failed, e.g. {failed[:2]}")
    expected = {(s.index, r) for s in config.scenarios
                for r in range(config.n_replicates)}
    got = {(d["scenario"], d["replicate"]) for d in results}
    missing = expected - got
    if missing:
        raise ValueError(f"{len(missing)} replicates missing, e.g. "
                         f"{sorted(missing)[:3]}")
    scenarios = {s.index: s for s in config.scenarios}
    rows = []
    for s_idx in sorted(scenarios):
        cell = [d for d in results if d["scenario"] == s_idx]
        for method in config.methods:
            row = {"scenario": s_idx, "rho": scenarios[s_idx].rho,
                   "covariate_kind": scenarios[s_idx].covariate_kind,
                   "method": method,
                   "n_replicates": len(cell)}
            for f in _REPORT_FIELDS:
                vals = np.array([d[method][f] for d in cell])
                row[f"mean_{f}"] = float(vals.mean())
                row[f"sd_{f}"] = float(vals.std(ddof=1)) if len(cell) > 1 else 0.0
            rows.append(row)
    return {"config": config_dict(config), "rows": rows}


def config_dict(config: ExperimentConfig) -> dict:
    """Plain-type view of the configuration for hashing and reports."""
    out = {}
    for k, v in vars(config).items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out
