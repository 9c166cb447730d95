"""File formats: geography bundles, observation tables, fits and reports.

All containers are self-describing (a schema version travels with the data)
and round-trip exactly: load(save(x)) == x. Reports embed a hash of the
generating configuration so downstream tables can be traced to their study.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grids import GridGeometry, PopulationWeights, StrataPartition
from .sampling import ObservationSet, Record

__all__ = [
    "SCHEMA_VERSION",
    "GeographyBundle",
    "save_geography",
    "load_geography",
    "save_observations",
    "load_observations",
    "save_fit",
    "load_fit",
    "SavedFit",
    "config_hash",
    "save_report",
    "load_report",
    "report_to_csv",
    "emit_plot_data",
]

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """Raised for version mismatches and integrity violations in files."""


def _check_version(obj: dict, path) -> None:
    got = obj.get("schema_version")
    if got != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema_version {got!r}, "
                          f"this build reads {SCHEMA_VERSION}")


# ---------------------------------------------------------------------------
# geography bundles


@dataclass
class GeographyBundle:
    """Grid, strata (with optional urban/province maps) and population in
    one container."""

    grid: GridGeometry
    strata: StrataPartition
    pop: PopulationWeights

    def validate(self) -> None:
        n = self.grid.n_cells
        s = self.strata.strata_of_cell
        if s.size != n:
            raise SchemaError(f"strata map covers {s.size} cells, "
                              f"grid has {n}")
        bad = np.nonzero(s < 0)[0]
        if bad.size:
            raise SchemaError(f"cell {int(bad[0])} is not covered by any "
                              "stratum")
        if self.pop.n_cells != n:
            raise SchemaError(f"population covers {self.pop.n_cells} cells, "
                              f"grid has {n}")
        self.pop.validate_strata(self.strata)


def save_geography(bundle: GeographyBundle, path) -> None:
    bundle.validate()
    obj = {
        "schema_version": SCHEMA_VERSION,
        "grid": {"n_rows": bundle.grid.n_rows, "n_cols": bundle.grid.n_cols,
                 "cell_size": bundle.grid.cell_size},
        "strata_of_cell": bundle.strata.strata_of_cell.tolist(),
        "population": bundle.pop.weight.tolist(),
    }
    for name in ("urban_of_cell", "province_of_cell"):
        val = getattr(bundle.strata, name)
        if val is not None:
            obj[name] = val.tolist()
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def load_geography(path) -> GeographyBundle:
    obj = json.loads(Path(path).read_text())
    _check_version(obj, path)
    grid = GridGeometry(**obj["grid"])
    strata_map = np.asarray(obj["strata_of_cell"], dtype=np.int64)
    bad = np.nonzero(strata_map < 0)[0]
    if bad.size:
        raise SchemaError(f"{path}: cell {int(bad[0])} is not covered by "
                          "any stratum")
    strata = StrataPartition(
        strata_of_cell=strata_map,
        urban_of_cell=obj.get("urban_of_cell"),
        province_of_cell=obj.get("province_of_cell"),
    )
    bundle = GeographyBundle(grid=grid, strata=strata,
                             pop=PopulationWeights(np.asarray(
                                 obj["population"], dtype=float)))
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# observation tables

_OBS_FIELDS = ("masked", "cell", "stratum", "time", "y", "n", "age", "urban",
               "survey", "cluster", "true_cell")


def save_observations(obs: ObservationSet, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("schema_version", SCHEMA_VERSION))
        w.writerow(_OBS_FIELDS)
        for r in obs.point_records:
            w.writerow((0, r.cell, r.stratum, r.time, r.y, r.n, r.age,
                        r.urban, r.survey, r.cluster, ""))
        for r in obs.masked_records:
            true_cell = obs.true_locations.get(r.cluster, "")
            w.writerow((1, r.cell, r.stratum, r.time, r.y, r.n, r.age,
                        r.urban, r.survey, r.cluster, true_cell))


def load_observations(path) -> ObservationSet:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "schema_version":
        raise SchemaError(f"{path}: missing schema_version header row")
    _check_version({"schema_version": int(rows[0][1])}, path)
    if len(rows) < 2 or tuple(rows[1]) != _OBS_FIELDS:
        raise SchemaError(f"{path}: header row must be "
                          f"{','.join(_OBS_FIELDS)}")
    obs = ObservationSet()
    for line_no, row in enumerate(rows[2:], start=3):
        try:
            vals = dict(zip(_OBS_FIELDS, row))
            masked = int(vals.pop("masked"))
            true_cell = vals.pop("true_cell")
            rec = Record(**{k: int(v) for k, v in vals.items()})
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: row {line_no}: {exc}") from None
        if masked:
            obs.masked_records.append(rec)
            if true_cell != "":
                obs.true_locations[rec.cluster] = int(true_cell)
        else:
            if rec.cell < 0:
                raise SchemaError(f"{path}: row {line_no}: point record "
                                  "without a cell id")
            obs.point_records.append(rec)
    return obs


# ---------------------------------------------------------------------------
# fit artifacts


@dataclass
class SavedFit:
    """The persistent portion of a FitResult."""

    method: str
    hypers: dict
    x_hat: np.ndarray
    log_marginal: float
    opt_converged: bool

    def __eq__(self, other):
        return (isinstance(other, SavedFit)
                and self.method == other.method
                and self.hypers == other.hypers
                and np.array_equal(self.x_hat, other.x_hat)
                and self.log_marginal == other.log_marginal
                and self.opt_converged == other.opt_converged)


def save_fit(fit, path) -> None:
    """Persist a FitResult (or SavedFit) mode, hyperparameters and marginal."""
    if hasattr(fit, "spec"):  # a full FitResult
        saved = SavedFit(
            method=fit.spec.method,
            hypers={n: float(getattr(fit.hypers, n)) for n in fit.hyper_names},
            x_hat=fit.x_hat,
            log_marginal=float(fit.log_marginal),
            opt_converged=bool(fit.opt_converged),
        )
    else:
        saved = fit
    names = sorted(saved.hypers)
    np.savez(path,
             schema_version=np.int64(SCHEMA_VERSION),
             method=np.str_(saved.method),
             hyper_names=np.array(names),
             hyper_values=np.array([saved.hypers[n] for n in names]),
             x_hat=saved.x_hat,
             log_marginal=np.float64(saved.log_marginal),
             opt_converged=np.bool_(saved.opt_converged))


def load_fit(path) -> SavedFit:
    with np.load(path) as z:
        _check_version({"schema_version": int(z["schema_version"])}, path)
        return SavedFit(
            method=str(z["method"]),
            hypers=dict(zip(z["hyper_names"].tolist(),
                            map(float, z["hyper_values"]))),
            x_hat=z["x_hat"],
            log_marginal=float(z["log_marginal"]),
            opt_converged=bool(z["opt_converged"]),
        )


# ---------------------------------------------------------------------------
# metrics reports


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_dict: dict) -> str:
    """Stable short hash of a plain-type configuration dictionary."""
    return hashlib.sha256(_canonical_json(config_dict).encode()).hexdigest()[:16]


def save_report(report: dict, path) -> None:
    """Write a consolidated study report as canonical (byte-stable) JSON."""
    out = {"schema_version": SCHEMA_VERSION,
           "config_hash": config_hash(report["config"]), **report}
    Path(path).write_text(_canonical_json(out))


def load_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    _check_version(report, path)
    stated = report.pop("config_hash")
    report.pop("schema_version")
    if stated != config_hash(report["config"]):
        raise SchemaError(f"{path}: config_hash does not match the embedded "
                          "configuration")
    return report


def report_to_csv(report: dict, path) -> None:
    rows = report["rows"]
    if not rows:
        raise ValueError("report has no rows")
    fields = list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# plot data

PLOT_KINDS = ("pct_increase", "coverage_bias")


def emit_plot_data(config, results: list, kind: str, path) -> None:
    """Long-format plot tables from replicate-level study results.

    pct_increase: one row per (method, covariate kind, range) with the
    median and the 2.5/97.5 percentiles of pct_increase_vs_unmasked over
    replicates. coverage_bias: one row per (method, covariate kind, range)
    with mean coverage and mean bias. An empty result list produces a
    header-only file.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from "
                         f"{PLOT_KINDS}")
    scenarios = {s.index: s for s in config.scenarios}
    by_cell = {}
    for d in results:
        if "error" in d:
            continue
        by_cell.setdefault(d["scenario"], []).append(d)
    for method in config.methods:
        for d in results:
            if "error" not in d and method not in d:
                raise ValueError(f"method {method!r} missing from results")

    rows = []
    for s_idx in sorted(by_cell):
        cell = by_cell[s_idx]
        sc = scenarios[s_idx]
        for method in config.methods:
            base = {"method": method, "covariate_kind": sc.covariate_kind,
                    "range": sc.rho, "n_replicates": len(cell)}
            if kind == "pct_increase":
                vals = np.array([d[method]["pct_increase"] for d in cell])
                lo, med, hi = np.percentile(vals, [2.5, 50.0, 97.5])
                base.update(median=med, pct_2_5=lo, pct_97_5=hi)
            else:
                for f in ("coverage", "bias"):
                    vals = np.array([d[method][f] for d in cell])
                    base[f"mean_{f}"] = vals.mean()
            rows.append(base)

    headers = {"pct_increase": ("method", "covariate_kind", "range",
                                "n_replicates", "median", "pct_2_5",
                                "pct_97_5"),
               "coverage_bias": ("method", "covariate_kind", "range",
                                 "n_replicates", "mean_coverage",
                                 "mean_bias")}[kind]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=headers)
        w.writeheader()
        w.writerows(rows)
