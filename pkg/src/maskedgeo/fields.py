"""Covariate, latent and true risk fields for the simulation studies.

Risk fields follow logit(p) = beta0 + beta1 * x + u cellwise, with u one
draw from a Matern GMRF (or its separable space-time extension) and x one of
three standardized covariate kinds: iid, spatially correlated, or constant
on declared regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .gmrf import (
    Ar1Params,
    MaternParams,
    build_ar1_precision,
    build_matern_precision,
    kronecker_precision,
    sample_gmrf,
)
from .grids import GridGeometry, StrataPartition

__all__ = [
    "CovariateField",
    "RiskField",
    "gen_covariate",
    "build_risk_field",
    "simulate_spacetime_truth",
]

COVARIATE_KINDS = ("iid", "spatial", "regional")


@dataclass(frozen=True)
class CovariateField:
    """Per-cell covariate values, standardized to mean 0 / variance 1.

    `degenerate` flags the single-region regional case where standardization
    is impossible and the field is all zeros instead.
    """

    kind: str
    values: np.ndarray
    generator_seed: int
    degenerate: bool = False


@dataclass(frozen=True)
class RiskField:
    """True cellwise event probabilities with their generating components.

    `probabilities` has shape (n_times, n_cells); the components reconstruct
    it exactly via expit(beta0 + beta1 * covariate + latent).
    """

    probabilities: np.ndarray
    beta0: float
    beta1: float
    covariate: CovariateField
    latent: np.ndarray

    @property
    def n_times(self) -> int:
        return self.probabilities.shape[0]

    @property
    def n_cells(self) -> int:
        return self.probabilities.shape[1]

    def logits(self) -> np.ndarray:
        return logit(self.probabilities)


def _standardize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    sd = values.std()
    if sd == 0.0:
        return np.zeros_like(values), True
    out = (values - values.mean()) / sd
    # re-center once more so the mean is zero to machine precision
    return out - out.mean(), False


def gen_covariate(
    grid: GridGeometry,
    kind: str,
    seed: int,
    matern: MaternParams | None = None,
    partition: StrataPartition | None = None,
) -> CovariateField:
    """Generate one standardized covariate field of the requested kind.

    iid: independent standard normals per cell. spatial: one Matern GMRF
    draw (requires `matern`). regional: one normal per region of `partition`
    broadcast to its cells. All outputs are standardized over cells; a
    single-region partition degenerates to all zeros with a flag.
    """
    if kind not in COVARIATE_KINDS:
        raise ValueError(f"unknown covariate kind {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "iid":
        raw = rng.standard_normal(grid.n_cells)
    elif kind == "spatial":
        if matern is None:
            raise ValueError("spatial covariate requires matern parameters")
        q = build_matern_precision(grid, matern)
        raw = sample_gmrf(q, seed=seed, n_samples=1)[0]
    else:
        if partition is None:
            raise ValueError("regional covariate requires a partition")
        if partition.n_cells != grid.n_cells:
            raise ValueError("partition does not cover the grid")
        per_region = rng.standard_normal(partition.n_strata)
        raw = per_region[partition.strata_of_cell]
    values, degenerate = _standardize(raw)
    return CovariateField(kind=kind, values=values, generator_seed=seed,
                          degenerate=degenerate)


def build_risk_field(
    beta0: float, beta1: float, x: CovariateField, u: np.ndarray
) -> RiskField:
    """Cellwise expit of beta0 + beta1 * x + u.

    `u` may be (n_cells,) for a single period or (n_times, n_cells).
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[None, :]
    if u.shape[1] != x.values.size:
        raise ValueError(
            f"latent field has {u.shape[1]} cells, covariate has {x.values.size}"
        )
    eta = beta0 + beta1 * x.values[None, :] + u
    return RiskField(probabilities=expit(eta), beta0=beta0, beta1=beta1,
                     covariate=x, latent=u)


def simulate_spacetime_truth(
    grid: GridGeometry,
    n_times: int,
    matern: MaternParams,
    ar1: Ar1Params | None,
    beta0: float,
    beta1: float,
    x: CovariateField,
    seed: int,
) -> RiskField:
    """One separable space-time GMRF draw combined with covariate and intercept.

    With n_times = 1 this reduces to a single spatial draw. The latent draw
    uses the canonical space-major-within-time ordering.
    """
    if n_times < 1:
        raise ValueError("n_times must be >= 1")
    q_s = build_matern_precision(grid, matern)
    if n_times == 1:
        u = sample_gmrf(q_s, seed=seed, n_samples=1)[0]
        return build_risk_field(beta0, beta1, x, u)
    if ar1 is None:
        raise ValueError("temporal simulation requires AR(1) parameters")
    if ar1.n_times != n_times:
        raise ValueError("ar1.n_times must equal n_times")
    q = kronecker_precision(q_s, build_ar1_precision(ar1))
    u = sample_gmrf(q, seed=seed, n_samples=1)[0].reshape(n_times, grid.n_cells)
    return build_risk_field(beta0, beta1, x, u)
