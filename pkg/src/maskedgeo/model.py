"""Model specification, hyperparameters and the latent vector layout.

A ModelSpec pins down the data-handling method (unmasked / ignore / mixture /
resample / ecological), the structural variant, and prior constants. The
latent vector is a concatenation of named blocks; LatentLayout records each
block's offset so likelihoods, priors and predictions agree on indexing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .sampling import DEFAULT_BAND_MONTHS

__all__ = ["ModelSpec", "Hyperparameters", "LatentLayout", "LatentState",
           "METHODS", "VARIANTS", "HYPER_NAMES"]

METHODS = ("unmasked", "ignore", "mixture", "resample", "ecological")

# "base" is the single-indicator model logit(p) = x'beta + u(s, t);
# M1..M4 are the discrete-hazards mortality variants (M4 = M2 with a
# time-constant spatial field).
VARIANTS = ("base", "M1", "M2", "M3", "M4")

HYPER_NAMES = ("log_rho", "log_sigma", "logit_zeta", "log_sigma_eps",
               "log_sigma_phi", "log_sigma_eta", "log_tau_leroux",
               "logit_lambda")


@dataclass(frozen=True)
class ModelSpec:
    """Method, structural variant, flags and prior constants for one fit."""

    method: str
    variant: str = "base"
    urban_effect: bool = True
    survey_effect: bool = True
    band_months: tuple = DEFAULT_BAND_MONTHS
    rw_order: int = 2  # main-text choice; 1 selects the RW1 alternative
    exact_mixture_hessian: bool = False
    map_priors: bool = True
    coef_variance: float = 100.0
    hyper_prior_variance: float = 100.0
    resample_threshold_pop: float | None = None
    resample_n_points: int = 10000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.method == "ecological" and self.variant == "M3":
            raise ValueError("the ecological method excludes the cluster-effect variant")
        if self.rw_order not in (1, 2):
            raise ValueError("rw_order must be 1 or 2")

    @property
    def n_bands(self) -> int:
        return len(self.band_months) - 1

    @property
    def has_age_structure(self) -> bool:
        return self.variant != "base"

    @property
    def has_agetime_walk(self) -> bool:
        return self.variant in ("M2", "M3", "M4")

    @property
    def has_cluster_effect(self) -> bool:
        return self.variant == "M3"

    @property
    def space_only_field(self) -> bool:
        return self.variant == "M4"

    def with_method(self, method: str) -> "ModelSpec":
        return replace(self, method=method)


@dataclass
class Hyperparameters:
    """Transformed hyperparameters; inactive entries are None.

    Transforms keep the natural domains valid: rho, sigma and the variance
    components live on the log scale, the AR(1) correlation zeta and the
    Leroux mixing weight lambda on the logit scale (zeta in (-1, 1),
    lambda in (0, 1)).
    """

    log_rho: float | None = None
    log_sigma: float | None = None
    logit_zeta: float | None = None
    log_sigma_eps: float | None = None
    log_sigma_phi: float | None = None
    log_sigma_eta: float | None = None
    log_tau_leroux: float | None = None
    logit_lambda: float | None = None

    @property
    def rho(self) -> float:
        return float(np.exp(self.log_rho))

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @property
    def zeta(self) -> float:
        return float(np.tanh(self.logit_zeta / 2.0))

    @property
    def sigma_eps(self) -> float:
        return float(np.exp(self.log_sigma_eps))

    @property
    def sigma_phi(self) -> float:
        return float(np.exp(self.log_sigma_phi))

    @property
    def sigma_eta(self) -> float:
        return float(np.exp(self.log_sigma_eta))

    @property
    def tau_leroux(self) -> float:
        return float(np.exp(self.log_tau_leroux))

    @property
    def leroux_lambda(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.logit_lambda)))

    def to_vector(self, names: tuple[str, ...]) -> np.ndarray:
        vals = [getattr(self, n) for n in names]
        if any(v is None for v in vals):
            missing = [n for n, v in zip(names, vals) if v is None]
            raise ValueError(f"hyperparameters {missing} are not set")
        return np.array(vals, dtype=float)

    @staticmethod
    def from_vector(names: tuple[str, ...], vec: np.ndarray) -> "Hyperparameters":
        if len(names) != len(vec):
            raise ValueError("name/value length mismatch")
        return Hyperparameters(**dict(zip(names, map(float, vec))))

    @staticmethod
    def default(names: tuple[str, ...]) -> "Hyperparameters":
        defaults = {
            "log_rho": np.log(0.3),
            "log_sigma": 0.0,
            "logit_zeta": 2.0,        # zeta ~ 0.76
            "log_sigma_eps": np.log(0.3),
            "log_sigma_phi": np.log(0.3),
            "log_sigma_eta": np.log(0.3),
            "log_tau_leroux": 0.0,
            "logit_lambda": 0.0,
        }
        return Hyperparameters(**{n: defaults[n] for n in names})


class LatentLayout:
    """Named contiguous blocks of the latent vector."""

    def __init__(self):
        self._blocks: dict[str, slice] = {}
        self.size = 0

    def add(self, name: str, size: int) -> None:
        if size < 0:
            raise ValueError("block size must be nonnegative")
        if name in self._blocks:
            raise ValueError(f"duplicate block {name!r}")
        if size > 0:
            self._blocks[name] = slice(self.size, self.size + size)
            self.size += size

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def block(self, name: str) -> slice:
        if name not in self._blocks:
            raise KeyError(f"no block {name!r} under this model variant")
        return self._blocks[name]

    def offset(self, name: str) -> int:
        return self.block(name).start

    def block_size(self, name: str) -> int:
        s = self.block(name)
        return s.stop - s.start

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._blocks)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)


@dataclass
class LatentState:
    """A latent vector together with the layout that indexes it."""

    vector: np.ndarray
    layout: LatentLayout

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if self.vector.shape != (self.layout.size,):
            raise ValueError("state vector does not match the layout")

    def block(self, name: str) -> np.ndarray:
        return self.vector[self.layout.block(name)]
