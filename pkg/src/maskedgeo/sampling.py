"""Cluster placement, binomial sampling, location masking and age-band
expansion for the simulated surveys.

Clusters are placed by probability-proportional-to-size sampling within
strata, observed as binomial counts at their cell, and optionally moved to
masked records that retain only the containing stratum. The discrete-hazards
expansion turns per-age-band risk fields into per-(cluster, year, band)
records with right truncation at the survey year.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .fields import RiskField
from .grids import PopulationWeights, StrataPartition

__all__ = [
    "Record",
    "ObservationSet",
    "place_clusters",
    "draw_observations",
    "apply_masking",
    "unmask",
    "drop_masked",
    "expand_hazard_observations",
    "DEFAULT_BAND_MONTHS",
]

# 7 age bands: 0-1 month (neonatal), 1-6, 6-12 months, then annual periods
DEFAULT_BAND_MONTHS = (0, 1, 6, 12, 24, 36, 48, 60)


def band_year_offsets(band_months=DEFAULT_BAND_MONTHS) -> np.ndarray:
    """Calendar-year offset of each band relative to the birth year."""
    return np.array([m // 12 for m in band_months[:-1]], dtype=np.int64)


@dataclass(frozen=True)
class Record:
    """One binomial observation. cell = -1 marks a masked record, which is
    located only by its stratum; age = -1 marks a record without an age band."""

    cell: int
    stratum: int
    time: int
    y: int
    n: int
    age: int = -1
    urban: int = 0
    survey: int = 0
    cluster: int = 0

    def __post_init__(self):
        if not (0 <= self.y <= self.n):
            raise ValueError(f"need 0 <= y <= n, got y={self.y}, n={self.n}")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class ObservationSet:
    """Point-located and masked binomial records plus, in simulations, the
    true cell of every masked cluster."""

    point_records: list = field(default_factory=list)
    masked_records: list = field(default_factory=list)
    true_locations: dict = field(default_factory=dict)

    def validate(self, strata: StrataPartition | None = None) -> None:
        for r in self.point_records:
            if r.cell < 0:
                raise ValueError("point record without a cell id")
        for r in self.masked_records:
            if r.stratum < 0:
                raise ValueError("masked record without a stratum id")
            if r.cluster not in self.true_locations and self.true_locations:
                raise ValueError(f"masked cluster {r.cluster} missing from true_locations")
        if strata is not None:
            n_strata = strata.n_strata
            for r in self.point_records + self.masked_records:
                if r.cell >= strata.n_cells or r.stratum >= n_strata:
                    raise ValueError("record references an invalid cell or stratum")

    @property
    def all_records(self) -> list:
        return self.point_records + self.masked_records

    def total_successes(self) -> int:
        return sum(r.y for r in self.all_records)

    def total_trials(self) -> int:
        return sum(r.n for r in self.all_records)


def place_clusters(
    pop: PopulationWeights,
    strata: StrataPartition,
    n_per_stratum: dict[int, int],
    seed: int,
    time: int = 0,
) -> dict[int, int]:
    """PPS placement of clusters: within each stratum, cells are drawn with
    replacement with probability weight_cell / weight_stratum. Cells may host
    multiple clusters. Returns cluster id -> cell id, ids assigned in stratum
    order.
    """
    rng = np.random.default_rng(seed)
    w = pop.at_time(time)
    locations: dict[int, int] = {}
    cluster_id = 0
    for k in sorted(n_per_stratum):
        cells = strata.cells_of_stratum(k)
        weights = w[cells]
        total = weights.sum()
        if total <= 0:
            raise ValueError(f"stratum {k} has zero total weight")
        chosen = rng.choice(cells, size=n_per_stratum[k], replace=True,
                            p=weights / total)
        for c in chosen:
            locations[cluster_id] = int(c)
            cluster_id += 1
    return locations


def draw_observations(
    truth: RiskField,
    locations: dict[int, int],
    n_trials: int,
    seed: int,
    time: int = 0,
    strata: StrataPartition | None = None,
    survey: int = 0,
) -> ObservationSet:
    """Independent Binomial(n_trials, p(cell, time)) draws per cluster."""
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    rng = np.random.default_rng(seed)
    p = truth.probabilities[time]
    records = []
    for cluster_id in sorted(locations):
        cell = locations[cluster_id]
        if cell >= truth.n_cells:
            raise ValueError(f"cluster {cluster_id} placed outside the truth field")
        y = int(rng.binomial(n_trials, p[cell]))
        stratum = int(strata.strata_of_cell[cell]) if strata is not None else -1
        urban = 0
        if strata is not None and strata.urban_of_cell is not None:
            urban = int(strata.urban_of_cell[cell])
        records.append(Record(cell=cell, stratum=stratum, time=time, y=y,
                              n=n_trials, urban=urban, survey=survey,
                              cluster=cluster_id))
    return ObservationSet(point_records=records)


def apply_masking(
    obs: ObservationSet,
    strata: StrataPartition,
    scenario: str,
    mask_fraction: float,
    seed: int,
    exact_split: bool = True,
) -> ObservationSet:
    """Move clusters from point to masked records, keeping only the stratum.

    overlap: clusters are masked at rate mask_fraction; with exact_split the
    first floor(mask_fraction * n) clusters of a seeded permutation are
    masked, otherwise masking is iid Bernoulli. non_overlap: strata alternate
    by index parity into masked-only and point-only sets and every cluster in
    a masked stratum is masked (mask_fraction is ignored with a warning).
    """
    if scenario not in ("overlap", "non_overlap"):
        raise ValueError(f"unknown masking scenario {scenario!r}")
    if not (0.0 <= mask_fraction <= 1.0):
        raise ValueError("mask_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    records = list(obs.point_records)
    for r in records:
        if r.cell < 0:
            raise ValueError("apply_masking requires point records with known cells")

    strata_of = lambda r: int(strata.strata_of_cell[r.cell])
    if scenario == "overlap":
        n = len(records)
        if exact_split:
            order = rng.permutation(n)
            masked_idx = set(order[: int(np.floor(mask_fraction * n))].tolist())
        else:
            masked_idx = set(np.nonzero(rng.random(n) < mask_fraction)[0].tolist())
    else:
        if mask_fraction not in (0.0, 1.0):
            warnings.warn("mask_fraction is ignored under the non_overlap scenario")
        masked_strata = {k for k in range(strata.n_strata) if k % 2 == 1}
        masked_idx = {i for i, r in enumerate(records) if strata_of(r) in masked_strata}

    point, masked = [], []
    true_locations = dict(obs.true_locations)
    for i, r in enumerate(records):
        stratum = strata_of(r)
        if i in masked_idx:
            true_locations[r.cluster] = r.cell
            masked.append(replace(r, cell=-1, stratum=stratum))
        else:
            point.append(replace(r, stratum=stratum))
    return ObservationSet(point_records=point, masked_records=masked,
                          true_locations=true_locations)


def unmask(obs: ObservationSet) -> ObservationSet:
    """Restore masked records to their true cells (simulation only)."""
    restored = []
    for r in obs.masked_records:
        if r.cluster not in obs.true_locations:
            raise ValueError(f"no true location recorded for cluster {r.cluster}")
        restored.append(replace(r, cell=obs.true_locations[r.cluster]))
    return ObservationSet(point_records=obs.point_records + restored,
                          masked_records=[], true_locations={})


def drop_masked(obs: ObservationSet) -> ObservationSet:
    """Discard the masked records."""
    return ObservationSet(point_records=list(obs.point_records),
                          masked_records=[], true_locations={})


def expand_hazard_observations(
    truths: list[RiskField],
    locations: dict[int, int],
    cohort_size: int,
    seed: int,
    band_months=DEFAULT_BAND_MONTHS,
    strata: StrataPartition | None = None,
    survey: int = 0,
) -> ObservationSet:
    """Discrete-hazards expansion of per-age-band risk fields.

    For each cluster and birth year, a cohort of `cohort_size` children moves
    through the age bands sequentially; band a of the year-t cohort falls in
    calendar year t + offset(a) and is dropped when it passes the final
    simulated year (right truncation). Each kept band emits a record with
    N = survivors entering the band and y = deaths within it.
    """
    n_bands = len(band_months) - 1
    if len(truths) != n_bands:
        raise ValueError(f"need {n_bands} age-band truths, got {len(truths)}")
    n_times = truths[0].n_times
    for f in truths:
        if f.n_times != n_times or f.n_cells != truths[0].n_cells:
            raise ValueError("age-band truths must share grid and time axes")
    offsets = band_year_offsets(band_months)
    rng = np.random.default_rng(seed)
    records = []
    for cluster_id in sorted(locations):
        cell = locations[cluster_id]
        stratum = int(strata.strata_of_cell[cell]) if strata is not None else -1
        urban = 0
        if strata is not None and strata.urban_of_cell is not None:
            urban = int(strata.urban_of_cell[cell])
        for birth_year in range(n_times):
            alive = cohort_size
            for a in range(n_bands):
                t = birth_year + int(offsets[a])
                if t >= n_times or alive == 0:
                    break
                hazard = truths[a].probabilities[t, cell]
                deaths = int(rng.binomial(alive, hazard))
                records.append(Record(cell=cell, stratum=stratum, time=t,
                                      y=deaths, n=alive, age=a, urban=urban,
                                      survey=survey, cluster=cluster_id))
                alive -= deaths
    return ObservationSet(point_records=records)
