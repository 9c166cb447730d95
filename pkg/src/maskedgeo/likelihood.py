"""Likelihood evaluation for all five data-handling methods.

The observation model is binomial with a logit link throughout. Every record
contributes through a sparse design row mapping the latent vector to its
linear predictor; masked records under the mixture method contribute one
candidate row per cell of their stratum, combined by a log-sum-exp over the
population-weighted candidates. The ecological method replaces masked
records with per-stratum totals whose design rows area-average the field and
covariates and pick up a discrete Leroux-prior strata effect.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.cluster.vq import kmeans2
from scipy.special import expit, gammaln

from .grids import GridGeometry, PopulationWeights, StrataPartition
from .model import LatentLayout, ModelSpec
from .sampling import ObservationSet, Record, band_year_offsets

log = logging.getLogger(__name__)

__all__ = [
    "LikelihoodEval",
    "ModelDesign",
    "build_design",
    "point_loglik",
    "mixture_loglik",
    "ecological_loglik",
    "total_loglik",
    "assemble_linear_predictor",
    "resample_preprocess",
    "ecological_aggregate",
    "rw2_prior_precision",
    "RandomWalkPrior",
    "mixture_responsibilities",
]

MAX_EXACT_MIXTURE_CELLS = 500


@dataclass
class LikelihoodEval:
    """Log-likelihood value with its gradient and Hessian contribution over
    the latent vector. The Hessian contribution is negative semidefinite for
    point records; the default mixture Hessian is the responsibility-weighted
    (Fisher-style) diagonal-in-cells approximation."""

    value: float
    gradient: np.ndarray
    hessian_contrib: sp.spmatrix


def _binom_logpmf_terms(y: np.ndarray, n: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """log Binomial(y; n, expit(eta)) including the combinatorial constant."""
    const = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
    return const + y * eta - n * np.logaddexp(0.0, eta)


def _segment_logsumexp(values: np.ndarray, ptr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment logsumexp and softmax for contiguous segments given by ptr."""
    n_seg = ptr.size - 1
    out = np.empty(n_seg)
    resp = np.empty_like(values)
    for i in range(n_seg):
        seg = values[ptr[i]:ptr[i + 1]]
        m = seg.max()
        if not np.isfinite(m):
            raise FloatingPointError("non-finite mixture component log-likelihood")
        e = np.exp(seg - m)
        s = e.sum()
        out[i] = m + np.log(s)
        resp[ptr[i]:ptr[i + 1]] = e / s
    return out, resp


class ModelDesign:
    """Compiled observation design for one (spec, data, geography) triple.

    Attributes of interest:
      layout        latent block layout
      z_point       (R, n) design rows of point-located records
      z_eco         (K', n) design rows of ecological totals
      z_mix         stacked candidate rows of all masked mixture records
      mix_ptr       candidate-row boundaries per masked record
      mix_logq      per-candidate log mixture weight (normalized per record)
    """

    def __init__(self, spec: ModelSpec, grid: GridGeometry,
                 strata: StrataPartition, n_times: int,
                 covariates: np.ndarray | None):
        self.spec = spec
        self.grid = grid
        self.strata = strata
        self.n_times = int(n_times)
        if covariates is None:
            covariates = np.zeros((0, grid.n_cells))
        self.covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        self.layout = LatentLayout()
        # filled by build_design
        self.survey_index: dict[int, int] = {}
        self.cluster_index: dict[int, int] = {}
        self.z_point = None
        self.y_point = np.zeros(0)
        self.n_point = np.zeros(0)
        self.point_records: list[Record] = []
        self.z_eco = None
        self.y_eco = np.zeros(0)
        self.n_eco = np.zeros(0)
        self.eco_records: list[Record] = []
        self.z_mix = None
        self.mix_ptr = np.zeros(1, dtype=np.int64)
        self.mix_logq = np.zeros(0)
        self.y_mix = np.zeros(0)
        self.n_mix = np.zeros(0)
        self.mix_records: list[Record] = []

    # ---- latent indexing -------------------------------------------------

    @property
    def field_times(self) -> int:
        if self.spec.space_only_field:
            return 1
        return self.n_times

    def field_index(self, cell: int, time: int) -> int:
        t = 0 if self.field_times == 1 else time
        return self.layout.offset("field") + t * self.grid.n_cells + cell

    def _urban_flag(self, record: Record, cell: int) -> float:
        if self.strata.urban_of_cell is not None and cell >= 0:
            return float(self.strata.urban_of_cell[cell])
        return float(record.urban)

    def design_row(self, record: Record, cell: int) -> tuple[list[int], list[float]]:
        """Column indices and values of the record's design row were it
        located at the given cell."""
        cols = [self.field_index(cell, record.time)]
        vals = [1.0]
        spec = self.spec
        if spec.variant == "base":
            off = self.layout.offset("coef")
            cols.append(off)
            vals.append(1.0)
            for j in range(self.covariates.shape[0]):
                cols.append(off + 1 + j)
                vals.append(float(self.covariates[j, cell]))
        else:
            if record.age < 0:
                raise ValueError("age-structured variant requires age bands on records")
            off = self.layout.offset("coef")
            cols.append(off + record.age)
            vals.append(1.0)
            if spec.urban_effect:
                cols.append(off + spec.n_bands)
                vals.append(self._urban_flag(record, cell))
            if "survey" in self.layout:
                cols.append(self.layout.offset("survey")
                            + self.survey_index[record.survey])
                vals.append(1.0)
            if "agetime" in self.layout:
                cols.append(self.layout.offset("agetime")
                            + record.age * self.n_times + record.time)
                vals.append(1.0)
            if "cluster" in self.layout:
                cols.append(self.layout.offset("cluster")
                            + self.cluster_index[record.cluster])
                vals.append(1.0)
        return cols, vals

    def ecological_row(self, record: Record) -> tuple[list[int], list[float]]:
        """Area-averaged design row of a per-stratum total.

        Averages are unweighted over the stratum's cells, matching the
        ecological model's |A|^-1 integrals.
        """
        cells = self.strata.cells_of_stratum(record.stratum)
        m = cells.size
        t = 0 if self.field_times == 1 else record.time
        base = self.layout.offset("field") + t * self.grid.n_cells
        cols = list(base + cells)
        vals = [1.0 / m] * m
        spec = self.spec
        off = self.layout.offset("coef")
        if spec.variant == "base":
            cols.append(off)
            vals.append(1.0)
            for j in range(self.covariates.shape[0]):
                cols.append(off + 1 + j)
                vals.append(float(self.covariates[j, cells].mean()))
        else:
            cols.append(off + record.age)
            vals.append(1.0)
            if spec.urban_effect:
                cols.append(off + spec.n_bands)
                if self.strata.urban_of_cell is not None:
                    vals.append(float(self.strata.urban_of_cell[cells].mean()))
                else:
                    vals.append(float(record.urban))
            if "survey" in self.layout:
                cols.append(self.layout.offset("survey")
                            + self.survey_index[record.survey])
                vals.append(1.0)
            if "agetime" in self.layout:
                cols.append(self.layout.offset("agetime")
                            + record.age * self.n_times + record.time)
                vals.append(1.0)
        cols.append(self.layout.offset("strata_effect") + record.stratum)
        vals.append(1.0)
        return cols, vals

    def prediction_matrix(self, age: int | None = None,
                          survey: int | None = None) -> sp.csr_matrix:
        """Rows mapping the latent vector to the logit risk of every
        (time, cell), time-major. Survey and cluster effects are zeroed
        (prediction for a new cluster); the ecological strata effect is
        picked up from the stratum containing each cell."""
        spec = self.spec
        rows, cols, vals = [], [], []
        r = 0
        for t in range(self.n_times):
            tf = 0 if self.field_times == 1 else t
            base = self.layout.offset("field") + tf * self.grid.n_cells
            for cell in range(self.grid.n_cells):
                cols.append(base + cell)
                vals.append(1.0)
                rows.append(r)
                off = self.layout.offset("coef")
                if spec.variant == "base":
                    cols.append(off)
                    vals.append(1.0)
                    rows.append(r)
                    for j in range(self.covariates.shape[0]):
                        cols.append(off + 1 + j)
                        vals.append(float(self.covariates[j, cell]))
                        rows.append(r)
                else:
                    if age is None:
                        raise ValueError("age-structured prediction needs an age band")
                    cols.append(off + age)
                    vals.append(1.0)
                    rows.append(r)
                    if spec.urban_effect and self.strata.urban_of_cell is not None:
                        cols.append(off + spec.n_bands)
                        vals.append(float(self.strata.urban_of_cell[cell]))
                        rows.append(r)
                    if "agetime" in self.layout:
                        cols.append(self.layout.offset("agetime")
                                    + age * self.n_times + t)
                        vals.append(1.0)
                        rows.append(r)
                if "strata_effect" in self.layout:
                    cols.append(self.layout.offset("strata_effect")
                                + int(self.strata.strata_of_cell[cell]))
                    vals.append(1.0)
                    rows.append(r)
                r += 1
        shape = (self.n_times * self.grid.n_cells, self.layout.size)
        return sp.csr_matrix((vals, (rows, cols)), shape=shape)


def _build_layout(design: ModelDesign, records_point, records_masked) -> None:
    spec, layout = design.spec, design.layout
    layout.add("field", design.field_times * design.grid.n_cells)
    if spec.variant == "base":
        layout.add("coef", 1 + design.covariates.shape[0])
    else:
        layout.add("coef", spec.n_bands + (1 if spec.urban_effect else 0))
        if spec.survey_effect:
            surveys = sorted({r.survey for r in records_point + records_masked})
            design.survey_index = {s: i for i, s in enumerate(surveys)}
            layout.add("survey", len(surveys))
        if spec.has_agetime_walk:
            layout.add("agetime", spec.n_bands * design.n_times)
        if spec.has_cluster_effect:
            clusters = sorted({r.cluster for r in records_point + records_masked})
            design.cluster_index = {c: i for i, c in enumerate(clusters)}
            layout.add("cluster", len(clusters))
    if spec.method == "ecological":
        layout.add("strata_effect", design.strata.n_strata)


def _rows_to_csr(rows: list, n_cols: int) -> sp.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, (cols, _) in enumerate(rows):
        indptr[i + 1] = indptr[i] + len(cols)
    indices = np.empty(indptr[-1], dtype=np.int64)
    data = np.empty(indptr[-1])
    for i, (cols, vals) in enumerate(rows):
        indices[indptr[i]:indptr[i + 1]] = cols
        data[indptr[i]:indptr[i + 1]] = vals
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), n_cols))


def build_design(
    spec: ModelSpec,
    grid: GridGeometry,
    strata: StrataPartition,
    obs: ObservationSet,
    pop: PopulationWeights | None = None,
    covariates: np.ndarray | None = None,
    n_times: int = 1,
    resample_seed: int = 0,
) -> ModelDesign:
    """Compile observations into the sparse design of the requested method.

    unmasked requires the observations to carry no masked records (restore
    them with `unmask` first); ignore drops masked records; mixture expands
    them into population-weighted candidate rows; resample converts them to
    pseudo point records; ecological aggregates them into per-stratum totals.
    """
    design = ModelDesign(spec, grid, strata, n_times, covariates)
    point = list(obs.point_records)
    masked = list(obs.masked_records)

    if spec.method == "unmasked":
        if masked:
            raise ValueError("the unmasked method requires fully located records")
    elif spec.method == "ignore":
        masked = []
    elif spec.method == "resample":
        if pop is None:
            raise ValueError("the resample method needs population weights")
        threshold = spec.resample_threshold_pop
        if threshold is None:
            # aim for ~8 pseudo clusters per stratum
            totals = np.bincount(strata.strata_of_cell,
                                 weights=pop.at_time(0),
                                 minlength=strata.n_strata)
            threshold = float(np.median(totals)) / 8.0
        point = point + resample_preprocess(
            masked, pop, strata, threshold, seed=resample_seed, grid=grid,
            n_points=spec.resample_n_points)
        masked = []

    _build_layout(design, point, masked if spec.method == "mixture" else [])

    if spec.method == "ecological" and masked:
        totals = ecological_aggregate(masked, strata)
        design.eco_records = totals
        rows = [design.ecological_row(r) for r in totals]
        design.z_eco = _rows_to_csr(rows, design.layout.size)
        design.y_eco = np.array([r.y for r in totals], dtype=float)
        design.n_eco = np.array([r.n for r in totals], dtype=float)
        masked = []

    design.point_records = point
    rows = [design.design_row(r, r.cell) for r in point]
    design.z_point = _rows_to_csr(rows, design.layout.size)
    design.y_point = np.array([r.y for r in point], dtype=float)
    design.n_point = np.array([r.n for r in point], dtype=float)

    if spec.method == "mixture" and masked:
        if pop is None:
            pop = PopulationWeights.uniform(grid.n_cells)
        design.mix_records = masked
        cand_rows, logq, ptr = [], [], [0]
        for r in masked:
            cells = strata.cells_of_stratum(r.stratum)
            qnorm = pop.stratum_normalized(
                strata, t=r.time if pop.weight.ndim == 2 else 0)
            q = qnorm[cells]
            keep = q > 0
            cells, q = cells[keep], q[keep]
            if cells.size == 0:
                raise ValueError(f"stratum {r.stratum} has no positive-weight candidate cell")
            for c in cells:
                cand_rows.append(design.design_row(r, int(c)))
            logq.extend(np.log(q))
            ptr.append(ptr[-1] + cells.size)
        design.z_mix = _rows_to_csr(cand_rows, design.layout.size)
        design.mix_logq = np.array(logq)
        design.mix_ptr = np.array(ptr, dtype=np.int64)
        design.y_mix = np.array([r.y for r in masked], dtype=float)
        design.n_mix = np.array([r.n for r in masked], dtype=float)
    elif spec.method == "mixture":
        design.z_mix = sp.csr_matrix((0, design.layout.size))

    return design


# ---- likelihood evaluations ---------------------------------------------


def _row_part(z, y, n, x, exact_value=True):
    if z is None or z.shape[0] == 0:
        dim = x.size
        return 0.0, np.zeros(dim), sp.csr_matrix((dim, dim))
    eta = z @ x
    p = expit(eta)
    value = float(_binom_logpmf_terms(y, n, eta).sum()) if exact_value else 0.0
    g = y - n * p
    w = n * p * (1.0 - p)
    grad = z.T @ g
    hess = -(z.multiply(w[:, None])).T @ z
    return value, grad, hess.tocsr()


def point_loglik(design: ModelDesign, x: np.ndarray) -> LikelihoodEval:
    """Sum of binomial log-pmfs over point-located records, with exact
    gradient and diagonal (in eta) Hessian chained through the design."""
    v, g, h = _row_part(design.z_point, design.y_point, design.n_point, x)
    return LikelihoodEval(v, g, h)


def ecological_loglik(design: ModelDesign, x: np.ndarray) -> LikelihoodEval:
    """Binomial likelihood of the per-stratum totals under the area-averaged
    linear predictor. The Leroux prior on the strata effect lives in the
    prior model, not here."""
    v, g, h = _row_part(design.z_eco, design.y_eco, design.n_eco, x)
    return LikelihoodEval(v, g, h)


def mixture_responsibilities(design: ModelDesign, x: np.ndarray) -> np.ndarray:
    """Per-candidate posterior location probabilities of each masked record."""
    _, resp, _ = _mixture_parts(design, x)
    return resp


def _mixture_parts(design: ModelDesign, x: np.ndarray):
    z = design.z_mix
    eta = z @ x
    row_of = np.repeat(np.arange(design.mix_ptr.size - 1),
                       np.diff(design.mix_ptr))
    y = design.y_mix[row_of]
    n = design.n_mix[row_of]
    comp = design.mix_logq + _binom_logpmf_terms(y, n, eta)
    if np.any(np.isnan(comp)):
        raise FloatingPointError("NaN in mixture component log-likelihood")
    values, resp = _segment_logsumexp(comp, design.mix_ptr)
    return values, resp, (eta, y, n, row_of)


def mixture_loglik(design: ModelDesign, x: np.ndarray,
                   exact_hessian: bool | None = None) -> LikelihoodEval:
    """Log mixture likelihood of the masked records.

    Value: per record, log sum_j q_j Binomial(y; N, p(s_j, t)), computed in
    log space with max subtraction. Gradient uses the candidate
    responsibilities. The default Hessian is the responsibility-weighted
    binomial curvature (diagonal across candidate cells, negative
    semidefinite); exact within-record blocks are selected by
    spec.exact_mixture_hessian or the override, for records with at most
    MAX_EXACT_MIXTURE_CELLS candidates.
    """
    dim = x.size
    if design.z_mix is None or design.z_mix.shape[0] == 0:
        return LikelihoodEval(0.0, np.zeros(dim), sp.csr_matrix((dim, dim)))
    if exact_hessian is None:
        exact_hessian = design.spec.exact_mixture_hessian
    values, resp, (eta, y, n, row_of) = _mixture_parts(design, x)
    p = expit(eta)
    g_eta = y - n * p
    w_eta = n * p * (1.0 - p)
    z = design.z_mix
    grad = z.T @ (resp * g_eta)
    if exact_hessian:
        # d2/deta2 of the logsumexp: diag(r (g^2 - w)) - (r g)(r g)' within
        # each record, zero across records; records with too many candidate
        # cells keep the Fisher-style part only
        ptr = design.mix_ptr
        sizes = np.diff(ptr)
        use = np.repeat(sizes <= MAX_EXACT_MIXTURE_CELLS, sizes)
        u = np.where(use, resp * g_eta, 0.0)
        agg = sp.csr_matrix((u, np.arange(u.size), ptr),
                            shape=(ptr.size - 1, u.size))
        b = agg @ z
        curv = resp * np.where(use, g_eta**2 - w_eta, -w_eta)
        hess = (z.multiply(curv[:, None])).T @ z - b.T @ b
    else:
        hess = -(z.multiply((resp * w_eta)[:, None])).T @ z
    return LikelihoodEval(float(values.sum()), grad, hess.tocsr())


def total_loglik(design: ModelDesign, x: np.ndarray,
                 exact_mixture: bool | None = None) -> LikelihoodEval:
    """Sum of the point, mixture and ecological contributions."""
    parts = [point_loglik(design, x)]
    if design.z_mix is not None and design.z_mix.shape[0]:
        parts.append(mixture_loglik(design, x, exact_hessian=exact_mixture))
    if design.z_eco is not None and design.z_eco.shape[0]:
        parts.append(ecological_loglik(design, x))
    value = sum(p.value for p in parts)
    grad = sum(p.gradient for p in parts)
    hess = sum(p.hessian_contrib for p in parts)
    return LikelihoodEval(value, grad, hess)


def assemble_linear_predictor(design: ModelDesign, record: Record,
                              x: np.ndarray, cell: int | None = None) -> float:
    """Linear predictor of one record at its (or a hypothetical) cell."""
    c = record.cell if cell is None else cell
    if c < 0:
        raise ValueError("record has no cell; pass one explicitly")
    cols, vals = design.design_row(record, c)
    return float(sum(v * x[i] for i, v in zip(cols, vals)))


# ---- masked-data preprocessing ------------------------------------------


def _largest_remainder(total: int, quota: np.ndarray, cap: np.ndarray) -> np.ndarray:
    """Integer allocation of `total` proportional to `quota`, never exceeding
    `cap`, exactly conserving the total. Ties break by index."""
    quota = np.minimum(quota, cap)
    alloc = np.floor(quota).astype(np.int64)
    rem = total - alloc.sum()
    if rem < 0:
        raise ValueError("allocation overflow")
    frac = quota - alloc
    # prefer the largest fractional parts among entries with headroom
    order = sorted(range(quota.size),
                   key=lambda i: (-frac[i], i))
    for i in order:
        if rem == 0:
            break
        if alloc[i] < cap[i]:
            alloc[i] += 1
            rem -= 1
    if rem > 0:  # remaining headroom anywhere
        for i in range(quota.size):
            room = min(rem, int(cap[i] - alloc[i]))
            alloc[i] += room
            rem -= room
            if rem == 0:
                break
    if rem != 0:
        raise ValueError("cannot conserve totals under the caps")
    return alloc


def resample_preprocess(
    masked_records: list[Record],
    pop: PopulationWeights,
    strata: StrataPartition,
    threshold_pop: float,
    seed: int,
    grid: GridGeometry,
    n_points: int = 10000,
) -> list[Record]:
    """Redistribute masked records to pseudo point locations.

    Per stratum: scatter n_points points across cells by population PPS,
    k-means them (k = ceil(stratum population / threshold_pop), k-means++
    init, fixed seed), snap centroids to the nearest cells, then split every
    masked record's (y, N) across the centroids proportionally to the
    population each one represents, using largest-remainder rounding so the
    per-stratum totals are conserved exactly.
    """
    if threshold_pop <= 0:
        raise ValueError("threshold_pop must be positive")
    rng = np.random.default_rng(seed)
    by_stratum: dict[int, list[Record]] = {}
    for r in masked_records:
        by_stratum.setdefault(r.stratum, []).append(r)
    centers = grid.cell_centers
    out: list[Record] = []
    for k in sorted(by_stratum):
        cells = strata.cells_of_stratum(k)
        w = pop.at_time(0)[cells].astype(float)
        if w.sum() <= 0:
            raise ValueError(f"masked stratum {k} has no population")
        counts = rng.multinomial(n_points, w / w.sum())
        occupied = counts > 0
        pts = np.repeat(centers[cells], counts, axis=0)
        pts = pts + rng.uniform(-0.5, 0.5, pts.shape) * grid.cell_size
        n_clusters = int(np.ceil(w.sum() / threshold_pop))
        n_occ = int(occupied.sum())
        if n_clusters > n_occ:
            warnings.warn(
                f"stratum {k}: reducing k from {n_clusters} to the "
                f"{n_occ} occupied cells")
            n_clusters = n_occ
        n_clusters = max(n_clusters, 1)
        centroids, label = kmeans2(pts, n_clusters, minit="++",
                                   seed=rng, missing="raise")
        pop_share = np.bincount(label, minlength=n_clusters).astype(float)
        # snap centroids to the nearest stratum cell
        d = np.linalg.norm(centroids[:, None, :] - centers[cells][None, :, :], axis=2)
        snap = cells[np.argmin(d, axis=1)]
        share = pop_share / pop_share.sum()
        for r in by_stratum[k]:
            n_alloc = _largest_remainder(r.n, r.n * share,
                                         np.full(n_clusters, r.n, dtype=float))
            with np.errstate(invalid="ignore", divide="ignore"):
                quota_y = np.where(n_alloc > 0, r.y * n_alloc / n_alloc.sum(), 0.0)
            y_alloc = _largest_remainder(r.y, quota_y, n_alloc.astype(float))
            for j in range(n_clusters):
                if n_alloc[j] == 0:
                    continue
                out.append(Record(cell=int(snap[j]), stratum=k, time=r.time,
                                  y=int(y_alloc[j]), n=int(n_alloc[j]),
                                  age=r.age, urban=r.urban, survey=r.survey,
                                  cluster=r.cluster))
    return out


def ecological_aggregate(masked_records: list[Record],
                         strata: StrataPartition | None = None) -> list[Record]:
    """Per-(stratum, time, age, survey) sums of masked numerators and
    denominators. Strata without records are simply absent (logged)."""
    groups: dict[tuple, list[Record]] = {}
    for r in masked_records:
        groups.setdefault((r.stratum, r.time, r.age, r.survey), []).append(r)
    out = []
    for key in sorted(groups):
        stratum, time, age, survey = key
        recs = groups[key]
        out.append(Record(cell=-1, stratum=stratum, time=time,
                          y=sum(r.y for r in recs), n=sum(r.n for r in recs),
                          age=age, urban=recs[0].urban, survey=survey,
                          cluster=-1))
    if strata is not None:
        present = {r.stratum for r in out}
        empty = set(range(strata.n_strata)) - present
        if empty:
            log.info("strata without masked records excluded from the "
                     "ecological likelihood: %s", sorted(empty))
    return out


# ---- random-walk priors --------------------------------------------------


@dataclass
class RandomWalkPrior:
    """Rank-deficient random-walk precision with its constraint rows and the
    pseudo log-determinant of the unscaled structure matrix."""

    matrix: sp.csc_matrix
    constraints: np.ndarray
    rank: int
    structure_pseudo_logdet: float


def rw2_prior_precision(n_times: int, sigma_phi: float,
                        order: int = 2) -> RandomWalkPrior:
    """Random-walk structure matrix D'D / sigma_phi^2 of the given order.

    Order 2 penalizes second differences (rank T-2, null space spanned by
    constant and linear paths; constraints: sum-to-zero and zero-slope).
    Order 1 penalizes first differences (rank T-1, sum-to-zero constraint).
    """
    if order == 2 and n_times < 3:
        raise ValueError("a second-order walk needs at least 3 time points")
    if order == 1 and n_times < 2:
        raise ValueError("a first-order walk needs at least 2 time points")
    if sigma_phi <= 0:
        raise ValueError("sigma_phi must be positive")
    eye = np.eye(n_times)
    d = np.diff(eye, n=order, axis=0)
    s = d.T @ d
    t = np.arange(n_times, dtype=float)
    if order == 2:
        constraints = np.vstack([np.ones(n_times), t - t.mean()])
    else:
        constraints = np.ones((1, n_times))
    eigs = np.linalg.eigvalsh(s)
    nonzero = eigs[eigs > 1e-10 * max(eigs.max(), 1.0)]
    rank = n_times - order
    if nonzero.size != rank:
        raise AssertionError("unexpected structure-matrix rank")
    return RandomWalkPrior(
        matrix=sp.csc_matrix(s / sigma_phi**2),
        constraints=constraints,
        rank=rank,
        structure_pseudo_logdet=float(np.log(nonzero).sum()),
    )
