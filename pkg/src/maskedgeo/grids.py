"""Regular-grid study regions, administrative strata and population weights.

The study region is a rectangular lattice of square cells in row-major
order: cell id = row * n_cols + col. All spatial structure downstream
(precision stencils, strata maps, population rasters) is indexed by cell id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["GridGeometry", "StrataPartition", "PopulationWeights"]


@dataclass(frozen=True)
class GridGeometry:
    """A row-major lattice of square cells covering the study region."""

    n_rows: int
    n_cols: int
    cell_size: float = 1.0

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid must have at least one row and column")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) array of (x, y) centers, cell id in row-major order."""
        rows, cols = np.divmod(np.arange(self.n_cells), self.n_cols)
        x = (cols + 0.5) * self.cell_size
        y = (rows + 0.5) * self.cell_size
        return np.column_stack([x, y])

    def cell_id(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise ValueError(f"cell ({row}, {col}) outside grid")
        return row * self.n_cols + col

    def interior_cells(self, margin: int = 1) -> np.ndarray:
        """Cell ids at least `margin` cells away from every boundary."""
        rows, cols = np.divmod(np.arange(self.n_cells), self.n_cols)
        keep = (
            (rows >= margin)
            & (rows < self.n_rows - margin)
            & (cols >= margin)
            & (cols < self.n_cols - margin)
        )
        return np.nonzero(keep)[0]

    @staticmethod
    def unit_square(n: int) -> "GridGeometry":
        """n x n grid covering the unit square."""
        return GridGeometry(n_rows=n, n_cols=n, cell_size=1.0 / n)


def block_partition(grid: GridGeometry, blocks_per_side: int) -> "StrataPartition":
    """Partition the grid into a blocks_per_side^2 lattice of square sub-units.

    Used for the artificial sampling grids (3x3, 5x5, 10x10) that play the
    role of administrative strata on the unit square. Cells on block borders
    are assigned by integer division, so blocks may differ by one cell in
    width when the grid does not divide evenly.
    """
    rows, cols = np.divmod(np.arange(grid.n_cells), grid.n_cols)
    brow = np.minimum(rows * blocks_per_side // grid.n_rows, blocks_per_side - 1)
    bcol = np.minimum(cols * blocks_per_side // grid.n_cols, blocks_per_side - 1)
    return StrataPartition(strata_of_cell=brow * blocks_per_side + bcol)


@dataclass
class StrataPartition:
    """Assignment of every cell to an administrative stratum.

    Strata ids must be a contiguous range [0, K). Optional per-cell urban
    flags and province ids travel with the partition.
    """

    strata_of_cell: np.ndarray
    urban_of_cell: np.ndarray | None = None
    province_of_cell: np.ndarray | None = None
    _cells_by_stratum: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.strata_of_cell = np.asarray(self.strata_of_cell, dtype=np.int64)
        k = self.n_strata
        present = np.unique(self.strata_of_cell)
        if present[0] < 0 or not np.array_equal(present, np.arange(k)):
            raise ValueError("strata ids must be contiguous [0, K) and every stratum non-empty")
        for name in ("urban_of_cell", "province_of_cell"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.int64)
                if val.shape != self.strata_of_cell.shape:
                    raise ValueError(f"{name} must cover every cell")
                setattr(self, name, val)
        self._cells_by_stratum = None

    @property
    def n_cells(self) -> int:
        return self.strata_of_cell.size

    @property
    def n_strata(self) -> int:
        return int(self.strata_of_cell.max()) + 1

    def cells_of_stratum(self, k: int) -> np.ndarray:
        if self._cells_by_stratum is None:
            order = np.argsort(self.strata_of_cell, kind="stable")
            bounds = np.searchsorted(self.strata_of_cell[order], np.arange(self.n_strata + 1))
            self._cells_by_stratum = [
                order[bounds[i]:bounds[i + 1]] for i in range(self.n_strata)
            ]
        return self._cells_by_stratum[k]

    def adjacency(self, grid: GridGeometry) -> np.ndarray:
        """Symmetric 0/1 stratum adjacency from rook-neighbor cells."""
        k = self.n_strata
        adj = np.zeros((k, k), dtype=np.int64)
        s = self.strata_of_cell.reshape(grid.n_rows, grid.n_cols)
        for a, b in [(s[:, :-1], s[:, 1:]), (s[:-1, :], s[1:, :])]:
            diff = a != b
            adj[a[diff], b[diff]] = 1
            adj[b[diff], a[diff]] = 1
        return adj

    def with_urban_from_population(self, pop: "PopulationWeights",
                                   quantile: float = 0.7) -> "StrataPartition":
        """Derive urban flags by thresholding population density.

        Cells above the given quantile of per-cell population (default top
        30%) are flagged urban. Used when no survey-defined urbanicity exists.
        """
        w = pop.at_time(0)
        cut = np.quantile(w, quantile)
        return StrataPartition(
            strata_of_cell=self.strata_of_cell,
            urban_of_cell=(w > cut).astype(np.int64),
            province_of_cell=self.province_of_cell,
        )


@dataclass
class PopulationWeights:
    """Nonnegative per-cell population, optionally per time step.

    `weight` has shape (n_cells,) or (n_times, n_cells). These weights drive
    PPS cluster placement and the per-stratum mixture weights.
    """

    weight: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        if self.weight.ndim not in (1, 2):
            raise ValueError("weight must be 1-D (static) or 2-D (time, cell)")
        if not np.all(np.isfinite(self.weight)) or np.any(self.weight < 0):
            raise ValueError("weights must be finite and nonnegative")

    @property
    def n_cells(self) -> int:
        return self.weight.shape[-1]

    def at_time(self, t: int) -> np.ndarray:
        if self.weight.ndim == 1:
            return self.weight
        return self.weight[t]

    def validate_strata(self, strata: StrataPartition) -> None:
        if self.n_cells != strata.n_cells:
            raise ValueError("population weights do not cover the grid")
        w = self.weight if self.weight.ndim == 2 else self.weight[None, :]
        for t in range(w.shape[0]):
            totals = np.bincount(strata.strata_of_cell, weights=w[t],
                                 minlength=strata.n_strata)
            if np.any(totals <= 0):
                k = int(np.nonzero(totals <= 0)[0][0])
                raise ValueError(f"stratum {k} has no positive-weight cell at time {t}")

    def stratum_normalized(self, strata: StrataPartition, t: int = 0) -> np.ndarray:
        """Per-cell weights normalized to sum to one within each stratum."""
        w = self.at_time(t).astype(float)
        totals = np.bincount(strata.strata_of_cell, weights=w, minlength=strata.n_strata)
        if np.any(totals <= 0):
            raise ValueError("every stratum needs positive total weight")
        return w / totals[strata.strata_of_cell]

    @staticmethod
    def uniform(n_cells: int) -> "PopulationWeights":
        return PopulationWeights(weight=np.ones(n_cells))
