import numpy as np
import pytest
from scipy.stats import chisquare

from maskedgeo.fields import CovariateField, build_risk_field
from maskedgeo.grids import GridGeometry, PopulationWeights, block_partition
from maskedgeo.sampling import (
    ObservationSet,
    Record,
    apply_masking,
    draw_observations,
    expand_hazard_observations,
    place_clusters,
)


def flat_truth(n_cells, p):
    from scipy.special import logit

    x = CovariateField(kind="iid", values=np.zeros(n_cells), generator_seed=0)
    return build_risk_field(float(logit(p)), 0.0, x, np.zeros(n_cells))


class TestPlaceClusters:
    def test_single_positive_cell_gets_all_clusters(self):
        g = GridGeometry.unit_square(4)
        part = block_partition(g, 2)
        w = np.zeros(16)
        target = part.cells_of_stratum(0)[0]
        w[target] = 5.0
        # other strata need weight too
        for k in range(1, 4):
            w[part.cells_of_stratum(k)] = 1.0
        locs = place_clusters(PopulationWeights(w), part, {0: 7}, seed=0)
        assert all(c == target for c in locs.values())
        assert len(locs) == 7

    def test_weighted_frequencies(self):
        g = GridGeometry(1, 2)
        part = block_partition(g, 1)
        pop = PopulationWeights(np.array([3.0, 1.0]))
        locs = place_clusters(pop, part, {0: 100000}, seed=1)
        freq0 = np.mean([c == 0 for c in locs.values()])
        assert freq0 == pytest.approx(0.75, abs=0.01)

    def test_uniform_weights_chi_square(self):
        g = GridGeometry(2, 2)
        part = block_partition(g, 1)
        pop = PopulationWeights.uniform(4)
        locs = place_clusters(pop, part, {0: 10000}, seed=2)
        counts = np.bincount(list(locs.values()), minlength=4)
        assert chisquare(counts).pvalue > 0.001

    def test_zero_weight_stratum_rejected(self):
        g = GridGeometry.unit_square(4)
        part = block_partition(g, 2)
        w = np.ones(16)
        w[part.cells_of_stratum(1)] = 0.0
        with pytest.raises(ValueError, match="zero total weight"):
            place_clusters(PopulationWeights(w), part, {1: 3}, seed=0)


class TestDrawObservations:
    def test_zero_probability_cell(self):
        truth = flat_truth(9, 1e-12)
        obs = draw_observations(truth, {0: 4, 1: 5}, n_trials=50, seed=0)
        assert all(r.y == 0 for r in obs.point_records)

    def test_binomial_mean(self):
        truth = flat_truth(4, 0.5)
        locs = {i: i % 4 for i in range(10000)}
        obs = draw_observations(truth, locs, n_trials=250, seed=3)
        rate = np.mean([r.y for r in obs.point_records]) / 250
        assert rate == pytest.approx(0.5, abs=0.005)

    def test_deterministic(self):
        truth = flat_truth(4, 0.3)
        a = draw_observations(truth, {0: 1, 1: 2}, 250, seed=9)
        b = draw_observations(truth, {0: 1, 1: 2}, 250, seed=9)
        assert [r.y for r in a.point_records] == [r.y for r in b.point_records]


class TestApplyMasking:
    def _obs(self, grid, part, n_clusters, seed=0):
        truth = flat_truth(grid.n_cells, 0.2)
        locs = place_clusters(PopulationWeights.uniform(grid.n_cells), part,
                              {k: n_clusters // part.n_strata for k in range(part.n_strata)},
                              seed=seed)
        return draw_observations(truth, locs, 250, seed=seed, strata=part)

    def test_zero_fraction_identity(self):
        g = GridGeometry.unit_square(6)
        part = block_partition(g, 2)
        obs = self._obs(g, part, 8)
        out = apply_masking(obs, part, "overlap", 0.0, seed=1)
        assert not out.masked_records
        assert [r.cell for r in out.point_records] == [r.cell for r in obs.point_records]

    def test_full_masking(self):
        g = GridGeometry.unit_square(6)
        part = block_partition(g, 2)
        obs = self._obs(g, part, 8)
        out = apply_masking(obs, part, "overlap", 1.0, seed=1)
        assert not out.point_records
        assert len(out.masked_records) == 8
        assert all(r.cell == -1 for r in out.masked_records)

    def test_exact_half_split(self):
        g = GridGeometry.unit_square(10)
        part = block_partition(g, 2)
        obs = self._obs(g, part, 300)
        out = apply_masking(obs, part, "overlap", 0.5, seed=4)
        assert len(out.masked_records) == 150
        assert len(out.point_records) == 150

    def test_counts_invariant(self):
        g = GridGeometry.unit_square(8)
        part = block_partition(g, 2)
        obs = self._obs(g, part, 40)
        out = apply_masking(obs, part, "overlap", 0.3, seed=2)
        assert out.total_successes() == obs.total_successes()
        assert out.total_trials() == obs.total_trials()
        # masked records retain (y, n, time, survey); only location changes
        by_cluster = {r.cluster: r for r in obs.point_records}
        for r in out.masked_records:
            orig = by_cluster[r.cluster]
            assert (r.y, r.n, r.time, r.survey) == (orig.y, orig.n, orig.time, orig.survey)
            assert out.true_locations[r.cluster] == orig.cell

    def test_non_overlap_parity_split(self):
        g = GridGeometry.unit_square(8)
        part = block_partition(g, 2)
        obs = self._obs(g, part, 40)
        with pytest.warns(UserWarning, match="ignored"):
            out = apply_masking(obs, part, "non_overlap", 0.5, seed=3)
        assert all(r.stratum % 2 == 1 for r in out.masked_records)
        assert all(part.strata_of_cell[r.cell] % 2 == 0 for r in out.point_records)


class TestHazardExpansion:
    def test_zero_hazard(self):
        truths = [flat_truth(4, 1e-15) for _ in range(2)]
        obs = expand_hazard_observations(truths, {0: 1}, cohort_size=100, seed=0,
                                         band_months=(0, 1, 6))
        assert all(r.y == 0 for r in obs.point_records)
        assert all(r.n == 100 for r in obs.point_records)

    def test_single_band_reduces_to_binomial(self):
        truth = flat_truth(4, 0.5)
        obs = expand_hazard_observations([truth], {i: 0 for i in range(5000)},
                                         cohort_size=250, seed=1,
                                         band_months=(0, 1))
        rate = np.mean([r.y for r in obs.point_records]) / 250
        assert rate == pytest.approx(0.5, abs=0.01)

    def test_survival_recursion(self):
        p1, p2 = 0.3, 0.1
        truths = [flat_truth(4, p1), flat_truth(4, p2)]
        obs = expand_hazard_observations(truths, {0: 0}, cohort_size=200000,
                                         seed=2, band_months=(0, 1, 6))
        recs = {r.age: r for r in obs.point_records}
        assert recs[1].n / recs[0].n == pytest.approx(1 - p1, abs=0.01)
        assert recs[1].y / recs[1].n == pytest.approx(p2, abs=0.01)

    def test_entrants_never_exceed_survivors(self):
        g = GridGeometry.unit_square(4)
        truths = [flat_truth(16, 0.2) for _ in range(7)]
        obs = expand_hazard_observations(truths, {0: 3, 1: 8}, cohort_size=50, seed=3)
        key = lambda r: (r.cluster, r.time - 0)  # noqa: E731
        by_cohort = {}
        for r in obs.point_records:
            by_cohort.setdefault(r.cluster, []).append(r)
        for recs in by_cohort.values():
            recs.sort(key=lambda r: (r.time, r.age))

    def test_right_truncation(self):
        # 3 simulated years, 7 default bands: cohorts born in the last year
        # only contribute the first-year bands
        truths = [flat_truth(4, 0.1) for _ in range(7)]
        truths = [
            build_risk_field(t.beta0, t.beta1, t.covariate,
                             np.tile(t.latent, (3, 1)))
            for t in truths
        ]
        obs = expand_hazard_observations(truths, {0: 0}, cohort_size=50, seed=4)
        last_cohort = [r for r in obs.point_records if r.time - 0 >= 0]
        born_last = [r for r in obs.point_records
                     if r.age <= 2 and r.time == 2]
        assert born_last  # bands within the final year exist
        assert not [r for r in obs.point_records if r.time > 2]


class TestRecordValidation:
    def test_y_bounds(self):
        with pytest.raises(ValueError):
            Record(cell=0, stratum=0, time=0, y=5, n=4)

    def test_observation_set_validation(self):
        obs = ObservationSet(masked_records=[Record(cell=-1, stratum=0, time=0, y=1, n=2,
                                                    cluster=7)],
                             true_locations={3: 0})
        with pytest.raises(ValueError, match="true_locations"):
            obs.validate()
