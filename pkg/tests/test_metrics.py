import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import expit
from scipy.stats import binom, norm

from maskedgeo.fields import gen_covariate, simulate_spacetime_truth
from maskedgeo.fitting import build_prior, optimize_hyperparameters, posterior_samples
from maskedgeo.gmrf import Ar1Params, MaternParams
from maskedgeo.grids import GridGeometry, PopulationWeights, block_partition
from maskedgeo.likelihood import build_design, total_loglik
from maskedgeo.metrics import (
    CpoReport,
    CpoYearRow,
    aggregate_province,
    bias,
    coverage,
    cpo_holdout,
    pct_increase_vs_unmasked,
    record_log_likelihoods,
    rmse,
)
from maskedgeo.model import Hyperparameters, ModelSpec
from maskedgeo.sampling import (
    ObservationSet,
    Record,
    apply_masking,
    draw_observations,
    place_clusters,
)


class TestScalarMetrics:
    def test_rmse_matches_numpy(self):
        rng = np.random.default_rng(0)
        e, t = rng.normal(size=50), rng.normal(size=50)
        assert rmse(e, t) == pytest.approx(np.sqrt(np.mean((e - t) ** 2)))

    def test_rmse_weighted(self):
        e = np.array([1.0, 2.0, 3.0])
        t = np.array([0.0, 0.0, 0.0])
        w = np.array([1.0, 0.0, 1.0])
        assert rmse(e, t, w) == pytest.approx(np.sqrt((1 + 9) / 2))

    def test_rmse_shape_mismatch(self):
        with pytest.raises(ValueError):
            rmse(np.zeros(3), np.zeros(4))

    def test_bias_sign(self):
        assert bias(np.array([1.0, 1.0]), np.array([0.0, 0.0])) == pytest.approx(1.0)
        assert bias(np.array([-1.0, 1.0]), np.array([0.0, 0.0])) == pytest.approx(0.0)

    def test_coverage_counts_inclusive(self):
        lo = np.array([0.0, 0.0, 0.5, 0.2])
        hi = np.array([1.0, 0.4, 1.0, 0.2])
        t = np.array([0.5, 0.5, 0.4, 0.2])
        # inside, above, below, on the boundary
        assert coverage(lo, hi, t) == pytest.approx(0.5)

    def test_coverage_rejects_crossed_bounds(self):
        with pytest.raises(ValueError):
            coverage(np.array([1.0]), np.array([0.0]), np.array([0.5]))

    def test_pct_increase(self):
        assert pct_increase_vs_unmasked(0.12, 0.10) == pytest.approx(20.0)
        assert pct_increase_vs_unmasked(0.10, 0.10) == pytest.approx(0.0)
        with pytest.raises(ValueError):
            pct_increase_vs_unmasked(0.1, 0.0)

    def test_aggregate_province_weighted_mean(self):
        v = np.array([1.0, 3.0, 10.0, 20.0])
        prov = np.array([0, 0, 1, 1])
        w = np.array([1.0, 3.0, 1.0, 1.0])
        out = aggregate_province(v, prov, w)
        assert out == pytest.approx([(1 + 9) / 4, 15.0])

    def test_aggregate_province_unweighted(self):
        out = aggregate_province(np.arange(6.0), np.array([0, 1, 2, 0, 1, 2]))
        assert out == pytest.approx([1.5, 2.5, 3.5])


def multi_year_sim(seed=0, n=6, n_times=4, clusters=6, mask=0.4):
    g = GridGeometry.unit_square(n)
    part = block_partition(g, 2)
    pop = PopulationWeights.uniform(g.n_cells)
    x = gen_covariate(g, "iid", seed=seed)
    truth = simulate_spacetime_truth(g, n_times, MaternParams(0.5, 0.8),
                                     Ar1Params(0.7, n_times), -1.5, 1.0, x,
                                     seed=seed + 1)
    records = []
    for t in range(n_times):
        locs = place_clusters(pop, part, {k: clusters for k in range(part.n_strata)},
                              seed=seed + 2 + t, time=t)
        obs_t = draw_observations(truth, locs, 100, seed=seed + 10 + t,
                                  time=t, strata=part)
        for r in obs_t.point_records:
            records.append(Record(cell=r.cell, stratum=r.stratum, time=t,
                                  y=r.y, n=r.n, urban=r.urban, survey=r.survey,
                                  cluster=100 * t + r.cluster))
    obs = ObservationSet(point_records=records)
    masked = apply_masking(obs, part, "overlap", mask, seed=seed + 30)
    cov = np.tile(x.values, (n_times, 1))
    return g, part, pop, cov, truth, masked


FIXED_HYPERS = {"log_rho": np.log(0.5), "log_sigma": np.log(0.8),
                "logit_zeta": 1.0}


class TestRecordLogLikelihoods:
    def test_matches_total_loglik_value(self):
        g, part, pop, cov, truth, masked = multi_year_sim()
        d = build_design(ModelSpec(method="mixture"), g, part, masked,
                         pop=pop, covariates=cov, n_times=4)
        rng = np.random.default_rng(3)
        x = 0.1 * rng.normal(size=d.layout.size)
        ll = record_log_likelihoods(d, x)
        assert ll.size == len(masked.point_records) + len(masked.masked_records)
        assert ll.sum() == pytest.approx(total_loglik(d, x).value, abs=1e-9)

    def test_point_records_match_scipy(self):
        g, part, pop, cov, truth, masked = multi_year_sim()
        d = build_design(ModelSpec(method="ignore"), g, part, masked,
                         pop=pop, covariates=cov, n_times=4)
        rng = np.random.default_rng(4)
        x = 0.1 * rng.normal(size=d.layout.size)
        eta = d.z_point @ x
        expect = binom.logpmf(d.y_point, d.n_point, expit(eta))
        assert record_log_likelihoods(d, x) == pytest.approx(expect, abs=1e-9)


@pytest.fixture(scope="module")
def report():
    g, part, pop, cov, truth, masked = multi_year_sim()
    return cpo_holdout(ModelSpec(method="mixture"), g, part, masked,
                       pop=pop, covariates=cov, n_times=4,
                       n_samples=150, seed=0, fixed=FIXED_HYPERS)


class TestCpoHoldout:
    def test_one_row_per_year(self, report):
        assert [r.year for r in report.rows] == [0, 1, 2, 3]

    def test_record_counts(self, report):
        g, part, pop, cov, truth, masked = multi_year_sim()
        counts = {t: 0 for t in range(4)}
        for r in masked.all_records:
            counts[r.time] += 1
        assert {r.year: r.n_records for r in report.rows} == counts

    def test_scores_finite_negative(self, report):
        for r in report.rows:
            assert np.isfinite(r.total_log_cpo)
            assert r.total_log_cpo < 0
            assert 0 < r.mc_se < abs(r.total_log_cpo)

    def test_table_has_total_row(self, report):
        table = report.as_table()
        assert table[-1]["year"] == "total"
        assert table[-1]["total_log_cpo"] == pytest.approx(report.total)
        assert report.total == pytest.approx(
            sum(r.total_log_cpo for r in report.rows))

    def test_year_subset(self):
        g, part, pop, cov, truth, masked = multi_year_sim()
        rep = cpo_holdout(ModelSpec(method="mixture"), g, part, masked,
                          pop=pop, covariates=cov, n_times=4,
                          n_samples=60, seed=0, years=[2], fixed=FIXED_HYPERS)
        assert [r.year for r in rep.rows] == [2]


class TestCpoQuadratureOracle:
    def test_mc_matches_gaussian_quadrature(self):
        # dense training data in one cell makes the posterior over that
        # cell's linear predictor tight, so the Monte Carlo CPO of one
        # held-out record can be checked against direct quadrature of the
        # binomial likelihood over the Gaussian posterior marginal
        g = GridGeometry(1, 1)
        part = block_partition(g, 1)
        train = [Record(cell=0, stratum=0, time=0, y=y, n=200, cluster=i)
                 for i, y in enumerate([58, 61, 55, 63, 60, 59, 62, 57])]
        obs = ObservationSet(point_records=train)
        spec = ModelSpec(method="unmasked")
        d = build_design(spec, g, part, obs)
        fit = optimize_hyperparameters(
            d, fixed={"log_rho": 0.0, "log_sigma": 0.0})

        test_obs = ObservationSet(point_records=[
            Record(cell=0, stratum=0, time=0, y=12, n=40, cluster=99)])
        td = build_design(spec, g, part, test_obs)
        draws = posterior_samples(fit, 40000, seed=5)
        ll = np.array([record_log_likelihoods(td, x)[0] for x in draws])
        m = ll.max()
        log_cpo_mc = m + np.log(np.exp(ll - m).mean())

        # Gaussian marginal of the test record's linear predictor
        z = td.z_point.toarray()[0]
        mean_eta = float(z @ fit.x_hat)
        cov_col = fit.posterior_factor.solve(z)
        sd_eta = float(np.sqrt(z @ cov_col))
        shift = binom.logpmf(12, 40, expit(mean_eta))

        def f(s):
            return (np.exp(binom.logpmf(12, 40, expit(s)) - shift)
                    * norm.pdf(s, mean_eta, sd_eta))

        val, _ = quad(f, mean_eta - 12 * sd_eta, mean_eta + 12 * sd_eta,
                      limit=200)
        log_cpo_quad = np.log(val) + shift
        assert log_cpo_mc == pytest.approx(log_cpo_quad, abs=1e-3)


class TestCpoValidation:
    def test_no_training_data_raises(self):
        g = GridGeometry(2, 2)
        part = block_partition(g, 1)
        obs = ObservationSet(point_records=[
            Record(cell=0, stratum=0, time=0, y=1, n=10, cluster=0)])
        with pytest.raises(ValueError, match="training"):
            cpo_holdout(ModelSpec(method="unmasked"), g, part, obs,
                        n_samples=10)
