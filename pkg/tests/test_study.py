import json

import numpy as np
import pytest

from maskedgeo.io import config_hash
from maskedgeo.study import (
    METHODS,
    ExperimentConfig,
    _child_seeds,
    config_dict,
    consolidate,
    desk_profile,
    paper_profile,
    run_replicate,
    run_study,
    study_failures,
)


def tiny(**overrides):
    base = dict(name="tiny", grid_size=8, rhos=(0.4,),
                covariate_kinds=("iid",), n_strata_side=2,
                clusters_per_stratum=2, n_trials=40, n_replicates=2,
                maxfev=5, n_posterior_samples=40)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_profiles_match_published_scales(self):
        desk = desk_profile()
        assert (desk.grid_size, desk.n_clusters, desk.n_replicates) == (30, 100, 50)
        assert desk.rhos == (0.3, 0.5) and len(desk.covariate_kinds) == 2
        assert desk.n_trials == 250
        paper = paper_profile()
        assert (paper.grid_size, paper.n_clusters) == (60, 300)

    def test_scenarios_cross_product(self):
        cfg = tiny(rhos=(0.3, 0.5), covariate_kinds=("iid", "spatial"))
        cells = cfg.scenarios
        assert len(cells) == 4
        assert [c.index for c in cells] == [0, 1, 2, 3]
        assert {(c.rho, c.covariate_kind) for c in cells} == {
            (0.3, "iid"), (0.3, "spatial"), (0.5, "iid"), (0.5, "spatial")}

    def test_validation(self):
        with pytest.raises(ValueError, match="unknown methods"):
            tiny(methods=("unmasked", "oracle"))
        with pytest.raises(ValueError, match="unmasked"):
            tiny(methods=("ignore", "mixture"))
        with pytest.raises(ValueError, match="replicate"):
            tiny(n_replicates=0)
        with pytest.raises(ValueError, match="geometry"):
            tiny(grid_size=1)

    def test_config_dict_plain_types(self):
        d = config_dict(tiny())
        json.dumps(d)  # fully serializable
        assert d["rhos"] == [0.4]
        assert config_hash(d) == config_hash(config_dict(tiny()))
        assert config_hash(d) != config_hash(config_dict(tiny(root_seed=1)))


class TestSeeds:
    def test_stable_and_distinct(self):
        cfg = tiny()
        s = _child_seeds(cfg, 0, 0)
        assert s == _child_seeds(cfg, 0, 0)
        everything = [
            seed
            for sc in range(2) for rep in range(3)
            for seed in _child_seeds(cfg, sc, rep).values()
        ]
        assert len(set(everything)) == len(everything)

    def test_root_seed_changes_all(self):
        a = _child_seeds(tiny(), 0, 0)
        b = _child_seeds(tiny(root_seed=99), 0, 0)
        assert all(a[k] != b[k] for k in a)


class TestRunReplicate:
    def test_metrics_present_and_deterministic(self):
        cfg = tiny()
        out = run_replicate(cfg, cfg.scenarios[0], 0)
        again = run_replicate(cfg, cfg.scenarios[0], 0)
        # identical except wall time
        for m in METHODS:
            assert {k: v for k, v in out[m].items() if k != "seconds"} == \
                   {k: v for k, v in again[m].items() if k != "seconds"}
        for m in METHODS:
            for f in ("rmse", "bias", "coverage", "pct_increase", "seconds"):
                assert np.isfinite(out[m][f])
            assert 0.0 <= out[m]["coverage"] <= 1.0
        assert out["unmasked"]["pct_increase"] == 0.0


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    cfg = tiny()
    workdir = tmp_path_factory.mktemp("study")
    results = run_study(cfg, workdir, n_threads=1)
    return cfg, workdir, results


class TestRunStudy:
    def test_resume_reuses_partials(self, finished):
        cfg, workdir, results = finished
        partials = sorted((workdir / "partial").glob("*.npz"))
        assert len(partials) == 2
        stamps = [p.stat().st_mtime_ns for p in partials]
        again = run_study(cfg, workdir, n_threads=1)
        assert [p.stat().st_mtime_ns for p in partials] == stamps
        assert consolidate(cfg, again) == consolidate(cfg, results)

    def test_thread_count_invariance(self, finished, tmp_path):
        cfg, _, results = finished
        threaded = run_study(cfg, tmp_path / "w2", n_threads=2)
        assert consolidate(cfg, threaded) == consolidate(cfg, results)

    def test_corrupt_partial_recomputed(self, finished, tmp_path):
        cfg, workdir, results = finished
        import shutil
        w2 = tmp_path / "w3"
        shutil.copytree(workdir, w2)
        victim = sorted((w2 / "partial").glob("*.npz"))[0]
        victim.write_bytes(b"not an npz")
        redone = run_study(cfg, w2, n_threads=1)
        assert consolidate(cfg, redone) == consolidate(cfg, results)


class TestFailures:
    def test_failure_recorded_not_raised(self, tmp_path, monkeypatch):
        cfg = tiny()
        import maskedgeo.study as study_mod

        real = study_mod.run_replicate

        def flaky(config, scenario, rep):
            if rep == 1:
                raise RuntimeError("boom")
            return real(config, scenario, rep)

        monkeypatch.setattr(study_mod, "run_replicate", flaky)
        results = study_mod.run_study(cfg, tmp_path, n_threads=1)
        fails = study_failures(results)
        assert [f["replicate"] for f in fails] == [1]
        assert "boom" in fails[0]["error"]
        with pytest.raises(ValueError, match="failed"):
            consolidate(cfg, results)


class TestConsolidate:
    def test_report_shape(self, finished):
        cfg, _, results = finished
        report = consolidate(cfg, results)
        assert len(report["rows"]) == len(cfg.scenarios) * len(cfg.methods)
        row = report["rows"][0]
        assert row["n_replicates"] == cfg.n_replicates
        assert {"mean_rmse", "sd_rmse", "mean_coverage",
                "mean_pct_increase"} <= set(row)
        json.dumps(report)  # plain types only

    def test_missing_replicate_detected(self, finished):
        cfg, _, results = finished
        with pytest.raises(ValueError, match="missing"):
            consolidate(cfg, results[:-1])
