import numpy as np
import pytest

from mixedr2.sim import (CSV_COLUMNS, SimConfig, beta_grid, default_config, generate,
                         generate_lmm, generate_logistic, generate_loglinear, replicate_measures,
                         run_study)


class TestGrid:
    def test_inclusive(self):
        assert beta_grid(0, 2, 0.5) == (0.0, 0.5, 1.0, 1.5, 2.0)
        assert beta_grid(0, 2, 0.25)[-1] == 2.0 and len(beta_grid(0, 2, 0.25)) == 9

    def test_stop_not_hit(self):
        assert beta_grid(0, 1, 0.3) == (0.0, 0.3, 0.6, 0.9)

    def test_float_noise_snapped(self):
        assert beta_grid(0, 0.3, 0.1) == (0.0, 0.1, 0.2, 0.3)

    @pytest.mark.parametrize("args", [(0, 1, 0), (1, 0, 0.1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            beta_grid(*args)


class TestConfig:
    def test_uneven_groups_rejected(self):
        with pytest.raises(ValueError):
            default_config("lmm", n_obs=201)

    def test_odd_group_size_rejected(self):
        with pytest.raises(ValueError):
            default_config("lmm", n_obs=150, m=50)

    def test_defaults(self):
        assert default_config("loglinear-poisson").random_sd == 0.5
        assert default_config("lmm").n_obs == 200
        assert default_config("logistic").n_obs == 400


class TestGenerators:
    def test_layout(self):
        cfg = default_config("lmm", m=10, n_obs=200)
        ds = generate_lmm(cfg, 1.0, 0)
        g, x1 = ds["g"], ds["x1"]
        for i in range(10):
            xs = x1[g == i]
            assert len(xs) == 20 and (xs == 1).sum() == 10 and (xs == -1).sum() == 10

    def test_beta_zero_uncorrelated(self):
        cfg = default_config("lmm")
        cors = [np.corrcoef(d["y"], d["x1"])[0, 1]
                for d in (generate_lmm(cfg, 0.0, r) for r in range(200))]
        assert abs(np.median(cors)) < 0.02

    def test_logistic_null(self):
        cfg = default_config("logistic", random_sd=0.0)
        means = [generate_logistic(cfg, 0.0, r)["y"].mean() for r in range(50)]
        assert abs(np.mean(means) - 0.5) < 0.02

    def test_logistic_saturates(self):
        cfg = default_config("logistic")
        d = generate_logistic(cfg, 12.0, 0)
        assert d["y"][d["x1"] == 1].mean() > 0.97

    def test_poisson_null(self):
        cfg = default_config("loglinear-poisson", random_sd=0.0)
        means = [generate_loglinear(cfg, 0.0, r)["y"].mean() for r in range(50)]
        assert abs(np.mean(means) - 1) < 0.05

    def test_negbin_geometric(self):
        # mu = 0 gives success probability 1/2 and mean (1 - p) / p = 1
        cfg = default_config("loglinear-negbin", random_sd=0.0, nb_size=1.0)
        means = [generate_loglinear(cfg, 0.0, r)["y"].mean() for r in range(50)]
        assert abs(np.mean(means) - 1) < 0.05

    def test_wrong_study(self):
        with pytest.raises(ValueError):
            generate_logistic(default_config("lmm"), 0.0, 0)


class TestStreams:
    def test_reproducible(self):
        cfg = default_config("logistic")
        a, b = generate(cfg, 1.0, 7, 3), generate(cfg, 1.0, 7, 3)
        assert a["y"].tobytes() == b["y"].tobytes()
        assert a["x2"].tobytes() == b["x2"].tobytes()

    def test_substreams_differ(self):
        cfg = default_config("lmm")
        assert not np.array_equal(generate(cfg, 1.0, 0)["y"], generate(cfg, 1.0, 1)["y"])
        assert not np.array_equal(generate(cfg, 1.0, 0, 0)["x2"], generate(cfg, 1.0, 0, 1)["x2"])

    def test_independent_of_other_replicates(self):
        small = default_config("lmm", replicates=2, beta_grid=(1.0,))
        large = default_config("lmm", replicates=50, beta_grid=(0.0, 1.0))
        direct = replicate_measures(small, 0, 1)
        assert replicate_measures(large, 1, 1) != direct  # different beta index
        assert replicate_measures(SimConfig(**{**small.__dict__, "replicates": 50}), 0, 1) == direct

    def test_seed_changes_data(self):
        a = generate(default_config("lmm", seed=1), 1.0, 0)
        b = generate(default_config("lmm", seed=2), 1.0, 0)
        assert not np.array_equal(a["y"], b["y"])


class TestRun:
    def test_small_lmm_study(self):
        cfg = default_config("lmm", replicates=20, beta_grid=(0.0, 1.0))
        res = run_study(cfg)
        assert len(res.rows) == 5 * 2 * 2
        assert all(r["n_ok"] + r["n_fail"] == 20 for r in res.rows)
        csv = res.to_csv().splitlines()
        assert tuple(csv[0].split(",")) == CSV_COLUMNS
        assert len(csv) == 21
        assert res.median("r2_f", "x2", 0.0) == pytest.approx(0, abs=0.05)

    def test_parallel_identical(self):
        cfg = default_config("logistic", replicates=3, beta_grid=(0.0, 1.0), n_obs=100, m=25)
        assert run_study(cfg, 1).to_csv() == run_study(cfg, 2).to_csv()

    def test_keep_raw(self):
        cfg = default_config("lmm", replicates=4, beta_grid=(1.0,), keep_raw=True)
        res = run_study(cfg)
        raw = res.raw["x1:r2_m"]
        assert raw.shape == (1, 4)
        assert res.median("r2_m", "x1", 1.0) == pytest.approx(np.median(raw[0]))

    def test_glmm_measures_present(self):
        cfg = default_config("loglinear-poisson", replicates=2, beta_grid=(1.0,), n_obs=100,
                             m=25)
        res = run_study(cfg)
        measures = {r["measure"] for r in res.rows}
        assert {"r2_v", "r2_kl", "r2_v_group", "r2_kl_group"} <= measures
        # identity between the fixed-only share and R_V of the same GLM
        assert res.series("r2_f", "x1") == res.series("r2_v", "x1")


class TestStudyProperties:
    def test_lmm_nakagawa_at_beta_one(self):
        res = run_study(default_config("lmm", replicates=200, beta_grid=(1.0,), models=("x1",)))
        assert res.median("nakagawa_marginal", "x1", 1.0) == pytest.approx(1 / 3, abs=0.03)
        assert res.median("nakagawa_conditional", "x1", 1.0) == pytest.approx(2 / 3, abs=0.03)

    def test_logistic_tau_estimate(self):
        from mixedr2.glmm import fit_glmm
        from mixedr2.sim import _design
        from mixedr2.varfun import get_family
        cfg = default_config("logistic", replicates=200)
        fam = get_family("binomial")
        taus = [fit_glmm(_design(generate(cfg, 1.0, r), "x1"), fam).tau2 for r in range(200)]
        assert np.median(taus) == pytest.approx(1.0, abs=0.15)

    def test_logistic_signal_and_null(self):
        cfg = default_config("logistic", replicates=60, beta_grid=(0.0, 0.5, 1.0, 1.5, 2.0),
                             benchmarks=False)
        res = run_study(cfg)
        rf = res.series("r2_f", "x1")
        assert all(a <= b for a, b in zip(rf, rf[1:])), rf
        assert all(abs(v) <= 0.02 for v in res.series("r2_f", "x2"))
