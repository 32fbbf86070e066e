"""One test per acceptance criterion; a PASS/FAIL line for each is printed at the end."""

import csv
import math
import os
import time

import numpy as np
import pytest

from conftest import count_design, grouped_design
from test_lmm import brute_force_max

from mixedr2.cli import run
from mixedr2.design import DesignData, load_csv, parse_formula
from mixedr2.glm import fit_glm, r2_v
from mixedr2.glmm import fit_glmm, r2_f_glmm
from mixedr2.lmm import fit_lmm, r2_m_lmm
from mixedr2.report import AnalysisOptions, compare_models, from_json, to_json, to_markdown
from mixedr2.sim import default_config, run_study
from mixedr2.varfun import d_v, get_family

WORKERS = os.cpu_count() or 1


def test_criterion_01_distance_ratios():
    start = time.perf_counter()
    cases = [("binomial", 1, 0.75, 0.5, 0.2991), ("poisson", 3, 2, 1, 0.25),
             ("gamma", 3, 2, 1, 0.3805), ("inverse-gaussian", 2, 1, 0, 0.6735)]
    for fam, y, mu, mu0, expected in cases:
        f = get_family(fam)
        assert d_v(f, y, mu) / d_v(f, y, mu0) == pytest.approx(expected, abs=5e-4), fam
    assert time.perf_counter() - start < 1.0


def test_criterion_02_lmm_truth_tracking():
    start = time.perf_counter()
    cfg = default_config("lmm", m=50, n_obs=200, replicates=200,
                         beta_grid=(0.0, 0.5, 1.0, 2.0))
    res = run_study(cfg, WORKERS)
    assert not res.flagged
    for beta in cfg.beta_grid:
        b2 = beta * beta
        assert abs(res.median("r2_m", "x1", beta) - (b2 + 1) / (b2 + 2)) <= 0.03, beta
        assert abs(res.median("r2_f", "x1", beta) - b2 / (b2 + 2)) <= 0.03, beta
        assert abs(res.median("r2_f", "x2", beta)) <= 0.02, beta
    assert time.perf_counter() - start < 120


def test_criterion_03_xu_overestimation_grows_with_groups():
    gaps = {}
    for m in (10, 50):
        cfg = default_config("lmm", m=m, n_obs=200, replicates=200, beta_grid=(1.0,),
                             models=("x1",))
        res = run_study(cfg, WORKERS)
        gaps[m] = res.median("xu_omega2", "x1", 1.0) - res.median("r2_m", "x1", 1.0)
    assert gaps[50] > gaps[10]


def test_criterion_04_gaussian_reduction_chain():
    gauss = get_family("gaussian")
    for seed in range(20):
        d = grouped_design(seed, m=5, n_i=4, p=2, tau=1.0)
        lmm = fit_lmm(d, "ML")
        glmm = fit_glmm(d, gauss, nodes=1)
        assert glmm.loglik == pytest.approx(lmm.loglik, abs=1e-5), seed
        coef, *_ = np.linalg.lstsq(d.X, d.y, rcond=None)
        resid = d.y - d.X @ coef
        ols = 1 - resid @ resid / np.sum((d.y - d.y.mean()) ** 2)
        assert abs(r2_f_glmm(fit_glm(d, gauss), d.y, gauss) - ols) <= 1e-12, seed


def test_criterion_05_fixed_share_equals_r2_v():
    datasets = [(count_design(s, fam), fam) for s in range(10) for fam in ("binomial", "poisson")]
    datasets += [(grouped_design(s), "gaussian") for s in range(5)]
    for d, fam in datasets:
        f = get_family(fam)
        glm = fit_glm(d, f)
        assert abs(r2_f_glmm(glm, d.y, f) - r2_v(glm, d.y, f)) <= 1e-12


def test_criterion_06_poisson_x2_trends():
    cfg = default_config("loglinear-poisson", replicates=200, beta_grid=(0.0, 0.5, 1.0, 1.5, 2.0),
                         models=("x2",), benchmarks=False)
    res = run_study(cfg, WORKERS)
    rm = res.series("r2_m", "x2")
    cond = res.series("nakagawa_conditional", "x2")
    assert all(a > b for a, b in zip(rm, rm[1:])), rm
    assert all(a <= b for a, b in zip(cond, cond[1:])), cond


def test_criterion_07_fitter_oracles():
    for seed in range(5):
        d = grouped_design(seed, m=5, n_i=4, tau=1.2)
        assert abs(fit_lmm(d).loglik - brute_force_max(d)) <= 1e-4
    rng = np.random.default_rng(9)
    m, k = 8, 6
    g = np.repeat(np.arange(m), k)
    y = rng.normal(size=m)[g] * 1.3 + rng.normal(size=m * k)
    means = np.array([y[g == i].mean() for i in range(m)])
    s2 = np.sum((y - means[g]) ** 2) / (m * (k - 1))
    t2 = (k * np.sum((means - y.mean()) ** 2) / m - s2) / k
    fit = fit_lmm(DesignData.from_arrays(y, np.ones((m * k, 1)), g))
    assert abs(fit.sigma2 - s2) <= 1e-8 and abs(fit.tau2 - t2) <= 1e-8
    X = np.column_stack([np.ones(m * k), rng.normal(size=m * k)])
    glm = fit_glm(DesignData.from_arrays(y, X, g), get_family("gaussian"))
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    np.testing.assert_allclose(glm.beta, coef, atol=1e-10)


def test_criterion_08_two_point_toy():
    from types import SimpleNamespace
    fit = SimpleNamespace(eta_f=np.array([0.0, 1.0]), sigma2=1.0, tau2_ij=np.array([1.0, 1.0]))
    assert r2_m_lmm(fit, np.array([0.0, 2.0])) == 0.375


def test_criterion_09_simulate_deterministic_across_threads(tmp_path):
    outs = []
    for threads in (1, max(2, WORKERS)):
        path = tmp_path / f"t{threads}.csv"
        assert run(["simulate", "--study", "logistic", "--reps", "6", "--beta-grid", "0:1:0.5",
                    "--seed", "42", "--n-obs", "200", "--m", "25", "--threads", str(threads),
                    "-o", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _stand_ins(tmp_path):
    rng = np.random.default_rng(2024)
    corn = []
    for j in range(20):
        u, topo = rng.normal(0, 4), ["E", "HT", "LO", "W"][j % 4]
        for _ in range(15):
            n, b = rng.uniform(0, 200), rng.normal(70, 5)
            corn.append([100 + 0.1 * n - 0.5 * (b - 70) - 0.05 * (b - 70) ** 2 + u
                         + rng.normal(0, 4), n, b, topo, f"F{j}"])
    deer = []
    for j in range(24):
        u = rng.normal()
        for _ in range(15):
            l, s = rng.normal(), rng.choice(["F", "M"])
            p = 1 / (1 + np.exp(-(0.4 + 0.9 * l - 0.3 * l * l + u)))
            deer.append([int(rng.random() < p), l, s, j + 1])
    owl = []
    for j in range(20):
        u = rng.normal(0, 0.5)
        for _ in range(12):
            sib, food = int(rng.integers(1, 8)), rng.choice(["Deprived", "Satiated"])
            sex, t = rng.choice(["Female", "Male"]), rng.uniform(21, 29)
            mu = sib * np.exp(-0.6 + 0.3 * (food == "Deprived") + 0.05 * (t - 25) + u)
            owl.append([rng.poisson(mu), sib, sex, food, t, f"N{j}"])
    _write(tmp_path / "corn.csv", ["yield", "nitro", "bv", "topo", "fld"], corn)
    _write(tmp_path / "deer.csv", ["infected", "length", "sex", "farm"], deer)
    _write(tmp_path / "owl.csv", ["calls", "siblings", "sex", "food", "time", "nest"], owl)


def test_criterion_10_case_study_tables(tmp_path):
    _stand_ins(tmp_path)
    cases = {
        "corn": ("gaussian", {"fld": "categorical"},
                 ["yield ~ nitro + (1|fld)", "yield ~ nitro + bv + (1|fld)",
                  "yield ~ nitro + bv + bv^2 + (1|fld)"]),
        "deer": ("binomial", {"farm": "categorical"},
                 ["infected ~ length + (1|farm)", "infected ~ length + length^2 + (1|farm)",
                  "infected ~ length + length^2 + sex + (1|farm)"]),
        "owl": ("poisson", {},
                ["calls ~ food + (1|nest) + offset(log(siblings))",
                 "calls ~ food + time + (1|nest) + offset(log(siblings))",
                 "calls ~ sex*food + time + (1|nest) + offset(log(siblings))"]),
    }
    for name, (family, hints, formulas) in cases.items():
        data = load_csv(tmp_path / f"{name}.csv", hints)
        if name == "deer":
            assert data["farm"].levels and len(data["farm"].levels) == 24
        specs = [parse_formula(f, family) for f in formulas]
        table = compare_models(data, specs, AnalysisOptions(benchmark=True))
        fields = ["r2_m", "r2_f", "r2_r", "r2_m_adj", "r2_f_adj", "nakagawa_marginal",
                  "nakagawa_conditional", "r2_v", "r2_v_adj", "r2_kl", "r2_kl_adj", "aic", "bic"]
        if family == "gaussian":
            fields.append("xu_omega2")
        for row in table.rows:
            assert row.ok, row.error
            for f in fields:
                assert math.isfinite(getattr(row, f)), (name, row.label, f)
        rm = [r.r2_m for r in table.rows]
        assert all(a <= b + 1e-12 for a, b in zip(rm, rm[1:])), (name, rm)
        assert table.best_aic is not None and table.best_r2_m_adj is not None
        assert from_json(to_json(table, digits=17)) == table
        assert to_markdown(table).count("\n") == len(formulas) + 2
