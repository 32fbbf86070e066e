"""Monte-Carlo studies of the R^2 measures under known random-intercept designs.

Every replicate draws from its own Philox stream keyed by
``(seed, beta index, replicate)``, so results do not depend on which other
replicates run, in which order, or in how many worker processes.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .design import Dataset, DesignData
from .glm import fit_glm, r2_kl, r2_v
from .glmm import fit_glmm, nakagawa_glmm, r2_f_glmm, r2_m_glmm
from .lmm import fit_lmm, nakagawa_lmm, r2_f_lmm, r2_m_lmm, xu_lmm
from .varfun import get_family

__all__ = [
    "STUDIES",
    "SimConfig",
    "SimResult",
    "default_config",
    "generate",
    "generate_lmm",
    "generate_logistic",
    "generate_loglinear",
    "replicate_measures",
    "run_study",
    "beta_grid",
]

STUDIES = ("lmm", "logistic", "loglinear-poisson", "loglinear-negbin")
CSV_COLUMNS = ("study", "beta", "measure", "model", "median", "n_ok", "n_fail")
FAIL_LIMIT = 0.05

LMM_MEASURES = ("r2_m", "r2_f", "nakagawa_marginal", "nakagawa_conditional", "xu_omega2")
GLMM_MEASURES = ("r2_m", "r2_f", "nakagawa_marginal", "nakagawa_conditional",
                 "r2_v", "r2_kl", "r2_v_group", "r2_kl_group")


def beta_grid(start: float, stop: float, step: float) -> tuple[float, ...]:
    """Inclusive arithmetic grid; ``stop`` is kept when hit within 1e-12."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    if stop < start:
        raise ValueError("grid stop must not be below start")
    count = int(math.floor((stop - start) / step + 1e-12)) + 1
    out = [start + k * step for k in range(count)]
    if abs(out[-1] + step - stop) <= 1e-12:
        out.append(stop)
    # snap representation noise such as 0.30000000000000004
    return tuple(float(round(b, 12)) for b in out)


@dataclass(frozen=True)
class SimConfig:
    study: str
    n_obs: int
    m: int
    beta_grid: tuple[float, ...]
    replicates: int = 200
    seed: int = 0
    random_sd: float = 1.0
    models: tuple[str, ...] = ("x1", "x2")
    nb_size: float = 1.0
    method: str = "ML"
    nodes: int = 15
    benchmarks: bool = True
    keep_raw: bool = False

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValueError(f"unknown study {self.study!r}; choose from {STUDIES}")
        if self.m < 2 or self.n_obs % self.m:
            raise ValueError(f"n_obs={self.n_obs} must split evenly into m={self.m} groups")
        if (self.n_obs // self.m) % 2:
            raise ValueError("group size must be even so X1 splits half +1, half -1")
        if not self.beta_grid:
            raise ValueError("beta_grid must be nonempty")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.random_sd < 0:
            raise ValueError("random_sd must be nonnegative")
        if not self.models or any(mdl not in ("x1", "x2") for mdl in self.models):
            raise ValueError("models must be a nonempty subset of ('x1', 'x2')")

    @property
    def group_size(self):
        return self.n_obs // self.m


def default_config(study: str, **overrides) -> SimConfig:
    """Default simulation designs at desk scale (200 replicates)."""
    base = {
        "lmm": dict(n_obs=200, m=50, random_sd=1.0),
        "logistic": dict(n_obs=400, m=50, random_sd=1.0),
        "loglinear-poisson": dict(n_obs=400, m=50, random_sd=0.5),
        "loglinear-negbin": dict(n_obs=400, m=50, random_sd=0.5),
    }[study]
    base.update(study=study, beta_grid=beta_grid(0.0, 2.0, 0.25))
    base.update(overrides)
    return SimConfig(**base)


def _rng(config: SimConfig, beta_index: int, replicate: int) -> np.random.Generator:
    ss = np.random.SeedSequence([config.seed, beta_index, replicate])
    return np.random.Generator(np.random.Philox(ss))


def _layout(config, rng):
    m, k = config.m, config.group_size
    g = np.repeat(np.arange(m), k)
    x1 = np.tile(np.r_[np.ones(k // 2), -np.ones(k // 2)], m)
    mu = rng.normal(0.0, config.random_sd, size=m)
    x2 = rng.standard_normal(config.n_obs)
    return g, x1, x2, mu


def _dataset(y, x1, x2, g):
    return Dataset({"y": np.asarray(y, float), "x1": x1, "x2": x2, "g": g.astype(float)})


def generate_lmm(config: SimConfig, beta: float, replicate_index: int,
                 beta_index: int = 0) -> Dataset:
    """``y = mu_g + beta * x1 + e`` with ``mu_g ~ N(0, random_sd^2)`` and ``e ~ N(0, 1)``."""
    if config.study != "lmm":
        raise ValueError("generate_lmm needs an lmm study config")
    rng = _rng(config, beta_index, replicate_index)
    g, x1, x2, mu = _layout(config, rng)
    y = mu[g] + beta * x1 + rng.standard_normal(config.n_obs)
    return _dataset(y, x1, x2, g)


def generate_logistic(config: SimConfig, beta: float, replicate_index: int,
                      beta_index: int = 0) -> Dataset:
    if config.study != "logistic":
        raise ValueError("generate_logistic needs a logistic study config")
    rng = _rng(config, beta_index, replicate_index)
    g, x1, x2, mu = _layout(config, rng)
    prob = 1.0 / (1.0 + np.exp(-mu[g] - x1 * beta))
    y = (rng.random(config.n_obs) < prob).astype(float)
    return _dataset(y, x1, x2, g)


def generate_loglinear(config: SimConfig, beta: float, replicate_index: int,
                       beta_index: int = 0) -> Dataset:
    """Poisson counts with log mean ``mu_g + beta * x1``, or negative-binomial
    failures before ``nb_size`` successes with success probability
    ``1 / (1 + exp(-mu_g - beta * x1))``."""
    if config.study not in ("loglinear-poisson", "loglinear-negbin"):
        raise ValueError("generate_loglinear needs a loglinear study config")
    rng = _rng(config, beta_index, replicate_index)
    g, x1, x2, mu = _layout(config, rng)
    lin = mu[g] + x1 * beta
    if config.study == "loglinear-poisson":
        y = rng.poisson(np.exp(lin))
    else:
        y = rng.negative_binomial(config.nb_size, 1.0 / (1.0 + np.exp(-lin)))
    return _dataset(y, x1, x2, g)


def generate(config: SimConfig, beta: float, replicate_index: int, beta_index: int = 0):
    if config.study == "lmm":
        return generate_lmm(config, beta, replicate_index, beta_index)
    if config.study == "logistic":
        return generate_logistic(config, beta, replicate_index, beta_index)
    return generate_loglinear(config, beta, replicate_index, beta_index)


def _design(data: Dataset, covariate: str | None) -> DesignData:
    n = data.n_rows
    cols = [np.ones(n)] + ([data[covariate]] if covariate else [])
    names = ["(Intercept)"] + ([covariate] if covariate else [])
    return DesignData.from_arrays(data["y"], np.column_stack(cols), data["g"].astype(int),
                                  column_names=names, check_rank=False)


def _lmm_measures(config, data):
    out = {}
    y = data["y"]
    for model in config.models:
        try:
            fit = fit_lmm(_design(data, model), config.method)
            marg, cond = nakagawa_lmm(fit)
            out[model] = {"r2_m": r2_m_lmm(fit, y), "r2_f": r2_f_lmm(fit, y),
                          "nakagawa_marginal": marg, "nakagawa_conditional": cond,
                          "xu_omega2": xu_lmm(fit, y)}
        except (RuntimeError, ValueError, np.linalg.LinAlgError):
            out[model] = None
    return out


def _glmm_measures(config, data):
    family = get_family("binomial" if config.study == "logistic" else "poisson")
    y = data["y"]
    out = {}
    null_fit = None
    if family.name == "poisson":
        try:
            null_fit = fit_glmm(_design(data, None), family, config.nodes)
        except (RuntimeError, ValueError, np.linalg.LinAlgError):
            return {model: None for model in config.models}
    for model in config.models:
        try:
            design = _design(data, model)
            fit = fit_glmm(design, family, config.nodes)
            glm = fit_glm(design, family)
            marg, cond = nakagawa_glmm(fit, family, null_fit=null_fit)
            vals = {"r2_m": r2_m_glmm(fit, y, family), "r2_f": r2_f_glmm(glm, y, family),
                    "nakagawa_marginal": marg, "nakagawa_conditional": cond,
                    "r2_v": r2_v(glm, y, family), "r2_kl": r2_kl(glm)}
            if config.benchmarks:
                bench = fit_glm(design.without_random(), family)
                vals["r2_v_group"] = r2_v(bench, y, family)
                vals["r2_kl_group"] = r2_kl(bench)
            out[model] = vals
        except (RuntimeError, ValueError, np.linalg.LinAlgError):
            out[model] = None
    return out


def replicate_measures(config: SimConfig, beta_index: int, replicate: int):
    """All configured measures for one replicate: ``{model: {measure: value} | None}``."""
    data = generate(config, config.beta_grid[beta_index], replicate, beta_index)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if config.study == "lmm":
            return _lmm_measures(config, data)
        return _glmm_measures(config, data)


def _measure_names(config):
    if config.study == "lmm":
        return LMM_MEASURES
    names = GLMM_MEASURES
    return names if config.benchmarks else names[:6]


def _run_chunk(args):
    config, tasks = args
    return [(b, r, replicate_measures(config, b, r)) for b, r in tasks]


@dataclass(frozen=True)
class SimResult:
    config: SimConfig
    rows: tuple[dict, ...]
    raw: dict | None = field(default=None, compare=False)

    @property
    def flagged(self):
        return any(r["n_fail"] > FAIL_LIMIT * (r["n_ok"] + r["n_fail"]) for r in self.rows)

    def median(self, measure, model, beta):
        for r in self.rows:
            if r["measure"] == measure and r["model"] == model and r["beta"] == beta:
                return r["median"]
        raise KeyError((measure, model, beta))

    def series(self, measure, model):
        return [r["median"] for r in self.rows if r["measure"] == measure and r["model"] == model]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r["study"], repr(r["beta"]), r["measure"], r["model"],
                        repr(r["median"]), r["n_ok"], r["n_fail"]])
        return buf.getvalue()


def run_study(config: SimConfig, workers: int = 1) -> SimResult:
    """Simulate every (beta, replicate), fit the configured models, take medians.

    Failed fits are left out of the medians and counted in ``n_fail``; a grid
    point with more than 5% failures marks the result as ``flagged``.
    """
    tasks = [(b, r) for b in range(len(config.beta_grid)) for r in range(config.replicates)]
    if workers > 1:
        size = max(1, math.ceil(len(tasks) / (workers * 4)))
        chunks = [(config, tasks[i:i + size]) for i in range(0, len(tasks), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [item for part in pool.map(_run_chunk, chunks) for item in part]
    else:
        results = _run_chunk((config, tasks))

    measures = _measure_names(config)
    nb, R = len(config.beta_grid), config.replicates
    values = {(model, ms): np.full((nb, R), np.nan) for model in config.models for ms in measures}
    failed = {model: np.zeros((nb, R), bool) for model in config.models}
    for b, r, res in results:
        for model in config.models:
            vals = res[model]
            if vals is None or not all(np.isfinite(vals[ms]) for ms in measures):
                failed[model][b, r] = True
                continue
            for ms in measures:
                values[model, ms][b, r] = vals[ms]

    rows = []
    for ms in measures:
        for model in config.models:
            for b, beta in enumerate(config.beta_grid):
                ok = ~failed[model][b]
                col = values[model, ms][b, ok]
                rows.append({"study": config.study, "beta": beta, "measure": ms,
                             "model": model,
                             "median": float(np.median(col)) if col.size else float("nan"),
                             "n_ok": int(ok.sum()), "n_fail": int((~ok).sum())})
    raw = {f"{model}:{ms}": arr for (model, ms), arr in values.items()} if config.keep_raw else None
    return SimResult(config, tuple(rows), raw)
