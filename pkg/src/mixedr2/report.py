"""Per-model R^2 panels and multi-model comparison tables."""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .design import Dataset, DesignData, ModelSpec, build_design
from .glm import adjust, fit_glm, r2_kl, r2_v
from .glmm import (fit_glmm, glmm_ic, nakagawa_glmm, r2_f_glmm, r2_m_glmm,
                   r2_r_glmm)
from .lmm import fit_lmm, nakagawa_lmm, r2_f_lmm, r2_m_lmm, r2_r, xu_lmm
from .varfun import get_family

__all__ = [
    "AnalysisOptions",
    "R2Report",
    "ComparisonTable",
    "ModelFailure",
    "analyze_model",
    "compare_models",
    "to_tsv",
    "to_markdown",
    "to_json",
    "from_json",
]

IDENTITY_TOL = 1e-12


class ModelFailure(RuntimeError):
    def __init__(self, label, cause):
        super().__init__(f"model {label!r} failed: {cause}")
        self.label = label
        self.cause = cause


@dataclass(frozen=True)
class AnalysisOptions:
    method: str = "ML"
    nodes: int = 15
    benchmark: bool = False
    nakagawa_approx: str = "lognormal"


@dataclass(frozen=True)
class R2Report:
    label: str
    family: str
    n: int
    p: int
    m: int
    r2_m: float = math.nan
    r2_f: float = math.nan
    r2_r: float = math.nan
    r2_m_adj: float = math.nan
    r2_f_adj: float = math.nan
    r2_r_adj: float = math.nan
    nakagawa_marginal: float = math.nan
    nakagawa_conditional: float = math.nan
    xu_omega2: float = math.nan
    r2_v: float = math.nan
    r2_v_adj: float = math.nan
    r2_kl: float = math.nan
    r2_kl_adj: float = math.nan
    loglik: float = math.nan
    aic: float = math.nan
    bic: float = math.nan
    error: str = ""

    @property
    def ok(self):
        return not self.error


def _adjusted(r2, n, k):
    return adjust(r2, n - k, n - 1, n)


def analyze_model(dataset: Dataset, spec: ModelSpec, options: AnalysisOptions | None = None,
                  label: str | None = None) -> R2Report:
    """Fit one mixed model and compute every R^2 panel entry.

    Gaussian/identity models use the LMM fitter; others use the AGQ GLMM with
    the fixed-effects share taken from the GLM that drops the random intercept.
    With ``options.benchmark`` the model is refitted as a GLM with the grouping
    factor as fixed effects to give ``r2_v`` and ``r2_kl`` (classical R^2 for
    gaussian).
    """
    options = options or AnalysisOptions()
    label = label or spec.to_formula()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return _analyze(dataset, spec, options, label)
    except Exception as exc:  # noqa: BLE001 - every failure is tagged with its model
        raise ModelFailure(label, exc) from exc


def _analyze(dataset, spec, options, label):
    family = get_family(spec.family, spec.link)
    design = build_design(dataset, spec)
    y, n, p, m = design.y, design.n, design.p, design.m
    vals = {}
    if family.name == "gaussian" and family.link.name == "identity":
        fit = fit_lmm(design, options.method)
        vals["r2_m"] = r2_m_lmm(fit, y)
        vals["r2_f"] = r2_f_lmm(fit, y)
        vals["nakagawa_marginal"], vals["nakagawa_conditional"] = nakagawa_lmm(fit)
        vals["xu_omega2"] = xu_lmm(fit, y)
        loglik = fit.loglik
        # fixed effects plus tau2 and sigma2
        aic = -2 * loglik + 2 * (p + 2)
        bic = -2 * loglik + math.log(n) * (p + 2)
    else:
        fit = fit_glmm(design, family, options.nodes)
        fixed = fit_glm(design, family)
        vals["r2_m"] = r2_m_glmm(fit, y, family)
        vals["r2_f"] = r2_f_glmm(fixed, y, family)
        rv_fixed = r2_v(fixed, y, family)
        if abs(rv_fixed - vals["r2_f"]) > IDENTITY_TOL:
            raise AssertionError(f"R2_F and R2_V of the fixed-only GLM differ by "
                                 f"{abs(rv_fixed - vals['r2_f']):.3g}")
        null_fit = None
        if family.name == "poisson":
            null_fit = fit_glmm(DesignData(
                design.y, design.X[:, :1], design.group_index, design.offset,
                design.column_names[:1], design.group_levels), family, options.nodes)
        vals["nakagawa_marginal"], vals["nakagawa_conditional"] = nakagawa_glmm(
            fit, family, options.nakagawa_approx, null_fit)
        loglik = fit.loglik
        aic, bic = glmm_ic(fit)
    vals["r2_r"] = r2_r(vals["r2_m"], vals["r2_f"])
    # one variance component beyond the fixed effects
    vals["r2_m_adj"] = _adjusted(vals["r2_m"], n, p + 1)
    vals["r2_f_adj"] = _adjusted(vals["r2_f"], n, p + 1)
    vals["r2_r_adj"] = r2_r_glmm(vals["r2_m_adj"], vals["r2_f_adj"])

    if options.benchmark:
        bdesign = design.without_random()
        bench = fit_glm(bdesign, family)
        vals["r2_v"] = r2_v(bench, y, family)
        vals["r2_v_adj"] = _adjusted(vals["r2_v"], n, bdesign.p)
        if family.is_likelihood:
            vals["r2_kl"] = r2_kl(bench)
            vals["r2_kl_adj"] = _adjusted(vals["r2_kl"], n, bdesign.p)

    return R2Report(label=label, family=family.name, n=n, p=p, m=m, loglik=loglik,
                    aic=aic, bic=bic, **vals)


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[R2Report, ...]
    best_aic: int | None
    best_bic: int | None
    best_r2_m_adj: int | None

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)


def _best(rows, key, pick):
    best, idx = None, None
    for i, r in enumerate(rows):
        v = getattr(r, key)
        if not r.ok or not np.isfinite(v):
            continue
        if best is None or (v < best if pick == "min" else v > best):
            best, idx = v, i
    return idx


def compare_models(dataset: Dataset, specs, options: AnalysisOptions | None = None,
                   labels=None) -> ComparisonTable:
    """Analyse each model in order; a failing model yields a row carrying its error."""
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one model")
    labels = list(labels) if labels is not None else [s.to_formula() for s in specs]
    rows = []
    for spec, label in zip(specs, labels):
        try:
            rows.append(analyze_model(dataset, spec, options, label))
        except ModelFailure as exc:
            rows.append(R2Report(label=label, family=spec.family, n=dataset.n_rows,
                                 p=0, m=0, error=str(exc.cause) or type(exc.cause).__name__))
    return ComparisonTable(tuple(rows), _best(rows, "aic", "min"), _best(rows, "bic", "min"),
                           _best(rows, "r2_m_adj", "max"))


_FLOAT_FIELDS = [f.name for f in fields(R2Report) if f.type in ("float", float)]


def _num(x, digits):
    if x is None or not np.isfinite(x):
        return None
    return float(format(x, f".{digits}g"))


def report_to_dict(report: R2Report, digits: int = 10) -> dict:
    d = asdict(report)
    for k in _FLOAT_FIELDS:
        d[k] = _num(d[k], digits)
    return d


def report_from_dict(d: dict) -> R2Report:
    d = dict(d)
    for k in _FLOAT_FIELDS:
        d[k] = math.nan if d.get(k) is None else float(d[k])
    return R2Report(**d)


def to_json(table, digits: int = 10) -> str:
    """JSON text for one report or a comparison table (NaN becomes null)."""
    if isinstance(table, R2Report):
        payload = report_to_dict(table, digits)
    else:
        payload = {"models": [report_to_dict(r, digits) for r in table.rows],
                   "best_aic": table.best_aic, "best_bic": table.best_bic,
                   "best_r2_m_adj": table.best_r2_m_adj}
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def from_json(text: str):
    payload = json.loads(text)
    if "models" in payload:
        rows = tuple(report_from_dict(r) for r in payload["models"])
        return ComparisonTable(rows, payload["best_aic"], payload["best_bic"],
                               payload["best_r2_m_adj"])
    return report_from_dict(payload)


def _as_table(table):
    if isinstance(table, R2Report):
        return ComparisonTable((table,), 0 if table.ok else None, 0 if table.ok else None,
                               0 if table.ok else None)
    return table


TSV_COLUMNS = ["label", "family", "n", "p", "m", "r2_m", "r2_m_adj", "r2_f", "r2_f_adj",
               "r2_r", "r2_r_adj", "nakagawa_marginal", "nakagawa_conditional", "xu_omega2",
               "r2_v", "r2_v_adj", "r2_kl", "r2_kl_adj", "loglik", "aic", "bic", "error"]


def _fmt(x, digits=10):
    if isinstance(x, float):
        return "" if not np.isfinite(x) else format(x, f".{digits}g")
    return str(x)


def to_tsv(table) -> str:
    table = _as_table(table)
    buf = io.StringIO()
    buf.write("\t".join(TSV_COLUMNS) + "\n")
    for r in table.rows:
        buf.write("\t".join(_fmt(getattr(r, c)) for c in TSV_COLUMNS) + "\n")
    return buf.getvalue()


def to_markdown(table) -> str:
    """Aligned markdown comparison table, one row per model.

    Adjusted values sit in parentheses; the best AIC, BIC and adjusted R_M^2
    are bold.
    """
    table = _as_table(table)
    rows = table.rows
    has_xu = any(np.isfinite(r.xu_omega2) for r in rows)
    has_v = any(np.isfinite(r.r2_v) for r in rows)
    has_kl = any(np.isfinite(r.r2_kl) for r in rows)

    def f3(x):
        return "" if not np.isfinite(x) else f"{x:.3f}"

    def pair(x, adj, bold=False):
        if not np.isfinite(x):
            return ""
        a = f3(adj)
        return f"{x:.3f} ({'**' + a + '**' if bold else a})"

    header = ["Model", "R2_M (adj)", "NJS_M"] + (["Xu"] if has_xu else []) + [
        "R2_F", "NJS_F", "AIC", "BIC"]
    if has_v:
        header.append("R2_V (adj)" if rows[0].family != "gaussian" else "R2 (adj)")
    if has_kl and rows[0].family != "gaussian":
        header.append("R2_KL (adj)")
    body = []
    for i, r in enumerate(rows):
        if not r.ok:
            body.append([r.label, f"failed: {r.error}"] + [""] * (len(header) - 2))
            continue
        aic = f"{r.aic:.0f}"
        bic = f"{r.bic:.0f}"
        if i == table.best_aic:
            aic = f"**{aic}**"
        if i == table.best_bic:
            bic = f"**{bic}**"
        line = [r.label, pair(r.r2_m, r.r2_m_adj, i == table.best_r2_m_adj),
                f3(r.nakagawa_conditional)]
        if has_xu:
            line.append(f3(r.xu_omega2))
        line += [f3(r.r2_f), f3(r.nakagawa_marginal), aic, bic]
        if has_v:
            line.append(pair(r.r2_v, r.r2_v_adj))
        if has_kl and rows[0].family != "gaussian":
            line.append(pair(r.r2_kl, r.r2_kl_adj))
        body.append(line)
    widths = [max(len(h), *(len(b[j]) for b in body)) for j, h in enumerate(header)]

    def fmt_row(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [fmt_row(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [fmt_row(b) for b in body]
    return "\n".join(out) + "\n"
