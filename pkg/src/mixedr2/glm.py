"""Fixed-effects GLMs by IRLS, plus the variance-function and deviance R^2."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .design import DesignData
from .varfun import Family, dv_terms

__all__ = [
    "SeparationWarning",
    "GlmFit",
    "fit_glm",
    "glm_loglik",
    "r2_v",
    "variance_r2",
    "r2_kl",
    "adjust",
]

MAX_ITER = 100
TOL = 1e-10
SCORE_TOL = 1e-8
_EPS = 1e-10


class SeparationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class GlmFit:
    beta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    loglik: float
    deviance: float
    null_deviance: float
    n: int
    p: int
    family: str
    iterations: int
    converged: bool
    separated: bool = False
    dispersion: float = 1.0


def glm_loglik(family: Family, y, mu, dispersion=None) -> float:
    """Log-likelihood of ``y`` at means ``mu``; NaN for quasi families.

    Gaussian and gamma use the ML dispersion estimate when ``dispersion`` is None.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    name = family.name
    if name == "gaussian":
        s2 = float(np.mean((y - mu) ** 2)) if dispersion is None else dispersion
        return float(-0.5 * len(y) * math.log(2 * math.pi * s2) - np.sum((y - mu) ** 2) / (2 * s2))
    if name == "binomial":
        return float(np.sum(special.xlogy(y, mu) + special.xlogy(1 - y, 1 - mu)))
    if name == "poisson":
        return float(np.sum(special.xlogy(y, mu) - mu - special.gammaln(y + 1)))
    if name == "gamma":
        phi = family.deviance(y, mu) / len(y) if dispersion is None else dispersion
        shape = 1.0 / phi
        return float(np.sum(shape * np.log(shape * y / mu) - shape * y / mu
                            - np.log(y) - special.gammaln(shape)))
    if name == "inverse-gaussian":
        phi = family.deviance(y, mu) / len(y) if dispersion is None else dispersion
        return float(np.sum(-0.5 * np.log(2 * math.pi * phi * y ** 3)
                            - (y - mu) ** 2 / (2 * phi * mu ** 2 * y)))
    return float("nan")


def _start_mu(family, y):
    if family.name == "binomial":
        return (y + 0.5) / 2.0
    if family.domain[0] >= 0:
        return np.maximum(y, 0.0) + 0.1
    return y.copy()


def _deviance(family, y, mu):
    if family.unit_deviance is not None:
        return family.deviance(y, mu)
    # quasi: Pearson-type sum used only for convergence monitoring
    return float(np.sum((y - mu) ** 2 / family.variance(mu)))


def fit_glm(design: DesignData, family: Family, max_iter: int = MAX_ITER,
            tol: float = TOL) -> GlmFit:
    """IRLS with step-halving on the deviance.

    Converged means a relative deviance change of at most ``tol`` together
    with a score norm of at most 1e-8.

    A binomial fit whose probabilities are pinned within 1e-10 of 0 or 1 is
    flagged as separated (with a :class:`SeparationWarning`) rather than
    raising; the last iterate is returned.
    """
    y = family.check_domain(design.y, "response")
    X, off = design.X, design.offset
    n, p = X.shape
    lnk = family.link

    mu = _start_mu(family, y)
    eta = lnk.link(mu)
    dev = _deviance(family, y, mu)
    beta = np.zeros(p)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = lnk.mu_eta(eta)
        var = family.variance(mu)
        w = d * d / np.maximum(var, 1e-300)
        z = (eta - off) + (y - mu) / d
        sw = np.sqrt(w)
        new_beta, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        step = new_beta - beta if it > 1 else None
        for _ in range(30):
            cand = new_beta if step is None else beta + step
            eta_c = X @ cand + off
            with np.errstate(all="ignore"):
                mu_c = lnk.inverse(eta_c)
                dev_c = _deviance(family, y, mu_c) if _valid(family, mu_c) else np.inf
            if np.isfinite(dev_c) and (step is None or dev_c <= dev * (1 + 1e-12) + 1e-300):
                break
            if step is None:
                step = new_beta - beta
            step = step / 2.0
        else:
            break
        beta, eta, mu = cand, eta_c, mu_c
        change = abs(dev_c - dev) / (abs(dev_c) + 0.1)
        dev = dev_c
        if change <= tol and _score_norm(family, X, y, eta, mu) <= SCORE_TOL:
            converged = True
            break

    separated = False
    if family.name == "binomial":
        pinned = (mu < _EPS) | (mu > 1 - _EPS)
        separated = bool(np.any(pinned & (np.abs(eta) > 20)))
        if separated:
            warnings.warn("fitted probabilities pinned at 0 or 1: likely separation",
                          SeparationWarning, stacklevel=2)
    if not converged and not separated:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations", RuntimeWarning,
                      stacklevel=2)

    ybar = float(np.mean(y))
    null_dev = _deviance(family, y, np.full(n, ybar))
    disp = 1.0
    if family.name == "gaussian":
        disp = float(np.mean((y - mu) ** 2))
    return GlmFit(beta=beta, eta=eta, mu=mu,
                  loglik=glm_loglik(family, y, mu),
                  deviance=float(dev), null_deviance=float(null_dev),
                  n=n, p=p, family=family.name, iterations=it,
                  converged=converged, separated=separated, dispersion=disp)


def _score_norm(family, X, y, eta, mu):
    d = family.link.mu_eta(eta)
    return float(np.linalg.norm(X.T @ ((y - mu) * d / np.maximum(family.variance(mu), 1e-300))))


def _valid(family, mu):
    if not np.all(np.isfinite(mu)):
        return False
    lo, hi = family.domain
    if family.name in ("binomial", "poisson", "gamma", "inverse-gaussian"):
        return bool(np.all((mu > lo) & (mu < hi)))
    return True


def variance_r2(family: Family, y, mu) -> float:
    """``1 - sum d_V(y, mu) / sum d_V(y, ybar)``."""
    y = np.asarray(y, dtype=float)
    denom = float(np.sum(dv_terms(family, y, np.mean(y))))
    if denom <= 0:
        raise ValueError("zero total d_V variation (constant response)")
    mu = np.clip(mu, *family.domain)
    return 1.0 - float(np.sum(dv_terms(family, y, mu))) / denom


def r2_v(fit: GlmFit, y, family: Family) -> float:
    """Variance-function R^2 of a fitted GLM: d_V replaces squared error."""
    return variance_r2(family, y, fit.mu)


def r2_kl(fit: GlmFit) -> float:
    """Deviance-based (Kullback-Leibler) R^2 against the constant-mean model."""
    if fit.family == "quasi":
        raise ValueError("R2_KL needs a likelihood family")
    if fit.null_deviance <= 0:
        raise ValueError("zero null deviance (constant response)")
    return 1.0 - fit.deviance / fit.null_deviance


def adjust(r2: float, df_resid: int, df_total: int, n: int | None = None) -> float:
    """Degrees-of-freedom adjustment ``1 - (1 - r2) * df_total / df_resid``.

    ``n`` is accepted for symmetry with the report layer; ``df_total`` is
    normally ``n - 1``.
    """
    if df_resid <= 0:
        raise ValueError(f"df_resid must be positive, got {df_resid}")
    if df_resid > df_total:
        raise ValueError("df_resid cannot exceed df_total")
    return 1.0 - (1.0 - r2) * (df_total / df_resid)
