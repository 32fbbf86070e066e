"""Random-intercept GLMMs by adaptive Gauss-Hermite quadrature.

The random intercept is written ``u_i = tau * v_i`` with ``v_i ~ N(0, 1)``.
For every group the integrand ``exp(h_i(v))`` is centred at its mode and scaled
by the curvature there before applying Gauss-Hermite nodes; one node is the
Laplace approximation. Because ``h_i`` is symmetric under ``tau -> -tau`` the
objective is smooth through ``tau = 0``, which is also checked explicitly
against the plain GLM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import optimize, special

from .design import DesignData
from .glm import GlmFit, fit_glm
from .lmm import FitError
from .varfun import Family, dv_terms

__all__ = [
    "GlmmFit",
    "fit_glmm",
    "glmm_loglik",
    "r2_f_glmm",
    "r2_m_glmm",
    "r2_r_glmm",
    "nakagawa_glmm",
    "glmm_ic",
    "SUPPORTED",
]

SUPPORTED = {("binomial", "logit"), ("poisson", "log"), ("gaussian", "identity")}
MAX_OUTER = 500
MAX_INNER = 100
INNER_TOL = 1e-10
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class GlmmFit:
    beta: np.ndarray
    tau2: float
    u_mode: np.ndarray
    eta_f: np.ndarray
    eta_r: np.ndarray
    loglik: float
    nodes: int
    n: int
    p: int
    m: int
    family: str
    group_index: np.ndarray
    offset: np.ndarray
    sigma2: float | None = None
    iterations: int = 0
    converged: bool = True

    @property
    def n_params(self):
        return self.p + 1 + (self.sigma2 is not None)


class _Objective:
    def __init__(self, design: DesignData, family: Family, nodes: int):
        self.y = design.y
        self.X = design.X
        self.off = design.offset
        self.g = design.group_index
        self.m = design.m
        self.family = family.name
        self.gaussian = family.name == "gaussian"
        x, w = hermgauss(nodes)
        self.x = x
        self.logw = np.log(w) + x * x
        if family.name == "poisson":
            self.const = float(-np.sum(special.gammaln(self.y + 1)))
        else:
            self.const = 0.0

    def unpack(self, theta):
        p = self.X.shape[1]
        beta = theta[:p]
        tau = theta[p]
        s2 = math.exp(2 * theta[p + 1]) if self.gaussian else None
        return beta, tau, s2

    def _terms(self, eta, s2):
        """Per-observation log density (without constants) and its first two eta-derivatives."""
        y = self.y if eta.ndim == 1 else self.y[:, None]
        if self.family == "binomial":
            mu = special.expit(eta)
            return y * eta - np.logaddexp(0.0, eta), y - mu, -mu * (1.0 - mu)
        if self.family == "poisson":
            mu = np.exp(eta)
            return y * eta - mu, y - mu, -mu
        r = y - eta
        return (-0.5 * r * r / s2 - 0.5 * math.log(2 * math.pi * s2), r / s2,
                np.full_like(eta, -1.0 / s2))

    def _group_sum(self, a):
        if a.ndim == 1:
            return np.bincount(self.g, weights=a, minlength=self.m)
        out = np.zeros((self.m, a.shape[1]))
        np.add.at(out, self.g, a)
        return out

    def modes(self, eta0, tau, s2):
        """Newton search for each group's mode of h(v); returns (v, h''(v))."""
        v = np.zeros(self.m)
        ll, d1, d2 = self._terms(eta0, s2)
        h = self._group_sum(ll) - 0.5 * v * v
        for _ in range(MAX_INNER):
            grad = tau * self._group_sum(d1) - v
            hess = tau * tau * self._group_sum(d2) - 1.0
            if np.max(np.abs(grad)) <= INNER_TOL:
                return v, hess
            step = -grad / hess
            t = np.ones(self.m)
            for _ in range(60):
                v_new = v + t * step
                ll_n, d1_n, d2_n = self._terms(eta0 + tau * v_new[self.g], s2)
                h_new = self._group_sum(ll_n) - 0.5 * v_new * v_new
                bad = ~(h_new >= h - 1e-12 * (1 + np.abs(h)))
                if not np.any(bad):
                    break
                t = np.where(bad, t / 2, t)
            v, h, d1, d2 = v_new, h_new, d1_n, d2_n
        grad = tau * self._group_sum(d1) - v
        worst = int(np.argmax(np.abs(grad)))
        raise FitError(f"inner Newton for group {worst} did not converge "
                       f"(gradient {grad[worst]:.3g})")

    def loglik(self, theta, return_modes=False):
        beta, tau, s2 = self.unpack(theta)
        eta0 = self.X @ beta + self.off
        v, hess = self.modes(eta0, tau, s2)
        scale = np.sqrt(-1.0 / hess)
        V = v[:, None] + math.sqrt(2.0) * scale[:, None] * self.x[None, :]
        ll, _, _ = self._terms(eta0[:, None] + tau * V[self.g], s2)
        H = self._group_sum(ll) - 0.5 * V * V - _HALF_LOG_2PI
        per_group = (math.log(math.sqrt(2.0)) + np.log(scale)
                     + special.logsumexp(H + self.logw[None, :], axis=1))
        total = float(np.sum(per_group)) + self.const
        if return_modes:
            return total, v
        return total


def _fd_grad(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for k in range(len(theta)):
        step = h * max(1.0, abs(theta[k]))
        e = np.zeros_like(theta)
        e[k] = step
        g[k] = (f(theta + e) - f(theta - e)) / (2 * step)
    return g


def glmm_loglik(design: DesignData, family: Family, beta, tau2, nodes=15, sigma2=None):
    """AGQ marginal log-likelihood at given parameters."""
    obj = _Objective(design, family, nodes)
    theta = list(np.asarray(beta, float)) + [math.sqrt(tau2)]
    if obj.gaussian:
        theta.append(0.5 * math.log(sigma2))
    return obj.loglik(np.asarray(theta))


def fit_glmm(design: DesignData, family: Family, nodes: int = 15) -> GlmmFit:
    """Maximum-likelihood fit of a random-intercept GLMM.

    Quasi-Newton (BFGS with central-difference gradients) over
    ``(beta, tau[, log sigma])`` starting from the fixed-effects GLM.
    """
    if (family.name, family.link.name) not in SUPPORTED:
        raise ValueError(f"unsupported family/link {family.name}/{family.link.name}")
    if not (1 <= nodes <= 50) or nodes % 2 == 0:
        raise ValueError(f"nodes must be odd and between 1 and 50, got {nodes}")
    family.check_domain(design.y, "response")
    obj = _Objective(design, family, nodes)
    glm = fit_glm(design, family)
    p = design.p

    theta0 = list(glm.beta) + [0.5]
    if obj.gaussian:
        theta0.append(0.5 * math.log(max(glm.dispersion, 1e-12)))
    theta0 = np.asarray(theta0)

    def f(theta):
        return -obj.loglik(theta)

    res = optimize.minimize(f, theta0, jac=lambda t: _fd_grad(f, t), method="BFGS",
                            options={"gtol": 1e-6, "maxiter": MAX_OUTER})
    theta = res.x
    grad = _fd_grad(f, theta)
    if res.nit >= MAX_OUTER or np.max(np.abs(grad)) > 1e-3 * max(1.0, abs(res.fun)) ** 0.5:
        raise FitError(f"outer optimisation did not converge after {res.nit} iterations "
                       f"({res.message})")
    ll = -float(res.fun)

    # tau = 0 boundary: the plain GLM (with ML dispersion for gaussian)
    theta_b = list(glm.beta) + [0.0]
    if obj.gaussian:
        theta_b.append(0.5 * math.log(max(glm.dispersion, 1e-300)))
    theta_b = np.asarray(theta_b)
    ll_b = obj.loglik(theta_b)
    if ll_b > ll:
        theta, ll = theta_b, ll_b

    ll, v = obj.loglik(theta, return_modes=True)
    beta, tau, s2 = obj.unpack(theta)
    tau = abs(float(tau))
    # modes of v flip sign with tau; u = tau * v is invariant
    u = theta[p] * v
    eta_f = design.X @ beta + design.offset
    return GlmmFit(beta=np.asarray(beta, float), tau2=tau * tau, u_mode=u,
                   eta_f=eta_f, eta_r=u[design.group_index], loglik=float(ll), nodes=nodes,
                   n=design.n, p=p, m=design.m, family=family.name,
                   group_index=design.group_index, offset=design.offset,
                   sigma2=None if s2 is None else float(s2), iterations=int(res.nit), converged=bool(res.success))


def _dv_ratio(family: Family, y, mu):
    y = np.asarray(y, dtype=float)
    denom = float(np.sum(dv_terms(family, y, np.mean(y))))
    if denom <= 0:
        raise ValueError("zero total d_V variation (constant response)")
    mu = np.clip(mu, *family.domain)
    return 1.0 - float(np.sum(dv_terms(family, y, mu))) / denom


def r2_f_glmm(fixed_only: GlmFit, y, family: Family) -> float:
    """Fixed-effects share from the GLM that drops the random intercept."""
    return _dv_ratio(family, y, family.link.inverse(fixed_only.eta))


def r2_m_glmm(fit: GlmmFit, y, family: Family) -> float:
    """Whole-model share with the posterior-mode random intercepts plugged in."""
    return _dv_ratio(family, y, family.link.inverse(fit.eta_f + fit.eta_r))


def r2_r_glmm(rm: float, rf: float) -> float:
    return rm - rf


def nakagawa_glmm(fit: GlmmFit, family: Family, approx: str = "lognormal",
                  null_fit: GlmmFit | None = None) -> tuple[float, float]:
    """Latent-scale (marginal, conditional) R^2 for logit and log links.

    For Poisson the observation-level variance uses the mean count
    ``exp(b0 + mean(offset) + tau2 / 2)`` of the intercept-only mixed model
    ``null_fit`` (the fit itself when omitted).
    """
    var_f = float(np.var(fit.eta_f - fit.offset))
    key = (family.name, family.link.name)
    if key == ("binomial", "logit"):
        var_e = math.pi ** 2 / 3
    elif key == ("poisson", "log"):
        ref = null_fit if null_fit is not None else fit
        lam = math.exp(ref.beta[0] + float(np.mean(ref.offset)) + ref.tau2 / 2)
        if approx == "lognormal":
            var_e = math.log1p(1.0 / lam)
        elif approx == "delta":
            var_e = 1.0 / lam
        elif approx == "trigamma":
            var_e = float(special.polygamma(1, lam))
        else:
            raise ValueError(f"unknown approximation {approx!r}")
    else:
        raise ValueError(f"unsupported family/link {family.name}/{family.link.name}")
    total = var_f + fit.tau2 + var_e
    return var_f / total, (var_f + fit.tau2) / total


def glmm_ic(fit: GlmmFit) -> tuple[float, float]:
    """AIC and BIC; parameters are the fixed effects, tau2 and (gaussian) sigma2."""
    k = fit.n_params
    return -2 * fit.loglik + 2 * k, -2 * fit.loglik + math.log(fit.n) * k
