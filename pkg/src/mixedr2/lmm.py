"""Random-intercept linear mixed models and their coefficients of determination.

The model is ``y_ij = x_ij' beta + u_i + e_ij`` with ``u_i ~ N(0, tau2)`` and
``e_ij ~ N(0, sigma2)``. With ``lam = tau2 / sigma2`` the per-group covariance
is ``sigma2 * (I + lam J)``, whose inverse and determinant are available in
closed form, so ``beta`` and ``sigma2`` are profiled out exactly and only
``lam`` is optimised (by root-finding on its analytic score).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .design import DesignData

__all__ = [
    "FitError",
    "LmmFit",
    "fit_lmm",
    "lmm_loglik",
    "r2_f_lmm",
    "per_obs_unexplained",
    "r2_m_lmm",
    "r2_r",
    "xu_omega2",
    "xu_lmm",
    "nakagawa_lmm",
    "total_ss",
]

MAX_ITER = 500
_LOG2PI = math.log(2.0 * math.pi)


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class LmmFit:
    beta: np.ndarray
    sigma2: float
    tau2: float
    tau2_ij: np.ndarray
    eta_f: np.ndarray
    eta_r: np.ndarray
    loglik: float
    method: str
    n: int
    p: int
    m: int
    group_index: np.ndarray

    @property
    def u(self):
        """Group-level BLUPs, one per group."""
        out = np.zeros(self.m)
        out[self.group_index] = self.eta_r
        return out

    @property
    def fitted(self):
        return self.eta_f + self.eta_r


class _Profile:
    """Profiled (RE)ML criterion in the variance ratio ``lam`` for one design."""

    def __init__(self, design: DesignData, method: str):
        self.X = design.X
        self.y = design.y - design.offset
        self.g = design.group_index
        self.m = design.m
        self.ni = np.bincount(self.g, minlength=self.m).astype(float)
        self.n, self.p = self.X.shape
        self.reml = method == "REML"
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.y
        self.SX = np.zeros((self.m, self.p))
        np.add.at(self.SX, self.g, self.X)
        self.Sy = np.bincount(self.g, weights=self.y, minlength=self.m)

    def solve(self, lam):
        c = lam / (1.0 + self.ni * lam)
        A = self.XtX - (self.SX * c[:, None]).T @ self.SX
        b = self.Xty - self.SX.T @ (c * self.Sy)
        L = np.linalg.cholesky(A)
        beta = np.linalg.solve(L.T, np.linalg.solve(L, b))
        r = self.y - self.X @ beta
        R = np.bincount(self.g, weights=r, minlength=self.m)
        Q = float(r @ r - np.sum(c * R * R))
        return beta, r, R, Q, A, L

    def dof(self):
        return self.n - self.p if self.reml else self.n

    def loglik(self, lam):
        _, _, _, Q, _, L = self.solve(lam)
        return self._loglik(lam, Q, L)

    def _loglik(self, lam, Q, L):
        k = self.dof()
        ll = -0.5 * k * (_LOG2PI + math.log(Q / k) + 1.0)
        ll -= 0.5 * float(np.sum(np.log1p(self.ni * lam)))
        if self.reml:
            ll -= float(np.sum(np.log(np.diag(L))))
        return ll

    def score(self, lam):
        """d loglik / d lam."""
        _, _, R, Q, A, L = self.solve(lam)
        d = 1.0 / (1.0 + self.ni * lam) ** 2
        dQ = -float(np.sum(d * R * R))
        out = -0.5 * self.dof() * dQ / Q - 0.5 * float(np.sum(self.ni / (1.0 + self.ni * lam)))
        if self.reml:
            dA = -(self.SX * d[:, None]).T @ self.SX
            out -= 0.5 * float(np.trace(np.linalg.solve(A, dA)))
        return out


def lmm_loglik(design: DesignData, sigma2: float, tau2: float, method: str = "ML") -> float:
    """(RE)ML log-likelihood at given variances with ``beta`` profiled by GLS."""
    prof = _Profile(design, method)
    lam = tau2 / sigma2
    _, _, _, Q, _, L = prof.solve(lam)
    k = prof.dof()
    ll = -0.5 * (k * (_LOG2PI + math.log(sigma2)) + Q / sigma2)
    ll -= 0.5 * float(np.sum(np.log1p(prof.ni * lam)))
    if prof.reml:
        ll -= float(np.sum(np.log(np.diag(L))))
    return ll


def fit_lmm(design: DesignData, method: str = "ML") -> LmmFit:
    """Fit the random-intercept LMM by maximum likelihood or REML.

    The score in ``log(lam)`` is bracketed on a log grid spanning 1e-10..1e8
    and refined with Brent's method; every interior stationary maximum is
    compared with the ``tau2 = 0`` boundary and the best is kept.
    """
    method = method.upper()
    if method not in ("ML", "REML"):
        raise ValueError(f"method must be 'ML' or 'REML', got {method!r}")
    n, p = design.X.shape
    if n <= p + 1:
        raise FitError(f"need n > p + 1 observations (n={n}, p={p})")
    prof = _Profile(design, method)

    scale = float(np.sum((prof.y - prof.y.mean()) ** 2)) + float(prof.y @ prof.y)
    _, _, _, Q0, _, _ = prof.solve(0.0)
    if Q0 <= 1e-24 * max(scale, 1e-300):
        raise FitError("zero residual variance: the response is fitted exactly by the fixed effects")

    grid = np.logspace(-10, 8, 73)
    scores = np.array([prof.score(lam) for lam in grid])
    candidates = [0.0]
    if prof.score(0.0) > 0 and scores[0] < 0:
        candidates.append(optimize.brentq(prof.score, 0.0, grid[0], xtol=1e-300, maxiter=MAX_ITER))
    for k in np.flatnonzero((scores[:-1] > 0) & (scores[1:] <= 0)):
        try:
            t = optimize.brentq(lambda t: prof.score(math.exp(t)),
                                math.log(grid[k]), math.log(grid[k + 1]),
                                xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=MAX_ITER)
        except RuntimeError as exc:
            raise FitError(f"variance-ratio search did not converge: {exc}") from exc
        candidates.append(math.exp(t))
    if scores[-1] > 0:
        raise FitError("random-intercept variance diverges (within-group variation vanishes)")

    lls = [prof.loglik(lam) for lam in candidates]
    lam = candidates[int(np.argmax(lls))]
    beta, r, R, Q, _, L = prof.solve(lam)
    k = prof.dof()
    sigma2 = Q / k
    if sigma2 <= 0 or not np.isfinite(sigma2):
        raise FitError("zero residual variance")
    tau2 = lam * sigma2
    shrink = prof.ni * lam / (1.0 + prof.ni * lam)
    u = shrink * R / prof.ni
    eta_f = design.X @ beta + design.offset
    return LmmFit(
        beta=beta, sigma2=sigma2, tau2=tau2, tau2_ij=np.full(n, tau2),
        eta_f=eta_f, eta_r=u[design.group_index], loglik=prof._loglik(lam, Q, L),
        method=method, n=n, p=p, m=design.m, group_index=design.group_index)


def total_ss(y) -> float:
    y = np.asarray(y, dtype=float)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst <= 0:
        raise ValueError("zero total sum of squares (constant response)")
    return sst


def r2_f_lmm(fit: LmmFit, y) -> float:
    """Share of variation captured by the fixed part alone."""
    y = np.asarray(y, dtype=float)
    return 1.0 - float(np.sum((y - fit.eta_f) ** 2)) / total_ss(y)


def per_obs_unexplained(y, eta_f, sigma2, tau2):
    """Posterior expected squared error of one observation given its fixed part.

    Equals ``(s / (s + t))^2 (y - eta_f)^2 + s t / (s + t)`` with ``s = sigma2``
    and ``t = tau2``: squared shrunken residual plus posterior variance of the
    random intercept.
    """
    y, eta_f, tau2 = (np.asarray(a, dtype=float) for a in (y, eta_f, tau2))
    if np.any(np.asarray(sigma2) <= 0):
        raise ValueError("sigma2 must be positive")
    k = sigma2 / (sigma2 + tau2)
    out = k * (tau2 + k * (y - eta_f) ** 2)
    return out if out.ndim else float(out)


def r2_m_lmm(fit: LmmFit, y) -> float:
    y = np.asarray(y, dtype=float)
    unexplained = per_obs_unexplained(y, fit.eta_f, fit.sigma2, fit.tau2_ij)
    return 1.0 - float(np.sum(unexplained)) / total_ss(y)


def r2_r(rm: float, rf: float) -> float:
    """Random-effect share; may be negative and is never clipped."""
    return rm - rf


def xu_omega2(resid_var: float, null_var: float) -> float:
    if null_var <= 0:
        raise ValueError("null-model residual variance must be positive")
    return 1.0 - resid_var / null_var


def xu_lmm(fit: LmmFit, y) -> float:
    """Xu's explained-variation measure for a fitted LMM.

    The residual variance is the mean squared conditional residual
    ``y - eta_f - eta_r`` (BLUPs plugged in); the null variance is the ML
    residual variance of the intercept-only model without random effects.
    """
    y = np.asarray(y, dtype=float)
    resid = float(np.mean((y - fit.fitted) ** 2))
    return xu_omega2(resid, total_ss(y) / len(y))


def nakagawa_lmm(fit: LmmFit) -> tuple[float, float]:
    """Variance-component (marginal, conditional) R^2."""
    var_f = float(np.var(fit.eta_f))
    total = var_f + fit.tau2 + fit.sigma2
    return var_f / total, (var_f + fit.tau2) / total
