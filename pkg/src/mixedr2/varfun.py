"""Variance functions, links and the arc-length distance along a variance curve.

For a family with variance function ``V`` the distance between two means is the
squared length of the curve ``t -> (t, V(t))`` between them::

    d_V(a, b) = (integral_a^b sqrt(1 + V'(t)^2) dt) ** 2

Gaussian, Poisson, binomial and gamma have closed-form antiderivatives; every
other variance function is integrated numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

__all__ = [
    "DomainError",
    "QuadratureError",
    "Link",
    "Family",
    "DistanceResult",
    "get_link",
    "get_family",
    "quasi",
    "arc_length",
    "arc_length_result",
    "d_v",
    "sum_dv",
    "QUAD_TOL",
    "QUAD_LIMIT",
]

QUAD_TOL = 1e-10
QUAD_LIMIT = 60


class DomainError(ValueError):
    """A mean value lies outside the closure of the family's mean domain."""


class QuadratureError(ArithmeticError):
    """Adaptive quadrature failed to reach the requested tolerance."""

    def __init__(self, message, abs_error):
        super().__init__(message)
        self.abs_error = abs_error


@dataclass(frozen=True)
class Link:
    name: str
    link: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    # d mu / d eta as a function of eta
    mu_eta: Callable[[np.ndarray], np.ndarray]


def _logit_mu_eta(eta):
    p = special.expit(eta)
    return p * (1.0 - p)


_LINKS = {
    "identity": Link("identity", lambda mu: np.asarray(mu, float),
                     lambda eta: np.asarray(eta, float),
                     lambda eta: np.ones_like(np.asarray(eta, float))),
    "logit": Link("logit", special.logit, special.expit, _logit_mu_eta),
    "log": Link("log", np.log, np.exp, np.exp),
    "inverse": Link("inverse", lambda mu: 1.0 / np.asarray(mu, float),
                    lambda eta: 1.0 / np.asarray(eta, float),
                    lambda eta: -1.0 / np.asarray(eta, float) ** 2),
}


def get_link(name: str) -> Link:
    try:
        return _LINKS[name]
    except KeyError:
        raise ValueError(f"unknown link {name!r}; choose from {sorted(_LINKS)}") from None


def _xlogy_ratio(y, mu):
    # y * log(y / mu) with the 0 * log 0 = 0 convention
    return special.xlogy(y, y) - special.xlogy(y, mu)


def _dev_gaussian(y, mu):
    return (y - mu) ** 2


def _dev_binomial(y, mu):
    return 2.0 * (_xlogy_ratio(y, mu) + _xlogy_ratio(1.0 - y, 1.0 - mu))


def _dev_poisson(y, mu):
    return 2.0 * (_xlogy_ratio(y, mu) - (y - mu))


def _dev_gamma(y, mu):
    return 2.0 * (-np.log(y / mu) + (y - mu) / mu)


def _dev_inverse_gaussian(y, mu):
    return (y - mu) ** 2 / (mu ** 2 * y)


@dataclass(frozen=True)
class Family:
    """Mean-variance description of a response distribution.

    ``antiderivative`` is an optional closed form ``F`` with
    ``F' = sqrt(1 + V'(t)^2)``; when absent, arc lengths use quadrature.
    """

    name: str
    link: Link
    variance: Callable[[np.ndarray], np.ndarray]
    variance_deriv: Callable[[np.ndarray], np.ndarray]
    unit_deviance: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    domain: tuple[float, float] = (-np.inf, np.inf)
    dispersion: float = 1.0
    antiderivative: Callable[[np.ndarray], np.ndarray] | None = field(
        default=None, compare=False)

    @property
    def is_likelihood(self) -> bool:
        return self.name != "quasi"

    @property
    def canonical(self) -> bool:
        return (self.name, self.link.name) in {
            ("gaussian", "identity"), ("binomial", "logit"), ("poisson", "log")}

    def check_domain(self, values, what="mean"):
        values = np.asarray(values, dtype=float)
        lo, hi = self.domain
        bad = ~((values >= lo) & (values <= hi))
        if np.any(bad):
            i = int(np.flatnonzero(bad.ravel())[0])
            raise DomainError(
                f"{self.name}: {what} {values.ravel()[i]!r} at index {i} "
                f"outside [{lo}, {hi}]")
        return values

    def deviance(self, y, mu) -> float:
        if self.unit_deviance is None:
            raise ValueError(f"family {self.name!r} has no deviance")
        return float(np.sum(self.unit_deviance(np.asarray(y, float), np.asarray(mu, float))))


def _sqrt1p_antideriv(u):
    # integral of sqrt(1 + u^2) du
    u = np.asarray(u, dtype=float)
    return 0.5 * (u * np.sqrt(1.0 + u * u) + np.arcsinh(u))


_CLOSED_FORMS = {
    "gaussian": lambda t: np.asarray(t, float),
    "poisson": lambda t: np.sqrt(2.0) * np.asarray(t, float),
    # V' = 1 - 2t; substitute u = 1 - 2t, dt = -du / 2
    "binomial": lambda t: -0.5 * _sqrt1p_antideriv(1.0 - 2.0 * np.asarray(t, float)),
    # V' = 2t; substitute u = 2t
    "gamma": lambda t: 0.5 * _sqrt1p_antideriv(2.0 * np.asarray(t, float)),
}

_DEFAULT_LINKS = {
    "gaussian": "identity",
    "binomial": "logit",
    "poisson": "log",
    "gamma": "log",
    "inverse-gaussian": "log",
}


def get_family(name: str, link: str | None = None, dispersion: float = 1.0) -> Family:
    """Build one of the named families, optionally overriding the link."""
    name = name.lower().replace("_", "-")
    if name == "inverse.gaussian":
        name = "inverse-gaussian"
    if name not in _DEFAULT_LINKS:
        raise ValueError(f"unknown family {name!r}; choose from "
                         f"{sorted(_DEFAULT_LINKS) + ['quasi']}")
    lnk = get_link(link or _DEFAULT_LINKS[name])
    kw = dict(link=lnk, dispersion=dispersion, antiderivative=_CLOSED_FORMS.get(name))
    if name == "gaussian":
        return Family(name, variance=lambda mu: np.ones_like(np.asarray(mu, float)),
                      variance_deriv=lambda mu: np.zeros_like(np.asarray(mu, float)),
                      unit_deviance=_dev_gaussian, **kw)
    if name == "binomial":
        return Family(name, variance=lambda mu: mu * (1.0 - mu),
                      variance_deriv=lambda mu: 1.0 - 2.0 * np.asarray(mu, float),
                      unit_deviance=_dev_binomial, domain=(0.0, 1.0), **kw)
    if name == "poisson":
        return Family(name, variance=lambda mu: np.asarray(mu, float),
                      variance_deriv=lambda mu: np.ones_like(np.asarray(mu, float)),
                      unit_deviance=_dev_poisson, domain=(0.0, np.inf), **kw)
    if name == "gamma":
        return Family(name, variance=lambda mu: np.asarray(mu, float) ** 2,
                      variance_deriv=lambda mu: 2.0 * np.asarray(mu, float),
                      unit_deviance=_dev_gamma, domain=(0.0, np.inf), **kw)
    return Family(name, variance=lambda mu: np.asarray(mu, float) ** 3,
                  variance_deriv=lambda mu: 3.0 * np.asarray(mu, float) ** 2,
                  unit_deviance=_dev_inverse_gaussian, domain=(0.0, np.inf), **kw)


def quasi(variance, variance_deriv, link="identity",
          domain=(-np.inf, np.inf), dispersion=1.0) -> Family:
    """A quasi family from a user-supplied variance function and its derivative.

    Arc lengths for quasi families are always computed by quadrature.
    """
    return Family("quasi", get_link(link), variance, variance_deriv,
                  domain=tuple(domain), dispersion=dispersion)


@dataclass(frozen=True)
class DistanceResult:
    arc_length: float
    d_v: float
    method: str
    abs_error_estimate: float


def arc_length_result(family: Family, a: float, b: float) -> DistanceResult:
    a = float(family.check_domain(a))
    b = float(family.check_domain(b))
    lo, hi = min(a, b), max(a, b)
    if lo == hi:
        return DistanceResult(0.0, 0.0, "closed-form", 0.0)
    if family.antiderivative is not None:
        F = family.antiderivative
        length = abs(float(F(hi) - F(lo)))
        return DistanceResult(length, length * length, "closed-form", 0.0)

    vd = family.variance_deriv

    def integrand(t):
        d = float(vd(t))
        return np.sqrt(1.0 + d * d)

    with np.errstate(all="ignore"):
        length, err, info = integrate.quad(
            integrand, lo, hi, epsabs=QUAD_TOL, epsrel=0.0, limit=QUAD_LIMIT,
            full_output=True)[:3]
    # quad returns a 4th element only on failure
    if err > QUAD_TOL or not np.isfinite(length):
        raise QuadratureError(
            f"arc length on [{lo}, {hi}] did not converge (error estimate {err:.3g})", err)
    return DistanceResult(length, length * length, "quadrature", float(err))


def arc_length(family: Family, a: float, b: float) -> float:
    """Length of the variance curve between means ``a`` and ``b`` (orientation-free)."""
    return arc_length_result(family, a, b).arc_length


def d_v(family: Family, a: float, b: float) -> float:
    """Squared arc length along the variance function between ``a`` and ``b``."""
    return arc_length_result(family, a, b).d_v


def _arc_lengths(family: Family, a, b) -> np.ndarray:
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    if family.antiderivative is not None:
        F = family.antiderivative
        return np.abs(F(b) - F(a))
    out = np.empty(a.shape)
    for idx in np.ndindex(a.shape):
        out[idx] = arc_length_result(family, a[idx], b[idx]).arc_length
    return out


def dv_terms(family: Family, y, mu) -> np.ndarray:
    """Elementwise ``d_V(y_i, mu_i)``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.shape != mu.shape and mu.ndim != 0:
        raise ValueError(f"length mismatch: y has {y.shape}, mu has {mu.shape}")
    family.check_domain(y, "response")
    family.check_domain(mu)
    return _arc_lengths(family, y, mu) ** 2


def sum_dv(family: Family, y, mu) -> float:
    """Sum of ``d_V(y_i, mu_i)``; a scalar ``mu`` is broadcast."""
    return float(np.sum(dv_terms(family, y, mu)))
