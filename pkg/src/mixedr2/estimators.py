"""scikit-learn compatible wrappers around the mixed-model fitters.

The grouping factor travels as a ``groups`` argument to ``fit``/``predict``/
``score`` (the same convention as scikit-learn's group-aware splitters). An
intercept column is added automatically.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, column_or_1d

from .design import DesignData
from .glm import fit_glm, r2_kl, variance_r2
from .glmm import fit_glmm, nakagawa_glmm, r2_f_glmm, r2_m_glmm
from .lmm import fit_lmm, nakagawa_lmm, r2_f_lmm, r2_m_lmm, xu_lmm
from .varfun import get_family

__all__ = ["RandomInterceptLMM", "RandomInterceptGLMM", "VarianceFunctionGLM"]


def _design(X, y, groups, offset):
    X, y = check_X_y(X, y, y_numeric=True)
    if groups is None:
        raise ValueError("groups is required")
    groups = column_or_1d(np.asarray(groups, dtype=object))
    if len(groups) != len(y):
        raise ValueError(f"groups has {len(groups)} entries, expected {len(y)}")
    X1 = np.column_stack([np.ones(len(y)), X])
    names = ["(Intercept)"] + [f"x{j}" for j in range(X.shape[1])]
    off = None if offset is None else column_or_1d(np.asarray(offset, float))
    return DesignData.from_arrays(y, X1, groups, off, names)


def _group_effects(levels, u, groups):
    """Look up fitted group effects; unseen groups get 0 (the population mean)."""
    lookup = dict(zip(levels, u))
    return np.array([lookup.get(str(g), 0.0) for g in np.asarray(groups, dtype=object)])


class RandomInterceptLMM(RegressorMixin, BaseEstimator):
    """Linear mixed model with one random intercept.

    Parameters
    ----------
    method : {"ML", "REML"}
        Variance-component estimator.

    Attributes
    ----------
    coef_, intercept_ : fixed effects
    sigma2_, tau2_ : residual and random-intercept variances
    random_effects_ : dict mapping group label to its BLUP
    fit_ : the underlying :class:`~mixedr2.lmm.LmmFit`
    """

    def __init__(self, method="ML"):
        self.method = method

    def fit(self, X, y, groups=None, offset=None):
        design = _design(X, y, groups, offset)
        fit = fit_lmm(design, self.method)
        self.fit_ = fit
        self.design_ = design
        self.intercept_ = float(fit.beta[0])
        self.coef_ = fit.beta[1:].copy()
        self.sigma2_ = fit.sigma2
        self.tau2_ = fit.tau2
        self.random_effects_ = dict(zip(design.group_levels, fit.u))
        self.n_features_in_ = design.p - 1
        return self

    def predict(self, X, groups=None, offset=None):
        """Conditional mean; without ``groups`` only the fixed part is returned."""
        check_is_fitted(self, "fit_")
        X = check_array(X)
        pred = self.intercept_ + X @ self.coef_
        if offset is not None:
            pred = pred + np.asarray(offset, float)
        if groups is not None:
            pred = pred + _group_effects(self.design_.group_levels, self.fit_.u, groups)
        return pred

    def r2_scores(self):
        """All R^2 measures of the training fit as a dict."""
        check_is_fitted(self, "fit_")
        y = self.design_.y
        rm, rf = r2_m_lmm(self.fit_, y), r2_f_lmm(self.fit_, y)
        marg, cond = nakagawa_lmm(self.fit_)
        return {"r2_m": rm, "r2_f": rf, "r2_r": rm - rf, "nakagawa_marginal": marg,
                "nakagawa_conditional": cond, "xu_omega2": xu_lmm(self.fit_, y)}

    def score(self, X, y, groups=None, sample_weight=None):
        """Whole-model R_M^2 of ``y`` against this fit (refitting is not done).

        Uses the fitted fixed effects and variances; conditional shrinkage is
        applied per observation.
        """
        check_is_fitted(self, "fit_")
        if groups is None:
            return super().score(X, y, sample_weight=sample_weight)
        y = column_or_1d(np.asarray(y, float))
        eta_f = self.predict(X)
        k = self.sigma2_ / (self.sigma2_ + self.tau2_)
        unexplained = k * (self.tau2_ + k * (y - eta_f) ** 2)
        return 1.0 - float(np.sum(unexplained)) / float(np.sum((y - y.mean()) ** 2))


class RandomInterceptGLMM(BaseEstimator):
    """Random-intercept GLMM fitted by adaptive Gauss-Hermite quadrature.

    ``score`` returns the variance-function R_M^2 of the training data.
    """

    def __init__(self, family="binomial", nodes=15):
        self.family = family
        self.nodes = nodes

    def fit(self, X, y, groups=None, offset=None):
        fam = get_family(self.family)
        design = _design(X, y, groups, offset)
        self.fit_ = fit_glmm(design, fam, self.nodes)
        self.fixed_fit_ = fit_glm(design, fam)
        self.design_ = design
        self.family_ = fam
        self.intercept_ = float(self.fit_.beta[0])
        self.coef_ = self.fit_.beta[1:].copy()
        self.tau2_ = self.fit_.tau2
        self.random_effects_ = dict(zip(design.group_levels, self.fit_.u_mode))
        self.n_features_in_ = design.p - 1
        return self

    def decision_function(self, X, groups=None, offset=None):
        check_is_fitted(self, "fit_")
        X = check_array(X)
        eta = self.intercept_ + X @ self.coef_
        if offset is not None:
            eta = eta + np.asarray(offset, float)
        if groups is not None:
            eta = eta + _group_effects(self.design_.group_levels, self.fit_.u_mode, groups)
        return eta

    def predict(self, X, groups=None, offset=None):
        """Mean response, conditional on the group modes when ``groups`` is given."""
        return self.family_.link.inverse(self.decision_function(X, groups, offset))

    def r2_scores(self):
        check_is_fitted(self, "fit_")
        y, fam = self.design_.y, self.family_
        rm = r2_m_glmm(self.fit_, y, fam)
        rf = r2_f_glmm(self.fixed_fit_, y, fam)
        out = {"r2_m": rm, "r2_f": rf, "r2_r": rm - rf}
        if fam.name in ("binomial", "poisson"):
            out["nakagawa_marginal"], out["nakagawa_conditional"] = nakagawa_glmm(self.fit_, fam)
        return out

    def score(self, X=None, y=None, groups=None):
        check_is_fitted(self, "fit_")
        return self.r2_scores()["r2_m"]


class VarianceFunctionGLM(BaseEstimator):
    """Fixed-effects GLM by IRLS scored with the variance-function R^2."""

    def __init__(self, family="gaussian", link=None):
        self.family = family
        self.link = link

    def fit(self, X, y, offset=None):
        X, y = check_X_y(X, y, y_numeric=True)
        fam = get_family(self.family, self.link)
        n = len(y)
        X1 = np.column_stack([np.ones(n), X])
        # a single dummy group: the GLM ignores grouping
        design = DesignData(y, X1, np.zeros(n, dtype=np.intp),
                            np.zeros(n) if offset is None else np.asarray(offset, float),
                            tuple(["(Intercept)"] + [f"x{j}" for j in range(X.shape[1])]),
                            ("all",))
        self.fit_ = fit_glm(design, fam)
        self.family_ = fam
        self.intercept_ = float(self.fit_.beta[0])
        self.coef_ = self.fit_.beta[1:].copy()
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, offset=None):
        check_is_fitted(self, "fit_")
        X = check_array(X)
        eta = self.intercept_ + X @ self.coef_
        if offset is not None:
            eta = eta + np.asarray(offset, float)
        return self.family_.link.inverse(eta)

    def score(self, X, y, offset=None):
        """R_V^2 of ``y`` against the model's predicted means for ``X``."""
        y = column_or_1d(np.asarray(y, float))
        return variance_r2(self.family_, y, self.predict(X, offset))

    def kl_score(self):
        check_is_fitted(self, "fit_")
        return r2_kl(self.fit_)
