"""Coefficients of determination for random-intercept mixed models.

Whole-model (R_M^2), fixed-effects (R_F^2) and random-effects (R_R^2) shares
for linear and generalized linear mixed models, with the GLMM versions
measured along the variance function instead of by squared error.
"""

from .design import (Dataset, DesignData, ModelSpec, build_design, load_csv,
                     parse_formula, residualize)
from .estimators import RandomInterceptGLMM, RandomInterceptLMM, VarianceFunctionGLM
from .glm import GlmFit, adjust, fit_glm, r2_kl, r2_v
from .glmm import (GlmmFit, fit_glmm, glmm_ic, nakagawa_glmm, r2_f_glmm, r2_m_glmm,
                   r2_r_glmm)
from .lmm import (FitError, LmmFit, fit_lmm, nakagawa_lmm, per_obs_unexplained, r2_f_lmm,
                  r2_m_lmm, r2_r, xu_lmm, xu_omega2)
from .report import AnalysisOptions, R2Report, analyze_model, compare_models
from .sim import SimConfig, SimResult, default_config, run_study
from .varfun import Family, arc_length, d_v, get_family, quasi, sum_dv

__version__ = "0.1.0"

__all__ = [
    "AnalysisOptions", "Dataset", "DesignData", "Family", "FitError", "GlmFit", "GlmmFit",
    "LmmFit", "ModelSpec", "R2Report", "RandomInterceptGLMM", "RandomInterceptLMM",
    "SimConfig", "SimResult", "VarianceFunctionGLM", "adjust", "analyze_model",
    "arc_length", "build_design", "compare_models", "d_v", "default_config", "fit_glm",
    "fit_glmm", "fit_lmm", "get_family", "glmm_ic", "load_csv", "nakagawa_glmm",
    "nakagawa_lmm", "parse_formula", "per_obs_unexplained", "quasi", "r2_f_glmm",
    "r2_f_lmm", "r2_kl", "r2_m_glmm", "r2_m_lmm", "r2_r", "r2_r_glmm", "r2_v",
    "residualize", "run_study", "sum_dv", "xu_lmm", "xu_omega2",
]
