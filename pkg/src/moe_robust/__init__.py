"""Robust mixture-of-experts regression with Student t and normal experts."""

from .densities import (
    TParams,
    digamma_fn,
    gamma_logpdf,
    laplace_logpdf,
    log_gamma_fn,
    normal_logpdf,
    t_logpdf,
)
from .em import (
    EStepQuantities,
    FitConfig,
    FitResult,
    estep_nmoe,
    estep_tmoe,
    fit,
    irls_gating,
    mstep_experts_nmoe,
    mstep_experts_tmoe,
    run_em,
    solve_dof,
)
from .exceptions import (
    DegenerateComponentError,
    DomainError,
    FitFailedError,
    UndefinedMomentError,
    UnsupportedFamilyError,
)
from .model import (
    Dataset,
    ExpertParams,
    Family,
    GatingParams,
    MoEParams,
    SelectionTable,
    canonical_order,
    complete_loglik,
    criteria,
    free_params,
    gate_probs,
    loglik,
    map_cluster,
    predict_mean,
    predict_variance,
)
from .simulate import SimSpec, gamma_draw, simulate, table1_params

__version__ = "0.1.0"
