"""
Model types, Bernstein bases and the joint log-density
"""

from sfbayes.models.basis import (
    BasisMatrix,
    BasisSpec,
    default_interval,
    design_matrix,
    eval_basis,
    eval_basis_recursive,
    evaluate_curve,
    fit_least_squares,
)
from sfbayes.models.density import (
    CorrelationFactor,
    KernelFactorCache,
    LogJointTerms,
    ar_coefficient,
    cholesky_with_jitter,
    correlation_factor,
    inverse_gamma_moments,
    kernel_matrix,
    log_joint,
    log_joint_terms,
    pairwise_distances,
)
from sfbayes.models.state import GapVector, ModelData, ModelState, SiteSeries, SpatialKernel
from sfbayes.schemas import KernelFamily, PriorSpec

__all__ = [
    "BasisMatrix",
    "BasisSpec",
    "CorrelationFactor",
    "GapVector",
    "KernelFactorCache",
    "KernelFamily",
    "LogJointTerms",
    "ModelData",
    "ModelState",
    "PriorSpec",
    "SiteSeries",
    "SpatialKernel",
    "ar_coefficient",
    "cholesky_with_jitter",
    "correlation_factor",
    "default_interval",
    "design_matrix",
    "eval_basis",
    "eval_basis_recursive",
    "evaluate_curve",
    "fit_least_squares",
    "inverse_gamma_moments",
    "kernel_matrix",
    "log_joint",
    "log_joint_terms",
    "pairwise_distances",
]
