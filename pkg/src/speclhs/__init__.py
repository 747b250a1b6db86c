"""Spectral-cLHS sampling design.

Zones are delineated by spectral clustering of covariates, the sample budget
is split across zones (at least one site each) and conditioned Latin
hypercube sampling picks the sites inside every zone.
"""

from .clhs import (
    AnnealingSchedule,
    CLHSDesign,
    CLHSProblem,
    anneal,
    objective,
    quantile_strata,
    vanilla_clhs,
)
from .coverage import compare, pca, summarize
from .ingest import (
    CovariateStack,
    FeatureMatrix,
    MaskRule,
    build_feature_matrix,
    load_stack,
    normalize,
    read_table,
)
from .spectral import ClusterModel, KernelConfig, cluster
from .stratified import AllocationPlan, allocate, override_allocation, spectral_clhs
from .validity import ValidityReport, calinski_harabasz, select_k, silhouette

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan", "AnnealingSchedule", "CLHSDesign", "CLHSProblem", "ClusterModel",
    "CovariateStack", "FeatureMatrix", "KernelConfig", "MaskRule", "ValidityReport",
    "allocate", "anneal", "build_feature_matrix", "calinski_harabasz", "cluster", "compare",
    "load_stack", "normalize", "objective", "override_allocation", "pca", "quantile_strata",
    "read_table", "select_k", "silhouette", "spectral_clhs", "summarize", "vanilla_clhs",
]
