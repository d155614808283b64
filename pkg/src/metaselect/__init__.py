"""Variable selection for interaction effects in random effects
meta-regression.

The package covers four selection families over a shared dataset model:
single-term screening and forward procedures on the linear scale,
weighted regression trees grown on between-study heterogeneity, bootstrap
ensembles of those trees with threshold selection, and a resampling
harness that scores every procedure's interaction error rates on
synthetic replicates of a real study table.
"""

from .data import (
    CovariateMeta,
    DesignMatrix,
    MetaDataset,
    ModelSpec,
    StudyRecord,
    build_design,
    count_admissible_models,
    load_dataset,
    load_schema,
    schema_to_json,
    standardize,
)
from .ensemble import (
    EnsembleOptions,
    SelectionMatrix,
    fit_ensemble,
    heatmap_svg,
    selection_matrix,
    threshold_select,
)
from .errors import (
    AllMissingColumn,
    DataError,
    DegenerateCorrection,
    DegenerateVariance,
    DimensionMismatch,
    EmptyGroup,
    IndexOutOfRange,
    InsufficientDF,
    MarginalityViolation,
    MetaSelectError,
    MissingColumn,
    MissingValue,
    NonNumericValue,
    NonPositiveVariance,
    NumericError,
    SchemaError,
    SingularDesign,
    ZeroStandardError,
    ZeroVariance,
)
from .estimation import (
    FitOptions,
    FitResult,
    estimate_tau2,
    fit,
    fit_beta,
    hksj_covariance,
    log_likelihood,
    student_t_cdf,
    wald_pvalue,
)
from .linear import (
    SelectOptions,
    SelectionResult,
    TraceStep,
    forward_ic_select,
    forward_test_select,
    information_criterion,
    univariate_select,
)
from .simulate import (
    DgmSetting,
    ErrorReport,
    GridConfig,
    ReportRow,
    error_rates,
    get_setting,
    hot_deck_impute,
    linear_settings,
    make_replicate,
    nonlinear_settings,
    run_grid,
    synthetic_base,
    truth_spec,
)
from .tree import (
    PruneRule,
    Split,
    Tree,
    TreeControls,
    TreeNode,
    best_split,
    default_prune_c,
    grow_tree,
    prune_tree,
    qb,
    tree_to_spec,
)

__version__ = "0.1.0"

__all__ = [
    "AllMissingColumn",
    "CovariateMeta",
    "DataError",
    "DegenerateCorrection",
    "DegenerateVariance",
    "DesignMatrix",
    "DgmSetting",
    "DimensionMismatch",
    "EmptyGroup",
    "EnsembleOptions",
    "ErrorReport",
    "FitOptions",
    "FitResult",
    "GridConfig",
    "IndexOutOfRange",
    "InsufficientDF",
    "MarginalityViolation",
    "MetaDataset",
    "MetaSelectError",
    "MissingColumn",
    "MissingValue",
    "ModelSpec",
    "NonNumericValue",
    "NonPositiveVariance",
    "NumericError",
    "PruneRule",
    "ReportRow",
    "SchemaError",
    "SelectOptions",
    "SelectionMatrix",
    "SelectionResult",
    "SingularDesign",
    "Split",
    "StudyRecord",
    "TraceStep",
    "Tree",
    "TreeControls",
    "TreeNode",
    "ZeroStandardError",
    "ZeroVariance",
    "best_split",
    "build_design",
    "count_admissible_models",
    "default_prune_c",
    "error_rates",
    "estimate_tau2",
    "fit",
    "fit_beta",
    "fit_ensemble",
    "forward_ic_select",
    "forward_test_select",
    "get_setting",
    "grow_tree",
    "heatmap_svg",
    "hksj_covariance",
    "hot_deck_impute",
    "information_criterion",
    "linear_settings",
    "load_dataset",
    "load_schema",
    "log_likelihood",
    "make_replicate",
    "nonlinear_settings",
    "prune_tree",
    "qb",
    "run_grid",
    "schema_to_json",
    "selection_matrix",
    "standardize",
    "student_t_cdf",
    "synthetic_base",
    "threshold_select",
    "tree_to_spec",
    "truth_spec",
    "univariate_select",
    "wald_pvalue",
]
