"""Treatment effect estimation and inference for a single treated cluster.

The package covers the full workflow around one treated aggregate unit:
building balanced panels from micro records, difference-in-differences
and synthetic control style estimators (including the weighted variant
that reweights both donors and pre-periods), a family of inference
procedures sized for exactly one treated cluster, unconditional
quantile effects on the micro data, and a Monte Carlo harness that
measures the size of each test under an autocorrelated error DGP.
"""

from .errors import (
    ConfigError,
    DegenerateDensity,
    DegeneratePanel,
    DuplicateCell,
    EmptyCell,
    EmptyResampledCell,
    IncompatibleFlags,
    MissingCell,
    NoConvergence,
    NonFiniteInput,
    PanelError,
    RankDeficientDesign,
    SingularGram,
    SolodidError,
    SolverError,
    SolverFailure,
    TooFewControls,
    UnknownTreatedUnit,
    ZeroWeightCell,
)
from .estimators import (
    METHOD_DID,
    METHOD_SC,
    METHOD_SC_BC,
    METHOD_SDID,
    EstimateResult,
    RegularizationScales,
    WeightSet,
    adjust_covariates,
    bias_corrected_sc,
    compute_zeta,
    did_estimate,
    sc_estimate,
    sdid_estimate,
    sdid_weights,
)
from .inference import (
    INFER_CRB,
    INFER_CRVE,
    INFER_MBB,
    INFER_PLACEBO_NORMAL,
    INFER_PLACEBO_T,
    INFER_REARRANGEMENT,
    INFER_RMSPE,
    InferenceResult,
    RearrangementFit,
    cluster_residual_bootstrap,
    crve_se,
    modified_block_bootstrap,
    placebo_inference,
    placebo_taus,
    rearrangement_test,
    rmspe_ratio_test,
)
from .manifest import RunManifest
from .montecarlo import (
    ALL_METHODS,
    BaseSurface,
    DgpConfig,
    RejectionReport,
    build_base_surface,
    draw_errors,
    run_study,
)
from .panel import (
    BalancedPanel,
    MicroRecord,
    aggregate_micro,
    read_micro_csv,
    read_panel_csv,
    write_panel_csv,
)
from .rng import method_rng
from .solver import SimplexRidgeProblem, SimplexSolution, project_simplex, solve
from .uqr import (
    QuantileEffectCurve,
    RifSpec,
    quantile_effect_curve,
    rif_transform,
    uqr_did,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_METHODS",
    "BalancedPanel",
    "BaseSurface",
    "ConfigError",
    "DegenerateDensity",
    "DegeneratePanel",
    "DgpConfig",
    "DuplicateCell",
    "EmptyCell",
    "EmptyResampledCell",
    "EstimateResult",
    "IncompatibleFlags",
    "INFER_CRB",
    "INFER_CRVE",
    "INFER_MBB",
    "INFER_PLACEBO_NORMAL",
    "INFER_PLACEBO_T",
    "INFER_REARRANGEMENT",
    "INFER_RMSPE",
    "InferenceResult",
    "METHOD_DID",
    "METHOD_SC",
    "METHOD_SC_BC",
    "METHOD_SDID",
    "MicroRecord",
    "MissingCell",
    "NoConvergence",
    "NonFiniteInput",
    "PanelError",
    "QuantileEffectCurve",
    "RankDeficientDesign",
    "RearrangementFit",
    "RegularizationScales",
    "RejectionReport",
    "RifSpec",
    "RunManifest",
    "SimplexRidgeProblem",
    "SimplexSolution",
    "SingularGram",
    "SolodidError",
    "SolverError",
    "SolverFailure",
    "TooFewControls",
    "UnknownTreatedUnit",
    "WeightSet",
    "ZeroWeightCell",
    "adjust_covariates",
    "aggregate_micro",
    "bias_corrected_sc",
    "build_base_surface",
    "cluster_residual_bootstrap",
    "compute_zeta",
    "crve_se",
    "did_estimate",
    "draw_errors",
    "method_rng",
    "modified_block_bootstrap",
    "placebo_inference",
    "placebo_taus",
    "project_simplex",
    "quantile_effect_curve",
    "read_micro_csv",
    "read_panel_csv",
    "rearrangement_test",
    "rif_transform",
    "rmspe_ratio_test",
    "run_study",
    "sc_estimate",
    "sdid_estimate",
    "sdid_weights",
    "solve",
    "uqr_did",
    "write_panel_csv",
]
