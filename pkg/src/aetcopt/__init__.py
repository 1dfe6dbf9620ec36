"""Multi-fidelity mean estimation with multilevel BLUEs and adaptive explore-then-commit."""

from .aetc import (
    AETC,
    AETC_OPT,
    AETC_OPT_E,
    CovarianceSource,
    ExploitationPolicy,
    LossProfile,
    PolicyChoice,
    estimated_regret,
    geometric_alpha,
    loss,
    optimal_exploration,
    optimal_loss,
    run_aetc,
)
from .allocation import (
    AllocationSolution,
    GroupFamily,
    gamma_hat,
    gamma_of_S,
    gamma_uniform,
    project_simplex,
    round_allocation,
    solve_allocation,
)
from .core import (
    AetcError,
    DegenerateLoss,
    DimensionMismatch,
    EstimatorReport,
    ExplorationData,
    ExploitationInfeasible,
    FixtureNotFound,
    Infeasible,
    InadmissibleSubset,
    InsufficientSamples,
    MomentSet,
    NotASubset,
    NumericalFailure,
    OutOfDomain,
    RankDeficient,
    SampleAllocation,
    SingularGroupCovariance,
    SingularMatrix,
    SingularNormalMatrix,
    enumerate_subsets,
    restriction_matrix,
    subset,
)
from .harness import ExperimentResult, ExperimentSpec, loss_sweep, run_experiment, subset_landscape
from .mlblue import (
    GroupedSamples,
    blue_covariance,
    blue_estimate,
    blue_sketch_variance,
    blue_vs_lrmcstar_gap,
    inner_product_variance,
    lrmc_acv_identity_check,
)
from .problems import (
    GaussianLinearEnsemble,
    elasticity_surrogate,
    load_fixture,
    mc_baseline,
    oracle_mlblue_baseline,
    oracle_quantities,
    save_fixture,
)
from .regression import RegressionFit, empirical_moments, fit_linear_model, schur_trace_identity

__version__ = "0.1.0"
