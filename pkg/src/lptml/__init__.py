"""Mahalanobis metric learning by randomized LP-type constraint solving."""

from .approx import (
    AllSubproblemsFailed,
    GridRecord,
    LptmlConfig,
    LptmlResult,
    approx_count_violations,
    grid_cells,
    lptml,
    lptml_regularized,
    save_grid_csv,
    subsample,
)
from .harness import (
    EvalReport,
    IdentityLearner,
    LabeledDataset,
    LptmlLearner,
    NotEnoughPairs,
    compute_thresholds,
    cross_validate,
    generate_constraints,
    knn_accuracy,
    load_builtin,
    load_points_csv,
    pca_reduce,
    poison_dataset,
    save_points_csv,
    synth_two_gaussians,
)
from .lptype import (
    Basis,
    EmptyCandidates,
    LpTypeError,
    RecursionGuardExceeded,
    SolverStats,
    move_to_front,
    pick_pivot,
    solve_lptype,
)
from .meb import MebInstance, circumball, solve_meb
from .metric import (
    ConstraintSet,
    InvalidConstraint,
    MetricInstance,
    MetricMatrix,
    NotPSD,
    PairConstraint,
    SolverFailure,
    count_violations,
    dissimilar,
    factor_transform,
    identity_metric,
    load_constraints,
    make_instance,
    save_constraints,
    similar,
    solve_exact,
)
from .runner import (
    GridRunner,
    Task,
    TaskGrid,
    TaskOutcome,
    derived_seed,
    make_grid,
    resolve_workers,
    run_grid,
)
from .sdp import (
    DimensionMismatch,
    LinearFunctional,
    SdpProblem,
    SdpResult,
    SdpStatus,
    feasibility_report,
    minimize,
)

__version__ = "0.1.0"
