"""Projection-free conditional-gradient methods for stochastic simple
bilevel optimization, with benchmark problems and a CLI harness."""

from .core import (
    BilevelProblem,
    ComponentOracle,
    ConfigurationError,
    CutPlane,
    KtSchedule,
    LeastSquaresOracle,
    MetricsRecord,
    NoisyOracle,
    ProblemConstants,
    ReferenceValues,
    StochasticOracle,
    UnsupportedMetricError,
    cut_contains,
    evaluate_metrics,
    fw_gap_exact,
    kt_sbcgf,
    kt_sbcgi,
    make_cut_plane,
)
from .estimators import (
    SpiderState,
    StormState,
    minibatch_estimate,
    spider_init,
    spider_step,
    storm_init,
    storm_step,
    support_seq_st,
)
from .sets import (
    BallProductBlock,
    BlockProduct,
    BracketFailureError,
    FeasibleSet,
    InfeasibleCutError,
    L1Ball,
    PolytopeByVertices,
    UniformL1Product,
    constrained_lmo,
    constrained_lmo_ball_product,
    constrained_lmo_l1,
    lmo,
    project,
    project_l1,
)
from .solvers import (
    RunTrace,
    Schedule,
    SolverConfig,
    WarmStartFailureError,
    aripseg_run,
    dbgd_sto_run,
    fw_single_level_run,
    iterations_for_budget,
    sbcg_m_run,
    sbcgf_run,
    sbcgi_run,
    warm_start_x0,
)

__version__ = "0.1.0"
