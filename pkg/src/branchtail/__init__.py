"""Simulation and tail analysis for weighted branching fixed-point equations."""

from .model import (
    ModelError,
    MomentValue,
    VectorModel,
    make_model,
    make_value_law,
    sample_vector,
    moment_function,
    moment_function_deriv,
    sum_moment,
)
from .cramer import (
    ConditionReport,
    ContractionRootError,
    CramerSolution,
    NoSignChangeError,
    SolverError,
    check_conditions,
    solve_alpha,
)
from .engine import (
    DEFAULT_BUDGET,
    EngineError,
    SampleBatch,
    iterate_from,
    read_batch_csv,
    run_batch,
    summary,
    truncation_bound,
    write_batch_csv,
)
from .moments import (
    BoundError,
    MomentReport,
    constructive_constant,
    estimate_moment,
    fixed_point_mean_exact,
    generation_mean_exact,
    generation_moment_bound,
    jackknife_mean_se,
    verify_sum_inequality,
)
from .tails import (
    HillEstimate,
    PlateauEstimate,
    StabilityCheck,
    TailError,
    TailReport,
    default_survival_grid,
    hill_estimator,
    hill_sweep,
    plateau_constant,
    stability_diagnostic,
    survival_points,
    tail_report,
)
from .renewal import (
    DualEstimateReport,
    TEST_FUNCTIONS,
    TiltError,
    TiltedMeasure,
    make_tilted,
    sample_increment,
    verify_product_measure,
)
from .constants import (
    ConstantError,
    TailConstantReport,
    tail_constant_bounds,
    tail_constant_closed_form,
    tail_constant_mc,
    tail_constant_report,
)

__version__ = "0.1.0"
