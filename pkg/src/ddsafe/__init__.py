"""Data-driven safe control of second-order systems with unknown dynamics."""

from .barrier import (
    EllipsoidBarrier,
    NonPositiveBarrier,
    NotPositiveDefinite,
    PositionBarrier,
    ReciprocalBarrier,
    ReferenceVelocity,
    SwitchFunction,
    beta_eval,
    make_sphere_barrier,
    make_velocity_barrier,
    sigma,
    x2_reference,
)
from .controller import (
    AdaptationState,
    BarrierSynthesisFailed,
    ControllabilityLoss,
    ControllerGains,
    IndexOverflow,
    SafetyController,
    adaptation_step,
    check_next_barrier,
    control_local,
    control_square,
    find_next_barrier,
)
from .interval import DimensionMismatch, EmptyIntersection, Interval, IntervalMatrix, IntervalVector
from .overapprox import (
    DataPoint,
    EvidenceSet,
    LipschitzBounds,
    NonTermination,
    StepTooLarge,
    approximate,
    contract,
    cover,
    estimate_g,
    estimation_error_bound,
    predict_next_state,
)
from .scenario import ParseError, ScenarioConfig, ValidationFailed, build_scenario, load_config
from .sim import (
    NonFiniteState,
    Plant,
    SafetyViolation,
    Scenario,
    make_quadrotor,
    make_reference,
    rk4_step,
    run_closed_loop,
)

__version__ = "0.1.0"
