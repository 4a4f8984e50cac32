"""Open-quantum-system model of human decisions under machine feedback."""

from .config import ScenarioConfig, default_scenario, dump_config, load_config
from .controller import (
    ControlCoupling,
    ControlledModel,
    ExpectationKernel,
    IntervalDistribution,
    LyapunovSpec,
    check_control_constraints,
    curvature_report,
    expected_V,
    lyapunov_value,
    select_control,
    select_sigma,
    select_sigma_for_action,
)
from .discretization import EXACT, PAPER, ActionProjectors, KrausSet, build_kraus, step_interval
from .errors import (
    ConfigError,
    DegenerateDistribution,
    InfeasibleWeights,
    InvariantViolation,
    QuantumDecisionError,
    TraceTooShort,
    ValidationError,
    ValidityBoundViolated,
    ZeroLikelihood,
    ZeroProbabilityOutcome,
)
from .model import BehaviorParams, DecisionModel, LindbladGenerator, ModelDims, exact_propagate
from .simulation import (
    EnsembleSummary,
    TrajectoryRecord,
    bayes_posterior,
    run_ensemble,
    run_trajectory,
    stp_discrepancy,
)
from .stability import (
    DriftReport,
    SystemAdapter,
    drift_estimate,
    kushner_bound_check,
    lindblad_adapter,
    random_interval_drift,
    residue_convergence_check,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
