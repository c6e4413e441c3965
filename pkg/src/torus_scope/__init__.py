"""Detection and classification of limit tori in periodic piecewise-smooth ODEs."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    BoundaryEvaluation,
    ConfigError,
    DomainBox,
    ParameterPoint,
    PiecewiseSystem,
    SwitchingFunction,
    ZoneField,
    field_at,
    load_config,
    load_system,
)
from .integrate import FlowError, FlowTrace, Tolerances, flow, flow_batch, flow_with_variationals  # noqa: E402
from .tmap import derivatives_at, time_t_map  # noqa: E402
from .melnikov import MelnikovPair, melnikov_pair  # noqa: E402
from .nsbif import NSReport, classify, find_fixed_point, lyapunov_first, solve_beta  # noqa: E402
from .curve import InvariantCurve, find_curve, stability_probe  # noqa: E402

__all__ = [
    "BoundaryEvaluation",
    "ConfigError",
    "DomainBox",
    "FlowError",
    "FlowTrace",
    "InvariantCurve",
    "MelnikovPair",
    "NSReport",
    "ParameterPoint",
    "PiecewiseSystem",
    "SwitchingFunction",
    "Tolerances",
    "ZoneField",
    "classify",
    "derivatives_at",
    "field_at",
    "find_curve",
    "find_fixed_point",
    "flow",
    "flow_batch",
    "flow_with_variationals",
    "load_config",
    "load_system",
    "lyapunov_first",
    "melnikov_pair",
    "solve_beta",
    "stability_probe",
    "time_t_map",
    "__version__",
]
