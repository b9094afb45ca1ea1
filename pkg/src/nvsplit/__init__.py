"""Ninomiya-Victoir splitting for SDEs, with tools to measure its strong
convergence order and the law of its normalized error."""

from .errors import (
    ConfigError,
    DegenerateData,
    DimensionError,
    DomainError,
    NumericalFailure,
    NVError,
    UnsupportedModel,
)
from .flows import FlowSpec, flow, flow_error_budget
from .models import build_model
from .paths import BrownianPath, RademacherSeq, TimeGrid, make_path, make_rademacher
from .schemes import (
    RefConfig,
    Trajectory,
    reference_solution,
    run_scheme,
    simulate_euler,
    simulate_milstein,
    simulate_nv,
    simulate_nv_commuting,
)
from .vecfield import (
    SdeModel,
    VectorField,
    check_commutativity,
    jacobian,
    lie_bracket,
    stratonovich_drift,
    tensor_apply,
)

__version__ = "0.1.0"
