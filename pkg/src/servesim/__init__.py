"""Deterministic discrete-event simulator for LLM serving architectures."""

from .compiler import InfeasibleError, SimulationPlan, compile_plan, feasibility_check
from .config import (
    Architecture,
    GpuSpec,
    ModelSpec,
    Role,
    RoleConfig,
    RuntimeConfig,
    ServingSpec,
    WorkloadConfig,
    load_spec,
)
from .metrics import SlaThresholds, SummaryReport, pareto_filter, score_allocation
from .orchestration import Simulation, SimulationResult, run_simulation
from .workload import Request, build_requests

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "GpuSpec",
    "InfeasibleError",
    "ModelSpec",
    "Request",
    "Role",
    "RoleConfig",
    "RuntimeConfig",
    "ServingSpec",
    "Simulation",
    "SimulationPlan",
    "SimulationResult",
    "SlaThresholds",
    "SummaryReport",
    "WorkloadConfig",
    "build_requests",
    "compile_plan",
    "feasibility_check",
    "load_spec",
    "pareto_filter",
    "run_simulation",
    "score_allocation",
    "__version__",
]
