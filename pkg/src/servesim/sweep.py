"""Grid sweeps over serving configurations.

A grid is a base scenario plus named axes.  Each axis maps a dotted config
path to a list of values; a path starting with ``@`` is a bundle axis whose
values are dicts of several paths applied together (how mixed-architecture
grids swap the whole role set in one step).  Candidates are enumerated as
the cartesian product in axis order, filtered on GPU budget and static
feasibility without simulating, and the survivors are simulated and ranked.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Any

from .compiler import InfeasibleError, feasibility_check, resolve_layout
from .config import (
    Architecture,
    ReconfigConfig,
    Role,
    RoleConfig,
    ServingSpec,
    SpecDecodeConfig,
)
from .metrics import CandidatePoint, SlaThresholds, SummaryReport, pareto_filter
from .orchestration import run_simulation


class SweepError(ValueError):
    pass


# -- axis application ---------------------------------------------------------

def _coerce(current: Any, value: Any) -> Any:
    """Best-effort coercion of an axis value onto an existing field."""
    if isinstance(current, Architecture):
        return Architecture(value)
    if isinstance(current, Role):
        return Role(value)
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(current, RoleConfig) and isinstance(value, dict):
        return replace(current, **value)
    if isinstance(current, SpecDecodeConfig) and isinstance(value, (list, tuple)):
        return SpecDecodeConfig(verify_tokens=int(value[0]), acceptance=float(value[1]))
    return value


def _roles_from_mapping(value: dict) -> dict[Role, RoleConfig]:
    roles = {}
    for key, entry in value.items():
        if not isinstance(entry, dict):
            raise SweepError(f"role entry for {key!r} must be a mapping")
        roles[Role(key)] = RoleConfig(**entry)
    return roles


def apply_axis_value(spec: ServingSpec, path: str, value: Any) -> ServingSpec:
    """Return a copy of the spec with one dotted path replaced."""
    parts = path.split(".")
    head = parts[0]
    if head == "architecture":
        return replace(spec, architecture=Architecture(value))
    if head == "roles":
        if len(parts) == 1:
            return replace(spec, roles=_roles_from_mapping(value))
        role = Role(parts[1])
        if role not in spec.roles:
            raise SweepError(f"axis {path!r}: spec has no {role.value} role")
        cfg = spec.roles[role]
        if len(parts) == 2:
            cfg = replace(cfg, **value) if isinstance(value, dict) else value
        else:
            cfg = replace(cfg, **{parts[2]: value})
        roles = dict(spec.roles)
        roles[role] = cfg
        return replace(spec, roles=roles)
    if head in ("model", "runtime", "workload"):
        node = getattr(spec, head)
        if len(parts) < 2:
            raise SweepError(f"axis {path!r} needs a field name")
        if len(parts) == 2:
            current = getattr(node, parts[1], None)
            if parts[1] == "reconfig" and isinstance(value, dict):
                target = value.get("target")
                value = ReconfigConfig(
                    threshold=float(value["threshold"]),
                    target=RoleConfig(**target) if isinstance(target, dict) else target,
                    cost_ns=int(value["cost_ns"]))
            elif parts[1] == "spec_decode" and isinstance(value, (list, tuple)):
                value = SpecDecodeConfig(verify_tokens=int(value[0]),
                                         acceptance=float(value[1]))
            else:
                value = _coerce(current, value)
            return replace(spec, **{head: replace(node, **{parts[1]: value})})
        # one more level (arrival.qps, quant.*, spec_decode.*)
        inner = getattr(node, parts[1])
        inner = replace(inner, **{parts[2]: _coerce(getattr(inner, parts[2], None), value)})
        return replace(spec, **{head: replace(node, **{parts[1]: inner})})
    raise SweepError(f"unknown axis path {path!r}")


def _apply(spec: ServingSpec, key: str, value: Any) -> ServingSpec:
    if key.startswith("@"):
        if not isinstance(value, dict):
            raise SweepError(f"bundle axis {key!r} takes mappings, got {value!r}")
        for sub_path, sub_value in value.items():
            if sub_path == "_name":
                continue
            spec = apply_axis_value(spec, sub_path, sub_value)
        return spec
    return apply_axis_value(spec, key, value)


def _value_label(key: str, value: Any, index: int) -> str:
    if isinstance(value, dict):
        return str(value.get("_name", f"v{index}"))
    if isinstance(value, (list, tuple)):
        return "x".join(str(v) for v in value)
    return str(value)


# -- grid ---------------------------------------------------------------------

@dataclass
class GridSpec:
    """Base scenario plus axes; optionally a GPU budget cap."""

    base: ServingSpec
    axes: dict[str, list] = field(default_factory=dict)
    budget_gpus: int | None = None
    exact_budget: bool = False

    def __post_init__(self):
        for key, values in self.axes.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise SweepError(f"axis {key!r} needs a non-empty value list")


def planned_gpus(spec: ServingSpec) -> int:
    total = 0
    for role, cfg in spec.roles.items():
        layout = resolve_layout(spec.model, role, cfg, spec.gpu_for(role))
        total += layout.world_size * layout.replicas
    return total


def enumerate_grid(grid: GridSpec) -> list[tuple[str, ServingSpec]]:
    """Deterministic candidate list: cartesian product in axis order."""
    if not grid.axes:
        return [("base", grid.base)]
    keys = list(grid.axes)
    combos = itertools.product(*(enumerate(grid.axes[k]) for k in keys))
    out: list[tuple[str, ServingSpec]] = []
    for combo in combos:
        spec = grid.base
        tags = []
        for key, (idx, value) in zip(keys, combo):
            spec = _apply(spec, key, value)
            tags.append(f"{key.lstrip('@')}={_value_label(key, value, idx)}")
        out.append(("/".join(tags), spec))
    return out


# -- sweep --------------------------------------------------------------------

@dataclass
class CandidateResult:
    name: str
    spec: ServingSpec
    status: str                       # simulated | over_budget | infeasible | error
    reason: str = ""
    total_gpus: int = 0
    summary: SummaryReport | None = None
    point: CandidatePoint | None = None


@dataclass
class SweepReport:
    candidates: list[CandidateResult]
    frontier: list[CandidatePoint]
    best_per_architecture: dict[str, CandidatePoint]
    simulated: int
    skipped: int

    def simulated_points(self) -> list[CandidatePoint]:
        return [c.point for c in self.candidates if c.point is not None]


def candidate_point(name: str, spec: ServingSpec, summary: SummaryReport,
                    total_gpus: int) -> CandidatePoint:
    tpot = summary.latency_percentiles.get("tpot", {})
    p50_tpot = tpot.get(50)
    # per-user generation speed: tokens/s for the median request
    speed = 1e9 / p50_tpot if p50_tpot else 0.0
    ttft = summary.latency_percentiles.get("ttft", {})
    return CandidatePoint(
        name=name,
        architecture=spec.architecture.value,
        generation_speed=speed,
        throughput=summary.throughput_tok_s,
        p95_ttft_ms=ttft.get(95, 0) / 1e6,
        p95_tpot_ms=(tpot.get(95) or 0) / 1e6,
        meta=(("total_gpus", total_gpus),),
    )


def run_sweep(grid: GridSpec, sla: SlaThresholds | None = None, *,
              executor: str = "sequential",
              quantiles: tuple[int, ...] = (50, 95)) -> SweepReport:
    """Enumerate, budget-filter, feasibility-filter, simulate, and rank."""
    candidates = enumerate_grid(grid)
    if not candidates:
        raise SweepError("empty grid: nothing to sweep")
    results: list[CandidateResult] = []
    for name, spec in candidates:
        try:
            gpus = planned_gpus(spec)
        except InfeasibleError as exc:
            results.append(CandidateResult(name, spec, "infeasible", str(exc)))
            continue
        if grid.budget_gpus is not None:
            over = (gpus != grid.budget_gpus if grid.exact_budget
                    else gpus > grid.budget_gpus)
            if over:
                results.append(CandidateResult(
                    name, spec, "over_budget",
                    f"{gpus} GPUs vs budget {grid.budget_gpus}", gpus))
                continue
        verdict = feasibility_check(spec)
        if not verdict.feasible:
            results.append(CandidateResult(
                name, spec, "infeasible", verdict.reason, gpus))
            continue
        sim = run_simulation(spec, executor=executor)
        summary = sim.summarize(quantiles=quantiles)
        point = candidate_point(name, spec, summary, gpus)
        results.append(CandidateResult(
            name, spec, "simulated", "", gpus, summary, point))
    points = [r.point for r in results if r.point is not None]
    if points:
        frontier, best = pareto_filter(points, sla)
    else:
        frontier, best = [], {}
    return SweepReport(
        candidates=results,
        frontier=frontier,
        best_per_architecture=best,
        simulated=len(points),
        skipped=len(results) - len(points),
    )
