"""Scenario compiler: from a validated spec to an executable simulation plan.

Resolves each role's parallelism tuple into a replica layout (device-group world
size, worst-stage memory profile, KV block budget), checks feasibility before
anything is scheduled, and wires the cross-role channel topology for the chosen
architecture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import (
    Architecture,
    ConfigError,
    GpuSpec,
    ModelSpec,
    Role,
    RoleConfig,
    RuntimeConfig,
    ROLE_SETS,
    ServingSpec,
    ceil_div,
)
from .fidelity import FidelityPlane, LinkSpec, MemoryProfile

KV_TRANSFER = "kv_transfer"
ACTIVATION = "activation"
REQUEUE = "requeue"


class InfeasibleError(ConfigError):
    """A role cannot host its weights or has a zero KV budget."""


@dataclass(frozen=True)
class ReplicaLayout:
    """One role's resolved replica shape on a concrete GPU type."""

    role: Role
    pp: int
    tp_attn: int
    dp_attn: int
    tp_ffn: int
    ep_ffn: int
    replicas: int
    gpu: GpuSpec
    world_size: int

    @property
    def total_gpus(self) -> int:
        return self.replicas * self.world_size

    def describe(self) -> str:
        if self.role is Role.FFN:
            par = f"pp{self.pp}/tp{self.tp_ffn}/ep{self.ep_ffn}"
        elif self.role is Role.ATTENTION:
            par = f"pp{self.pp}/tp{self.tp_attn}/dp{self.dp_attn}"
        else:
            par = (f"pp{self.pp}/tp{self.tp_attn}/dp{self.dp_attn}"
                   f"/tpf{self.tp_ffn}/ep{self.ep_ffn}")
        return f"{self.role.value}[{par}]x{self.replicas}@{self.gpu.name}"


def stage_layers(layers: int, pp: int, stage: int) -> int:
    """Layers owned by one pipeline stage (near-even split, earlier stages larger)."""
    base, extra = divmod(layers, pp)
    return base + (1 if stage < extra else 0)


def resolve_layout(model: ModelSpec, role: Role, cfg: RoleConfig, gpu: GpuSpec) -> ReplicaLayout:
    """Fill defaults, enforce the domain-alignment rule, and size the device group.

    Dual-domain roles must tile one device group with both shardings, so
    tp_attn * dp_attn == tp_ffn * ep_ffn is required.  World size is
    pp * tp_attn * dp_attn for attention-path roles and pp * tp_ffn * ep_ffn for
    FFN-only roles.
    """
    cfg = cfg.filled()
    if role.is_dual_domain and cfg.tp_attn * cfg.dp_attn != cfg.tp_ffn * cfg.ep_ffn:
        raise ConfigError(
            f"role {role.value}: attention tiling tp{cfg.tp_attn}*dp{cfg.dp_attn}="
            f"{cfg.tp_attn * cfg.dp_attn} must equal ffn tiling tp{cfg.tp_ffn}*"
            f"ep{cfg.ep_ffn}={cfg.tp_ffn * cfg.ep_ffn}")
    if model.is_moe and role.has_ffn_domain and cfg.ep_ffn > model.experts:
        raise ConfigError(f"role {role.value}: ep_ffn={cfg.ep_ffn} exceeds expert count")
    if cfg.pp > model.layers:
        raise ConfigError(f"role {role.value}: pp={cfg.pp} exceeds layer count")
    if role is Role.FFN:
        world = cfg.pp * cfg.tp_ffn * cfg.ep_ffn
    else:
        world = cfg.pp * cfg.tp_attn * cfg.dp_attn
    return ReplicaLayout(
        role=role, pp=cfg.pp, tp_attn=cfg.tp_attn, dp_attn=cfg.dp_attn,
        tp_ffn=cfg.tp_ffn, ep_ffn=cfg.ep_ffn, replicas=cfg.replicas,
        gpu=gpu, world_size=world,
    )


@dataclass(frozen=True)
class ChannelSpec:
    """Directed cross-role edge with its link parameters."""

    index: int
    src: Role
    dst: Role
    kind: str
    link: LinkSpec


@dataclass(frozen=True)
class ClusterSpec:
    """One role's device group: layout plus per-replica KV capacity."""

    index: int
    role: Role
    layout: ReplicaLayout
    memory: MemoryProfile
    block_bytes: int
    blocks_per_replica: int


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    reason: str = ""
    blocks: dict[Role, int] = field(default_factory=dict)


@dataclass(frozen=True)
class SimulationPlan:
    """Everything the runtime needs, fully resolved and immutable."""

    spec: ServingSpec
    clusters: tuple[ClusterSpec, ...]
    channels: tuple[ChannelSpec, ...]
    total_gpus: int

    def cluster_for(self, role: Role) -> ClusterSpec:
        for c in self.clusters:
            if c.role is role:
                return c
        raise KeyError(role)

    @property
    def architecture(self) -> Architecture:
        return self.spec.architecture

    def describe(self) -> str:
        parts = [c.layout.describe() for c in self.clusters]
        return f"{self.architecture.value}: " + " + ".join(parts) + f" ({self.total_gpus} GPUs)"


CHANNEL_TOPOLOGY: dict[Architecture, tuple[tuple[Role, Role, str], ...]] = {
    Architecture.COLOCATED: (),
    Architecture.PDD: (
        (Role.PREFILL, Role.DECODE, KV_TRANSFER),
        (Role.DECODE, Role.PREFILL, REQUEUE),
    ),
    Architecture.AFD: (
        (Role.PREFILL, Role.ATTENTION, KV_TRANSFER),
        (Role.ATTENTION, Role.FFN, ACTIVATION),
        (Role.FFN, Role.ATTENTION, ACTIVATION),
        (Role.ATTENTION, Role.PREFILL, REQUEUE),
    ),
}


def feasibility_check(spec: ServingSpec, fidelity: FidelityPlane | None = None) -> Feasibility:
    """Cheap pre-launch filter: weights must fit and the KV budget must be positive."""
    fidelity = fidelity or FidelityPlane(spec.model, spec.runtime)
    blocks: dict[Role, int] = {}
    for role in ROLE_SETS[spec.architecture]:
        cfg = spec.roles[role]
        gpu = spec.gpu_for(role)
        try:
            layout = resolve_layout(spec.model, role, cfg, gpu)
        except ConfigError as exc:
            return Feasibility(False, str(exc))
        profile = fidelity.memory_profile(role, cfg, gpu)
        budget = gpu.memory_bytes * spec.runtime.gpu_memory_utilization
        if profile.weight_bytes > budget:
            return Feasibility(
                False,
                f"role {role.value}: weights {profile.weight_bytes / (1 << 30):.1f} GiB "
                f"exceed {budget / (1 << 30):.1f} GiB budget on {gpu.name}")
        n = fidelity.block_budget(role, cfg, gpu)
        if role.has_attention_domain and n <= 0:
            return Feasibility(False, f"role {role.value}: zero KV blocks after overheads")
        blocks[role] = n
        _ = layout
    return Feasibility(True, "", blocks)


def compile_plan(spec: ServingSpec, fidelity: FidelityPlane | None = None) -> SimulationPlan:
    """Resolve layouts, validate totals, fill KV capacity, and wire channels."""
    fidelity = fidelity or FidelityPlane(spec.model, spec.runtime)
    verdict = feasibility_check(spec, fidelity)
    if not verdict.feasible:
        raise InfeasibleError(verdict.reason)

    if spec.architecture is Architecture.AFD:
        if spec.roles[Role.ATTENTION].pp != spec.roles[Role.FFN].pp:
            raise ConfigError("attention and ffn roles must use the same pipeline depth")

    clusters: list[ClusterSpec] = []
    total = 0
    for idx, role in enumerate(ROLE_SETS[spec.architecture]):
        cfg = spec.roles[role]
        gpu = spec.gpu_for(role)
        layout = resolve_layout(spec.model, role, cfg, gpu)
        clusters.append(ClusterSpec(
            index=idx,
            role=role,
            layout=layout,
            memory=fidelity.memory_profile(role, cfg, gpu),
            block_bytes=fidelity.block_bytes(cfg),
            blocks_per_replica=verdict.blocks[role],
        ))
        total += layout.total_gpus

    if spec.total_gpus is not None and total != spec.total_gpus:
        raise ConfigError(
            f"declared total_gpus={spec.total_gpus} but layouts sum to {total}")

    role_to_cluster = {c.role: c for c in clusters}
    channels: list[ChannelSpec] = []
    for i, (src, dst, kind) in enumerate(CHANNEL_TOPOLOGY[spec.architecture]):
        src_gpu = role_to_cluster[src].layout.gpu
        channels.append(ChannelSpec(
            index=i, src=src, dst=dst, kind=kind,
            link=LinkSpec(bandwidth=src_gpu.link_bandwidth,
                          latency_ns=src_gpu.link_latency_ns),
        ))

    return SimulationPlan(
        spec=spec,
        clusters=tuple(clusters),
        channels=tuple(channels),
        total_gpus=total,
    )
