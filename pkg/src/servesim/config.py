"""Serving scenario configuration.

A scenario is described by a single YAML document with a top-level
``spec_version`` field: a model descriptor, a hardware section (GPU catalog plus
per-role GPU assignment), one serving architecture with per-role parallelism
tuples, runtime feature flags, and a workload section.  Parsing is strict:
unknown keys and inconsistent parallelism are rejected here, before anything is
simulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

SPEC_VERSION = 1

MS = 1_000_000          # ns per millisecond
SECOND = 1_000_000_000  # ns per second
GIB = 1 << 30
MIB = 1 << 20


class ConfigError(ValueError):
    """Malformed or inconsistent serving specification."""


class Architecture(str, Enum):
    COLOCATED = "colocated"
    PDD = "pdd"    # prefill/decode disaggregation
    AFD = "afd"    # attention/FFN disaggregation


class Role(str, Enum):
    COLOCATED = "colocated"
    PREFILL = "prefill"
    DECODE = "decode"
    ATTENTION = "attention"
    FFN = "ffn"

    @property
    def tag(self) -> str:
        return _ROLE_TAGS[self]

    @property
    def has_attention_domain(self) -> bool:
        return self is not Role.FFN

    @property
    def has_ffn_domain(self) -> bool:
        return self is not Role.ATTENTION

    @property
    def is_dual_domain(self) -> bool:
        return self.has_attention_domain and self.has_ffn_domain


_ROLE_TAGS = {
    Role.COLOCATED: "C",
    Role.PREFILL: "P",
    Role.DECODE: "D",
    Role.ATTENTION: "A",
    Role.FFN: "F",
}

ROLE_SETS: dict[Architecture, tuple[Role, ...]] = {
    Architecture.COLOCATED: (Role.COLOCATED,),
    Architecture.PDD: (Role.PREFILL, Role.DECODE),
    Architecture.AFD: (Role.PREFILL, Role.ATTENTION, Role.FFN),
}

# Roles that admit new work (arrivals and requeued rounds enter here).
ENTRY_ROLE = {
    Architecture.COLOCATED: Role.COLOCATED,
    Architecture.PDD: Role.PREFILL,
    Architecture.AFD: Role.PREFILL,
}

# Roles that own decode iterations.
DECODE_ROLE = {
    Architecture.COLOCATED: Role.COLOCATED,
    Architecture.PDD: Role.DECODE,
    Architecture.AFD: Role.ATTENTION,
}


@dataclass(frozen=True)
class GpuSpec:
    """One GPU type: compute/memory rates plus interconnect and price."""

    name: str
    memory_bytes: int
    peak_flops: float          # dense FLOP/s at the serving dtype
    hbm_bandwidth: float       # bytes/s
    link_bandwidth: float      # bytes/s, cross-device link
    link_latency_ns: int
    price_per_hour: float

    def __post_init__(self):
        if self.memory_bytes <= 0 or self.peak_flops <= 0 or self.hbm_bandwidth <= 0:
            raise ConfigError(f"gpu {self.name}: rates must be positive")
        if self.link_bandwidth <= 0 or self.link_latency_ns < 1:
            raise ConfigError(f"gpu {self.name}: link must have positive bandwidth and >=1ns latency")


def _gpu_from_entry(name: str, entry: dict) -> GpuSpec:
    entry = dict(entry)
    known = {"memory_gb", "tflops", "hbm_gbps", "link_gbps", "link_latency_us", "price_per_hour"}
    unknown = set(entry) - known
    if unknown:
        raise ConfigError(f"gpu {name}: unknown keys {sorted(unknown)}")
    try:
        return GpuSpec(
            name=name,
            memory_bytes=int(float(entry["memory_gb"]) * GIB),
            peak_flops=float(entry["tflops"]) * 1e12,
            hbm_bandwidth=float(entry["hbm_gbps"]) * 1e9,
            link_bandwidth=float(entry.get("link_gbps", 50.0)) * 1e9,
            link_latency_ns=max(1, int(float(entry.get("link_latency_us", 10.0)) * 1000)),
            price_per_hour=float(entry.get("price_per_hour", 0.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"gpu {name}: missing field {exc}") from exc


#: Bundled catalog.  Rates are public board figures at the serving dtype; the
#: hourly prices are the published rental figures used by the savings-ratio math.
DEFAULT_GPU_CATALOG_ENTRIES: dict[str, dict] = {
    "H800": {"memory_gb": 80, "tflops": 989, "hbm_gbps": 3350, "link_gbps": 50,
             "link_latency_us": 10, "price_per_hour": 3.49},
    "H100": {"memory_gb": 80, "tflops": 989, "hbm_gbps": 3350, "link_gbps": 50,
             "link_latency_us": 10, "price_per_hour": 3.99},
    "H20": {"memory_gb": 96, "tflops": 148, "hbm_gbps": 4000, "link_gbps": 50,
            "link_latency_us": 10, "price_per_hour": 1.59},
    "A100": {"memory_gb": 80, "tflops": 312, "hbm_gbps": 2039, "link_gbps": 25,
             "link_latency_us": 10, "price_per_hour": 2.21},
}


def default_gpu_catalog() -> dict[str, GpuSpec]:
    return {name: _gpu_from_entry(name, e) for name, e in DEFAULT_GPU_CATALOG_ENTRIES.items()}


def load_gpu_catalog(path: str | Path) -> dict[str, GpuSpec]:
    """Load a GPU-type catalog file (YAML mapping of name -> rate entry)."""
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"gpu catalog {path}: expected a mapping")
    return {str(name): _gpu_from_entry(str(name), entry) for name, entry in data.items()}


@dataclass(frozen=True)
class ModelSpec:
    """Transformer shape descriptor; only fields the cost/memory math reads."""

    name: str = "model"
    layers: int = 32
    hidden_dim: int = 4096
    num_heads: int = 32
    num_kv_heads: int = 8
    head_dim: int = 128
    ffn_dim: int = 14336
    vocab_size: int = 128256
    dtype_bytes: int = 2
    experts: int = 0           # 0 = dense
    top_k: int = 0
    moe_ffn_dim: int = 0       # per-expert intermediate size

    def __post_init__(self):
        for f in ("layers", "hidden_dim", "num_heads", "num_kv_heads", "head_dim",
                  "ffn_dim", "vocab_size", "dtype_bytes"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"model.{f} must be positive")
        if self.num_heads % self.num_kv_heads != 0:
            raise ConfigError("model.num_heads must be a multiple of num_kv_heads")
        if self.experts < 0:
            raise ConfigError("model.experts must be >= 0")
        if self.experts:
            if not (1 <= self.top_k <= self.experts):
                raise ConfigError("model.top_k must be in [1, experts]")
            if self.moe_ffn_dim <= 0:
                raise ConfigError("model.moe_ffn_dim must be positive for MoE models")

    @property
    def is_moe(self) -> bool:
        return self.experts > 0


@dataclass(frozen=True)
class RoleConfig:
    """Parallelism tuple and placement for one role's replicas.

    Dual-domain roles must satisfy tp_attn * dp_attn == tp_ffn * ep_ffn so both
    domains tile the same device group.  For dense models ep_ffn acts as plain
    data parallelism over the FFN domain.
    """

    pp: int = 1
    tp_attn: int = 1
    dp_attn: int = 1
    tp_ffn: int | None = None   # default: tp_attn
    ep_ffn: int | None = None   # default: dp_attn
    replicas: int = 1
    gpu: str | None = None      # catalog name; None = hardware.default_gpu

    def __post_init__(self):
        for f in ("pp", "tp_attn", "dp_attn", "replicas"):
            if getattr(self, f) < 1:
                raise ConfigError(f"role.{f} must be >= 1")
        for f in ("tp_ffn", "ep_ffn"):
            v = getattr(self, f)
            if v is not None and v < 1:
                raise ConfigError(f"role.{f} must be >= 1")

    def filled(self) -> "RoleConfig":
        return replace(
            self,
            tp_ffn=self.tp_ffn if self.tp_ffn is not None else self.tp_attn,
            ep_ffn=self.ep_ffn if self.ep_ffn is not None else self.dp_attn,
        )


@dataclass(frozen=True)
class SpecDecodeConfig:
    """Multi-token-prediction speculative decoding: draft length and accept rate."""

    verify_tokens: int
    acceptance: float

    def __post_init__(self):
        if self.verify_tokens < 1:
            raise ConfigError("spec_decode.verify_tokens must be >= 1")
        if not (0.0 <= self.acceptance <= 1.0):
            raise ConfigError("spec_decode.acceptance must be in [0, 1]")


@dataclass(frozen=True)
class QuantConfig:
    """Multiplicative scale factors standing in for quantized kernels/layouts."""

    duration_scale: float = 1.0
    weight_bytes_scale: float = 1.0
    kv_bytes_scale: float = 1.0

    def __post_init__(self):
        for f in ("duration_scale", "weight_bytes_scale", "kv_bytes_scale"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"quant.{f} must be positive")


@dataclass(frozen=True)
class ReconfigConfig:
    """One-shot layout switch: trigger fraction, target layout, cost window."""

    threshold: float
    target: RoleConfig
    cost_ns: int

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError("reconfig.threshold must be in (0, 1)")
        if self.cost_ns < 0:
            raise ConfigError("reconfig.cost_ns must be >= 0")


DEFAULT_CAPTURE_BINS = (1, 2, 4, 8, 16, 32, 64)
DEFAULT_MLFQ_QUANTA = (512, 2048, 8192, 0)   # 0 = unbounded bottom level

SCHEDULERS = ("vllm_v1", "sglang", "mlfq", "h2q_br")


@dataclass(frozen=True)
class RuntimeConfig:
    """Engine feature flags shared by every role unless a test overrides them."""

    scheduler: str = "vllm_v1"
    max_batch_size: int = 256
    max_batch_tokens: int = 8192
    chunk_budget: int | None = None          # per-iteration prefill token budget; None = max_batch_tokens
    block_tokens: int = 16
    gpu_memory_utilization: float = 0.9
    watermark: float = 0.01
    cuda_graph: bool = True
    capture_bins: tuple[int, ...] = DEFAULT_CAPTURE_BINS
    spec_decode: SpecDecodeConfig | None = None
    prefix_cache: bool = True
    prefix_cache_capacity: int | None = None  # blocks; None = unbounded
    launch_overhead_ns: int = 2_000
    framework_overhead_bytes: int = 2 * GIB   # runtime peak-allocation stand-in
    workspace_overhead_bytes: int = 1 * GIB   # collective buffers / non-framework residency
    delta_ep_ns: int = 0                      # extra wait after the slowest expert lane
    moe_routing: str = "balanced"             # balanced | skew
    quant: QuantConfig = QuantConfig()
    h2q_short_prompt: int = 8192              # L: prompt-length boundary for the short queue
    h2q_history: int = 65536                  # C: cumulative-service boundary
    h2q_release_bound: int = 8                # B: short-queue streak before a forced long release
    mlfq_quanta: tuple[int, ...] = DEFAULT_MLFQ_QUANTA
    reconfig: ReconfigConfig | None = None

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}; choose from {SCHEDULERS}")
        if self.max_batch_size < 1 or self.max_batch_tokens < 1:
            raise ConfigError("batch caps must be >= 1")
        if self.chunk_budget is not None and self.chunk_budget < 1:
            raise ConfigError("chunk_budget must be >= 1")
        if self.block_tokens < 1:
            raise ConfigError("block_tokens must be >= 1")
        if not (0.0 < self.gpu_memory_utilization <= 1.0):
            raise ConfigError("gpu_memory_utilization must be in (0, 1]")
        if not (0.0 <= self.watermark < 1.0):
            raise ConfigError("watermark must be in [0, 1)")
        bins = self.capture_bins
        if not bins or any(b < 1 for b in bins) or list(bins) != sorted(set(bins)):
            raise ConfigError("capture_bins must be strictly increasing positive sizes")
        if self.moe_routing not in ("balanced", "skew"):
            raise ConfigError("moe_routing must be balanced or skew")
        if self.launch_overhead_ns < 0 or self.delta_ep_ns < 0:
            raise ConfigError("overheads must be >= 0")
        if len(self.mlfq_quanta) < 1 or any(q < 0 for q in self.mlfq_quanta):
            raise ConfigError("mlfq_quanta must be non-negative (0 = unbounded last level)")
        if self.h2q_short_prompt < 0 or self.h2q_history < 0 or self.h2q_release_bound < 1:
            raise ConfigError("two-queue policy bounds out of range")

    @property
    def prefill_token_budget(self) -> int:
        return self.chunk_budget if self.chunk_budget is not None else self.max_batch_tokens


@dataclass(frozen=True)
class ArrivalConfig:
    """Arrival process: everything at t=0, a fixed rate, or Poisson."""

    kind: str = "burst"        # burst | rate | poisson
    qps: float = 0.0

    def __post_init__(self):
        if self.kind not in ("burst", "rate", "poisson"):
            raise ConfigError(f"arrival.kind must be burst|rate|poisson, got {self.kind!r}")
        if self.kind != "burst" and self.qps <= 0:
            raise ConfigError("arrival.qps must be positive for rate/poisson arrivals")


PATTERN_SHAPES = {
    "prefill_heavy": (2048, 256),
    "decode_heavy": (256, 2048),
    "balanced": (1024, 1024),
}

WORKLOAD_PATTERNS = tuple(PATTERN_SHAPES) + ("trace", "agentic")

# Five-round session templates: (new prompt tokens, decode tokens) per round.
AGENTIC_SHORT_TEMPLATE = ((4096, 96), (1024, 64), (512, 64), (512, 64), (256, 192))
AGENTIC_HEAVY_TEMPLATE = ((32768, 96), (16384, 64), (8192, 64), (4096, 64), (256, 192))

DEFAULT_TOOL_DELAY_NS = 50 * MS


@dataclass(frozen=True)
class WorkloadConfig:
    pattern: str = "balanced"
    num_requests: int = 64
    arrival: ArrivalConfig = ArrivalConfig()
    seed: int = 0
    trace_path: str | None = None
    agentic_mix: float = 0.0          # fraction of sessions on the heavy-tail template
    tool_delay_ns: int = DEFAULT_TOOL_DELAY_NS
    input_len: int | None = None      # override the pattern's prompt length
    output_len: int | None = None
    jitter: float = 0.0               # +/- fraction applied to lengths

    def __post_init__(self):
        if self.pattern not in WORKLOAD_PATTERNS:
            raise ConfigError(f"workload.pattern must be one of {WORKLOAD_PATTERNS}")
        if self.num_requests < 1:
            raise ConfigError("workload.num_requests must be >= 1")
        if self.pattern == "trace" and not self.trace_path:
            raise ConfigError("workload.trace_path required for trace pattern")
        if not (0.0 <= self.agentic_mix <= 1.0):
            raise ConfigError("workload.agentic_mix must be in [0, 1]")
        if self.tool_delay_ns < 0:
            raise ConfigError("workload.tool_delay_ns must be >= 0")
        if not (0.0 <= self.jitter < 1.0):
            raise ConfigError("workload.jitter must be in [0, 1)")
        for f in ("input_len", "output_len"):
            v = getattr(self, f)
            if v is not None and v < 1:
                raise ConfigError(f"workload.{f} must be >= 1")


@dataclass(frozen=True)
class ServingSpec:
    """The full scenario document, validated."""

    model: ModelSpec
    architecture: Architecture
    roles: dict[Role, RoleConfig]
    runtime: RuntimeConfig = RuntimeConfig()
    workload: WorkloadConfig = WorkloadConfig()
    gpu_catalog: dict[str, GpuSpec] = field(default_factory=default_gpu_catalog)
    default_gpu: str = "H800"
    total_gpus: int | None = None    # optional declared total, validated by the compiler
    spec_version: int = SPEC_VERSION

    def __post_init__(self):
        if self.spec_version != SPEC_VERSION:
            raise ConfigError(f"unsupported spec_version {self.spec_version} (expected {SPEC_VERSION})")
        expected = set(ROLE_SETS[self.architecture])
        got = set(self.roles)
        if got != expected:
            raise ConfigError(
                f"architecture {self.architecture.value} needs roles "
                f"{sorted(r.value for r in expected)}, got {sorted(r.value for r in got)}")
        for role, cfg in self.roles.items():
            gpu = cfg.gpu or self.default_gpu
            if gpu not in self.gpu_catalog:
                raise ConfigError(f"role {role.value}: gpu {gpu!r} not in catalog")
        if self.default_gpu not in self.gpu_catalog:
            raise ConfigError(f"default_gpu {self.default_gpu!r} not in catalog")

    def gpu_for(self, role: Role) -> GpuSpec:
        return self.gpu_catalog[self.roles[role].gpu or self.default_gpu]


def _take(section: Any, allowed: set[str], where: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return dict(section)


def _parse_role(entry: dict, where: str) -> RoleConfig:
    entry = _take(entry, {"pp", "tp_attn", "dp_attn", "tp_ffn", "ep_ffn", "replicas", "gpu"}, where)
    return RoleConfig(**entry)


def _parse_runtime(entry: dict) -> RuntimeConfig:
    entry = _take(entry, {
        "scheduler", "max_batch_size", "max_batch_tokens", "chunk_budget", "block_tokens",
        "gpu_memory_utilization", "watermark", "cuda_graph", "capture_bins", "spec_decode",
        "prefix_cache", "prefix_cache_capacity", "launch_overhead_ns",
        "framework_overhead_gb", "workspace_overhead_gb", "delta_ep_us", "moe_routing",
        "quant", "h2q_short_prompt", "h2q_history", "h2q_release_bound", "mlfq_quanta",
        "reconfig",
    }, "runtime")
    kwargs: dict[str, Any] = {}
    for key in ("scheduler", "max_batch_size", "max_batch_tokens", "chunk_budget", "block_tokens",
                "gpu_memory_utilization", "watermark", "cuda_graph", "prefix_cache",
                "prefix_cache_capacity", "launch_overhead_ns", "moe_routing",
                "h2q_short_prompt", "h2q_history", "h2q_release_bound"):
        if key in entry:
            kwargs[key] = entry[key]
    if "capture_bins" in entry:
        kwargs["capture_bins"] = tuple(int(b) for b in entry["capture_bins"])
    if "mlfq_quanta" in entry:
        kwargs["mlfq_quanta"] = tuple(int(q) for q in entry["mlfq_quanta"])
    if "framework_overhead_gb" in entry:
        kwargs["framework_overhead_bytes"] = int(float(entry["framework_overhead_gb"]) * GIB)
    if "workspace_overhead_gb" in entry:
        kwargs["workspace_overhead_bytes"] = int(float(entry["workspace_overhead_gb"]) * GIB)
    if "delta_ep_us" in entry:
        kwargs["delta_ep_ns"] = int(float(entry["delta_ep_us"]) * 1000)
    if entry.get("spec_decode"):
        sd = _take(entry["spec_decode"], {"verify_tokens", "acceptance"}, "runtime.spec_decode")
        kwargs["spec_decode"] = SpecDecodeConfig(int(sd["verify_tokens"]), float(sd["acceptance"]))
    if entry.get("quant"):
        q = _take(entry["quant"], {"duration_scale", "weight_bytes_scale", "kv_bytes_scale"},
                  "runtime.quant")
        kwargs["quant"] = QuantConfig(**{k: float(v) for k, v in q.items()})
    if entry.get("reconfig"):
        rc = _take(entry["reconfig"], {"threshold", "target", "cost_ms"}, "runtime.reconfig")
        target = _parse_role(rc.get("target", {}), "runtime.reconfig.target")
        kwargs["reconfig"] = ReconfigConfig(
            threshold=float(rc["threshold"]),
            target=target,
            cost_ns=int(float(rc.get("cost_ms", 0.0)) * MS),
        )
    return RuntimeConfig(**kwargs)


def _parse_workload(entry: dict) -> WorkloadConfig:
    entry = _take(entry, {
        "pattern", "num_requests", "arrival", "seed", "trace_path", "agentic_mix",
        "tool_delay_ms", "input_len", "output_len", "jitter",
    }, "workload")
    kwargs: dict[str, Any] = {}
    for key in ("pattern", "num_requests", "seed", "trace_path", "agentic_mix",
                "input_len", "output_len", "jitter"):
        if key in entry:
            kwargs[key] = entry[key]
    if "tool_delay_ms" in entry:
        kwargs["tool_delay_ns"] = int(float(entry["tool_delay_ms"]) * MS)
    if "arrival" in entry:
        arr = _take(entry["arrival"], {"kind", "qps"}, "workload.arrival")
        kwargs["arrival"] = ArrivalConfig(kind=arr.get("kind", "burst"), qps=float(arr.get("qps", 0.0)))
    return WorkloadConfig(**kwargs)


def parse_spec(text: str, base_dir: str | Path | None = None) -> ServingSpec:
    """Parse and validate a scenario document from YAML text.

    ``base_dir`` resolves relative catalog/trace paths (defaults to cwd).
    """
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("spec document must be a mapping")
    data = _take(data, {"spec_version", "model", "hardware", "architecture", "roles",
                        "runtime", "workload"}, "spec")
    if "spec_version" not in data:
        raise ConfigError("spec document must declare spec_version")
    base = Path(base_dir) if base_dir else Path.cwd()

    model_entry = _take(data.get("model"), {
        "name", "layers", "hidden_dim", "num_heads", "num_kv_heads", "head_dim",
        "ffn_dim", "vocab_size", "dtype_bytes", "experts", "top_k", "moe_ffn_dim",
    }, "model")
    model = ModelSpec(**model_entry)

    hw = _take(data.get("hardware"), {"gpu_catalog", "catalog", "default_gpu", "total_gpus"},
               "hardware")
    catalog = default_gpu_catalog()
    if hw.get("catalog"):
        inline = hw["catalog"]
        if not isinstance(inline, dict):
            raise ConfigError("hardware.catalog must be a mapping")
        catalog.update({str(n): _gpu_from_entry(str(n), e) for n, e in inline.items()})
    if hw.get("gpu_catalog"):
        p = Path(hw["gpu_catalog"])
        catalog.update(load_gpu_catalog(p if p.is_absolute() else base / p))
    default_gpu = str(hw.get("default_gpu", "H800"))
    total_gpus = int(hw["total_gpus"]) if hw.get("total_gpus") is not None else None

    try:
        architecture = Architecture(str(data.get("architecture", "")).lower())
    except ValueError:
        raise ConfigError(f"unknown architecture {data.get('architecture')!r}") from None

    roles_entry = data.get("roles") or {}
    if not isinstance(roles_entry, dict):
        raise ConfigError("roles: expected a mapping")
    roles: dict[Role, RoleConfig] = {}
    for name, entry in roles_entry.items():
        try:
            role = Role(str(name).lower())
        except ValueError:
            raise ConfigError(f"unknown role {name!r}") from None
        roles[role] = _parse_role(entry or {}, f"roles.{name}")
    if not roles and architecture is Architecture.COLOCATED:
        roles = {Role.COLOCATED: RoleConfig()}

    workload = _parse_workload(data.get("workload") or {})
    if workload.trace_path:
        p = Path(workload.trace_path)
        if not p.is_absolute():
            workload = replace(workload, trace_path=str(base / p))

    return ServingSpec(
        model=model,
        architecture=architecture,
        roles=roles,
        runtime=_parse_runtime(data.get("runtime") or {}),
        workload=workload,
        gpu_catalog=catalog,
        default_gpu=default_gpu,
        total_gpus=total_gpus,
        spec_version=int(data["spec_version"]),
    )


def load_spec(path: str | Path) -> ServingSpec:
    path = Path(path)
    return parse_spec(path.read_text(), base_dir=path.parent)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def ceil_ns(value: float) -> int:
    """Round a float duration/size up to an integer, guarding float dust."""
    if value <= 0:
        return 0
    return int(math.ceil(value * (1.0 - 1e-12)))
