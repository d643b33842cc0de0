"""Cost and memory fidelity plane.

Every duration the simulator uses flows through here: operator compute times
(token-count-driven linears, attention, grouped expert GEMMs), point-to-point
transfers, and collectives.  Each compute family can be answered in two modes,
kernel-only (steady-state, CUDA-graph style) and launch-inclusive (eager), with
launch-inclusive >= kernel-only by construction.

The default predictors are closed-form roofline models parameterized by the
model descriptor and GPU rates.  A coefficient file can replace any family with
a fitted linear form; loaded tables must reproduce their bundled golden pairs
exactly or loading fails.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import (
    GIB,
    ConfigError,
    GpuSpec,
    ModelSpec,
    QuantConfig,
    Role,
    RoleConfig,
    RuntimeConfig,
    ceil_div,
    ceil_ns,
)

KERNEL_ONLY = "kernel_only"
LAUNCH_INCLUSIVE = "launch_inclusive"
MODES = (KERNEL_ONLY, LAUNCH_INCLUSIVE)

TOKEN_COUNT = "token_count"
ATTENTION = "attention"
MOE_GROUPED = "moe_grouped"
TRANSFER = "transfer"
COLLECTIVE = "collective"

COMPUTE_FAMILIES = (TOKEN_COUNT, ATTENTION, MOE_GROUPED)
FAMILIES = COMPUTE_FAMILIES + (TRANSFER, COLLECTIVE)

# Feature completeness contract per compute family.
REQUIRED_FEATURES: dict[str, frozenset[str]] = {
    TOKEN_COUNT: frozenset({"num_tokens", "tp_slice"}),
    ATTENTION: frozenset({
        "batch_size", "total_tokens", "sum_q_kv", "sum_kv", "tp_slice",
        "prefill_min", "prefill_max", "prefill_p50", "prefill_p90",
        "decode_min", "decode_max", "decode_p50", "decode_p90",
    }),
    MOE_GROUPED: frozenset({
        "num_tokens", "expert_count", "top_k", "active_experts",
        "count_variance", "count_max", "selection_ratio", "tp_slice",
    }),
}

# Linear-operator tags the analytical token-count predictor understands.
OP_QKV = "qkv_proj"
OP_ATTN_OUT = "attn_out"
OP_MLP = "mlp"
OP_ROUTER = "router"
OP_LM_HEAD = "lm_head"
TOKEN_OPS = (OP_QKV, OP_ATTN_OUT, OP_MLP, OP_ROUTER, OP_LM_HEAD)

ALL_REDUCE = "all_reduce"
ALL_GATHER = "all_gather"
ALL_TO_ALL = "all_to_all"
COLLECTIVE_KINDS = (ALL_REDUCE, ALL_GATHER, ALL_TO_ALL)


class FidelityError(ValueError):
    """Bad cost query or unloadable coefficient table."""


@dataclass(frozen=True)
class CostQuery:
    """One operator timing question: family, mode, op tag, numeric features."""

    family: str
    mode: str = KERNEL_ONLY
    op: str = ""
    features: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise FidelityError(f"unknown cost family {self.family!r}")
        if self.mode not in MODES:
            raise FidelityError(f"unknown mode {self.mode!r}")
        required = REQUIRED_FEATURES.get(self.family)
        if required is not None:
            missing = required - set(self.features)
            if missing:
                raise FidelityError(
                    f"{self.family} query missing features {sorted(missing)}")
        if self.family == TOKEN_COUNT and self.op not in TOKEN_OPS:
            raise FidelityError(f"token_count query needs an op tag from {TOKEN_OPS}")


@dataclass(frozen=True)
class LinkSpec:
    """Point-to-point link: bandwidth (bytes/s) and base latency."""

    bandwidth: float
    latency_ns: int

    def __post_init__(self):
        if self.bandwidth <= 0 or self.latency_ns < 1:
            raise FidelityError("link needs positive bandwidth and >=1ns latency")


def roofline_ns(flops: float, bytes_moved: float, peak_flops: float, bandwidth: float) -> int:
    """max(compute time, memory time), rounded up to whole nanoseconds."""
    if peak_flops <= 0 or bandwidth <= 0:
        raise FidelityError("roofline rates must be positive")
    seconds = max(flops / peak_flops, bytes_moved / bandwidth)
    return ceil_ns(seconds * 1e9)


def transfer_time(num_bytes: int, link: LinkSpec, concurrency: int = 1) -> int:
    """Serialized link model: latency + bytes over the fair-share bandwidth."""
    if num_bytes < 0:
        raise FidelityError("transfer bytes must be >= 0")
    if concurrency < 1:
        raise FidelityError("transfer concurrency must be >= 1")
    return link.latency_ns + ceil_ns(num_bytes * concurrency * 1e9 / link.bandwidth)


def collective_time(kind: str, num_bytes: int, group_size: int, link: LinkSpec) -> int:
    """Cost-model forms for ring/tree collectives over a device group."""
    if kind not in COLLECTIVE_KINDS:
        raise FidelityError(f"unknown collective kind {kind!r}")
    if group_size < 1:
        raise FidelityError("collective group_size must be >= 1")
    if num_bytes < 0:
        raise FidelityError("collective bytes must be >= 0")
    n = group_size
    if n == 1:
        return 0
    alpha = link.latency_ns
    bw_term = num_bytes * 1e9 / link.bandwidth
    log_steps = math.ceil(math.log2(n))
    if kind == ALL_REDUCE:
        return ceil_ns(2.0 * (n - 1) / n * bw_term) + 2 * log_steps * alpha
    if kind == ALL_TO_ALL:
        return ceil_ns((n - 1) / n * bw_term) + (n - 1) * alpha
    return ceil_ns((n - 1) / n * bw_term) + log_steps * alpha  # all_gather


# ---------------------------------------------------------------------------
# Memory model


@dataclass(frozen=True)
class MemoryProfile:
    """Per-rank memory quantities for the worst pipeline stage of a layout."""

    weight_bytes: int
    framework_peak_bytes: int
    workspace_bytes: int

    @property
    def overhead_bytes(self) -> int:
        return self.framework_peak_bytes + self.workspace_bytes


def weight_bytes_per_rank(model: ModelSpec, role: Role, cfg: RoleConfig,
                          quant: QuantConfig = QuantConfig()) -> int:
    """Analytical weight footprint of the worst pipeline stage on one rank.

    Attention weights shard over tp_attn, expert weights over tp_ffn * ep_ffn
    (dense FFN over tp_ffn only; data lanes replicate), embeddings replicate on
    token-path roles.
    """
    cfg = cfg.filled()
    h = model.hidden_dim
    stage_layers = ceil_div(model.layers, cfg.pp)

    per_layer = 0.0
    if role.has_attention_domain:
        q = h * model.num_heads * model.head_dim
        kv = 2 * h * model.num_kv_heads * model.head_dim
        out = model.num_heads * model.head_dim * h
        per_layer += (q + kv + out) / cfg.tp_attn
        per_layer += 2 * h  # norms, replicated
    if role.has_ffn_domain:
        if model.is_moe:
            expert = 3 * h * model.moe_ffn_dim
            per_layer += model.experts * expert / (cfg.tp_ffn * cfg.ep_ffn)
            per_layer += h * model.experts  # router, replicated
        else:
            per_layer += 3 * h * model.ffn_dim / cfg.tp_ffn

    params = per_layer * stage_layers
    if role.has_attention_domain:
        params += 2 * model.vocab_size * h  # embedding + head, replicated
    return int(math.ceil(params * model.dtype_bytes * quant.weight_bytes_scale))


def kv_block_bytes(model: ModelSpec, cfg: RoleConfig, block_tokens: int,
                   quant: QuantConfig = QuantConfig()) -> int:
    """Paged-KV block footprint on one rank: K and V for a stage's layers."""
    cfg = cfg.filled()
    stage_layers = ceil_div(model.layers, cfg.pp)
    kv_heads = max(1, ceil_div(model.num_kv_heads, cfg.tp_attn))
    raw = 2 * stage_layers * kv_heads * model.head_dim * model.dtype_bytes * block_tokens
    return int(math.ceil(raw * quant.kv_bytes_scale))


def kv_block_budget(memory_bytes: int, utilization: float, profile: MemoryProfile,
                    block_bytes: float) -> int:
    """Blocks that fit after weights and overheads, clamped at zero."""
    if block_bytes <= 0:
        raise FidelityError("block_bytes must be positive")
    if not (0.0 < utilization <= 1.0):
        raise FidelityError("utilization must be in (0, 1]")
    usable = memory_bytes * utilization - profile.weight_bytes - profile.overhead_bytes
    if usable <= 0:
        return 0
    # guarded floor: exact ratios survive float dust from fractional block sizes
    return int(math.floor(usable / block_bytes * (1.0 + 1e-12)))


def build_memory_profile(model: ModelSpec, role: Role, cfg: RoleConfig,
                         runtime: RuntimeConfig) -> MemoryProfile:
    """Assemble the per-rank profile from analytical weights plus configured overheads.

    The framework-peak term grows with the token budget (live activations);
    the workspace term stands in for collective buffers and the allocator floor.
    """
    weights = weight_bytes_per_rank(model, role, cfg, runtime.quant)
    activation = runtime.max_batch_tokens * model.hidden_dim * model.dtype_bytes * 4
    return MemoryProfile(
        weight_bytes=weights,
        framework_peak_bytes=runtime.framework_overhead_bytes + activation,
        workspace_bytes=runtime.workspace_overhead_bytes,
    )


# ---------------------------------------------------------------------------
# Predictors


class AnalyticalPredictor:
    """Closed-form roofline answers for one (model, gpu) pair."""

    def __init__(self, model: ModelSpec, gpu: GpuSpec, quant: QuantConfig,
                 launch_overhead_ns: int):
        self.model = model
        self.gpu = gpu
        self.quant = quant
        self.launch_overhead_ns = launch_overhead_ns

    # token-count family -----------------------------------------------------

    def _op_shape(self, op: str, tp: float) -> tuple[float, float]:
        """(flops per token, weight bytes touched) for one layer's op slice."""
        m = self.model
        h = m.hidden_dim
        if op == OP_QKV:
            width = (m.num_heads + 2 * m.num_kv_heads) * m.head_dim
        elif op == OP_ATTN_OUT:
            width = h  # (heads*head_dim) x hidden, counted from the output side
        elif op == OP_MLP:
            width = 3 * m.ffn_dim
        elif op == OP_ROUTER:
            width = max(1, m.experts)
        elif op == OP_LM_HEAD:
            width = m.vocab_size
        else:
            raise FidelityError(f"unknown token op {op!r}")
        flops_per_token = 2.0 * h * width / tp
        weight_bytes = h * width * m.dtype_bytes * self.quant.weight_bytes_scale / tp
        return flops_per_token, weight_bytes

    def token_count_ns(self, query: CostQuery) -> int:
        f = query.features
        tokens = f["num_tokens"]
        tp = max(1.0, f["tp_slice"])
        if tokens <= 0:
            return 1  # kernel-only epsilon; mode overhead added by the caller
        flops_per_token, weight_bytes = self._op_shape(query.op, tp)
        m = self.model
        act = tokens * m.hidden_dim * m.dtype_bytes * 2  # read + write
        base = roofline_ns(tokens * flops_per_token, weight_bytes + act,
                           self.gpu.peak_flops, self.gpu.hbm_bandwidth)
        return max(1, ceil_ns(base * self.quant.duration_scale))

    # attention family --------------------------------------------------------

    def attention_ns(self, query: CostQuery) -> int:
        f = query.features
        if f["total_tokens"] <= 0:
            return 1
        m = self.model
        tp = max(1.0, f["tp_slice"])
        heads = m.num_heads / tp
        kv_heads = max(1.0, m.num_kv_heads / tp)
        # two batched GEMMs (scores, values) over sum of q_i * kv_i
        flops = 4.0 * f["sum_q_kv"] * heads * m.head_dim
        kv_bytes = f["sum_kv"] * kv_heads * m.head_dim * 2 * m.dtype_bytes \
            * self.quant.kv_bytes_scale
        qo_bytes = f["total_tokens"] * heads * m.head_dim * 2 * m.dtype_bytes
        base = roofline_ns(flops, kv_bytes + qo_bytes,
                           self.gpu.peak_flops, self.gpu.hbm_bandwidth)
        return max(1, ceil_ns(base * self.quant.duration_scale))

    # grouped-expert family ----------------------------------------------------

    def moe_grouped_ns(self, query: CostQuery) -> int:
        f = query.features
        return int(self.moe_lane_ns(
            np.asarray([f["num_tokens"]], dtype=np.float64),
            np.asarray([f["active_experts"]], dtype=np.float64),
            f["tp_slice"],
        )[0])

    def moe_lane_ns(self, lane_tokens: np.ndarray, lane_active_experts: np.ndarray,
                    tp_slice: float) -> np.ndarray:
        """Vector form: per-lane grouped-GEMM duration for every expert lane."""
        m = self.model
        tp = max(1.0, tp_slice)
        inter = m.moe_ffn_dim if m.is_moe else m.ffn_dim
        flops = lane_tokens * (2.0 * 3.0 * m.hidden_dim * inter / tp)
        w_bytes = lane_active_experts * (3.0 * m.hidden_dim * inter * m.dtype_bytes
                                         * self.quant.weight_bytes_scale / tp)
        act = lane_tokens * m.hidden_dim * m.dtype_bytes * 2
        secs = np.maximum(flops / self.gpu.peak_flops,
                          (w_bytes + act) / self.gpu.hbm_bandwidth)
        out = np.ceil(secs * 1e9 * self.quant.duration_scale * (1.0 - 1e-12))
        return np.maximum(out.astype(np.int64), 1)

    def predict(self, query: CostQuery) -> int:
        if query.family == TOKEN_COUNT:
            return self.token_count_ns(query)
        if query.family == ATTENTION:
            return self.attention_ns(query)
        if query.family == MOE_GROUPED:
            return self.moe_grouped_ns(query)
        raise FidelityError(f"{query.family} is not a compute family")

    def terms(self, query: CostQuery) -> tuple[float, float]:
        """(compute seconds, memory seconds) sides of the roofline for one query.

        Used to classify operators as compute- or bandwidth-bound; the scales
        match the duration predictions before quantization adjustment.
        """
        f = query.features
        m = self.model
        if query.family == TOKEN_COUNT:
            tokens = f["num_tokens"]
            if tokens <= 0:
                return 0.0, 0.0
            tp = max(1.0, f["tp_slice"])
            flops_per_token, weight_bytes = self._op_shape(query.op, tp)
            act = tokens * m.hidden_dim * m.dtype_bytes * 2
            return (tokens * flops_per_token / self.gpu.peak_flops,
                    (weight_bytes + act) / self.gpu.hbm_bandwidth)
        if query.family == ATTENTION:
            if f["total_tokens"] <= 0:
                return 0.0, 0.0
            tp = max(1.0, f["tp_slice"])
            heads = m.num_heads / tp
            kv_heads = max(1.0, m.num_kv_heads / tp)
            flops = 4.0 * f["sum_q_kv"] * heads * m.head_dim
            kv_bytes = f["sum_kv"] * kv_heads * m.head_dim * 2 * m.dtype_bytes \
                * self.quant.kv_bytes_scale
            qo_bytes = f["total_tokens"] * heads * m.head_dim * 2 * m.dtype_bytes
            return flops / self.gpu.peak_flops, (kv_bytes + qo_bytes) / self.gpu.hbm_bandwidth
        if query.family == MOE_GROUPED:
            tokens = f["num_tokens"]
            tp = max(1.0, f["tp_slice"])
            inter = m.moe_ffn_dim if m.is_moe else m.ffn_dim
            flops = tokens * 2.0 * 3.0 * m.hidden_dim * inter / tp
            w_bytes = f["active_experts"] * (3.0 * m.hidden_dim * inter * m.dtype_bytes
                                             * self.quant.weight_bytes_scale / tp)
            act = tokens * m.hidden_dim * m.dtype_bytes * 2
            return flops / self.gpu.peak_flops, (w_bytes + act) / self.gpu.hbm_bandwidth
        raise FidelityError(f"{query.family} is not a compute family")


@dataclass(frozen=True)
class CoefficientTable:
    """Fitted linear form for one family: intercept + coef . features."""

    family: str
    feature_names: tuple[str, ...]
    intercept_ns: float
    coefficients: tuple[float, ...]
    mode: str = KERNEL_ONLY

    def predict(self, features: dict[str, float]) -> int:
        missing = set(self.feature_names) - set(features)
        if missing:
            raise FidelityError(f"{self.family} table query missing {sorted(missing)}")
        total = self.intercept_ns
        for name, coef in zip(self.feature_names, self.coefficients):
            total += coef * features[name]
        return max(1, ceil_ns(total))


def load_coefficient_tables(path: str | Path) -> dict[str, CoefficientTable]:
    """Load fitted tables and verify each family's golden pairs exactly."""
    raw = json.loads(Path(path).read_text())
    families = raw.get("families")
    if not isinstance(families, dict):
        raise FidelityError(f"{path}: expected top-level 'families' mapping")
    tables: dict[str, CoefficientTable] = {}
    for family, entry in families.items():
        if family not in COMPUTE_FAMILIES:
            raise FidelityError(f"{path}: {family!r} is not a compute family")
        names = tuple(str(n) for n in entry["features"])
        coefs = tuple(float(c) for c in entry["coefficients"])
        if len(names) != len(coefs):
            raise FidelityError(f"{path}: {family}: features/coefficients length mismatch")
        table = CoefficientTable(
            family=family,
            feature_names=names,
            intercept_ns=float(entry.get("intercept_ns", 0.0)),
            coefficients=coefs,
            mode=str(entry.get("mode", KERNEL_ONLY)),
        )
        golden = entry.get("golden", [])
        if not golden:
            raise FidelityError(f"{path}: {family}: coefficient table has no golden pairs")
        for pair in golden:
            feats = {str(k): float(v) for k, v in pair["features"].items()}
            got = table.predict(feats)
            want = int(pair["duration_ns"])
            if got != want:
                raise FidelityError(
                    f"{path}: {family}: golden pair mismatch (got {got}ns, want {want}ns)")
        tables[family] = table
    return tables


class PredictorSet:
    """Per-family operator predictors for one (model, gpu) pair.

    Kernel-only answers come from the family predictor; launch-inclusive adds
    the constant launch overhead, so mode ordering holds for every query.
    """

    def __init__(self, analytical: AnalyticalPredictor,
                 tables: dict[str, CoefficientTable] | None = None):
        self.analytical = analytical
        self.tables = tables or {}
        self.launch_overhead_ns = analytical.launch_overhead_ns

    def predict(self, query: CostQuery) -> int:
        if query.family not in COMPUTE_FAMILIES:
            raise FidelityError(f"predict_operator only answers compute families, "
                                f"got {query.family!r}")
        table = self.tables.get(query.family)
        base = table.predict(query.features) if table is not None \
            else self.analytical.predict(query)
        if query.mode == LAUNCH_INCLUSIVE:
            return base + self.launch_overhead_ns
        return base

    def moe_lane_ns(self, lane_tokens: np.ndarray, lane_active: np.ndarray,
                    tp_slice: float, mode: str) -> np.ndarray:
        table = self.tables.get(MOE_GROUPED)
        if table is None:
            out = self.analytical.moe_lane_ns(lane_tokens, lane_active, tp_slice)
        else:
            out = np.asarray([
                table.predict({
                    "num_tokens": float(t), "active_experts": float(a),
                    "tp_slice": float(tp_slice),
                }) for t, a in zip(lane_tokens, lane_active)
            ], dtype=np.int64)
        if mode == LAUNCH_INCLUSIVE:
            out = out + self.launch_overhead_ns
        return out


def predict_operator(query: CostQuery, predictors: PredictorSet) -> int:
    """Answer one compute-family cost query in nanoseconds."""
    return predictors.predict(query)


class FidelityPlane:
    """All fidelity state for one scenario: per-role predictors, links, memory."""

    def __init__(self, model: ModelSpec, runtime: RuntimeConfig,
                 tables: dict[str, CoefficientTable] | None = None):
        self.model = model
        self.runtime = runtime
        self.tables = tables or {}
        self._sets: dict[str, PredictorSet] = {}

    def predictors_for(self, gpu: GpuSpec) -> PredictorSet:
        ps = self._sets.get(gpu.name)
        if ps is None:
            ps = PredictorSet(
                AnalyticalPredictor(self.model, gpu, self.runtime.quant,
                                    self.runtime.launch_overhead_ns),
                self.tables,
            )
            self._sets[gpu.name] = ps
        return ps

    def link_for(self, gpu: GpuSpec) -> LinkSpec:
        return LinkSpec(bandwidth=gpu.link_bandwidth, latency_ns=gpu.link_latency_ns)

    def memory_profile(self, role: Role, cfg: RoleConfig, gpu: GpuSpec) -> MemoryProfile:
        return build_memory_profile(self.model, role, cfg, self.runtime)

    def block_bytes(self, cfg: RoleConfig) -> int:
        return kv_block_bytes(self.model, cfg, self.runtime.block_tokens,
                              self.runtime.quant)

    def block_budget(self, role: Role, cfg: RoleConfig, gpu: GpuSpec) -> int:
        profile = self.memory_profile(role, cfg, gpu)
        return kv_block_budget(gpu.memory_bytes, self.runtime.gpu_memory_utilization,
                               profile, self.block_bytes(cfg))
