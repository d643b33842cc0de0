"""Batch cost assembly: turns one scheduled batch into device time.

Per transformer layer the iteration runs attention-domain linears and
attention, then the FFN block (dense or routed experts with dispatch and
combine collectives).  Stage time scales by the layers mapped to the
bottleneck pipeline stage; the batch is split into pp microbatches and
the wavefront finishes after (pp + m - 1) stage slots plus the language
model head on the final stage.

Every operator duration also feeds a compute-vs-bandwidth tally so a run
can report how compute-bound each role was.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import CaptureBinLadder, DecodeLaunch
from .config import ModelSpec, RoleConfig, RuntimeConfig
from .fidelity import (
    ALL_REDUCE,
    ALL_TO_ALL,
    ATTENTION,
    KERNEL_ONLY,
    LAUNCH_INCLUSIVE,
    MOE_GROUPED,
    OP_ATTN_OUT,
    OP_LM_HEAD,
    OP_MLP,
    OP_QKV,
    OP_ROUTER,
    TOKEN_COUNT,
    CostQuery,
    LinkSpec,
    PredictorSet,
    collective_time,
)
from .metrics import percentile
from .scheduling import BatchEntry, BatchPlan

ROUTING_BALANCED = "balanced"
ROUTING_SKEW = "skew"
ROUTING_MODES = (ROUTING_BALANCED, ROUTING_SKEW)


class CostingError(ValueError):
    pass


def pipeline_makespan(stage_ns: int, pp: int, microbatches: int | None = None) -> int:
    """Wavefront completion time for one batch over pp stages.

    `stage_ns` is the per-microbatch stage occupancy; the last of m
    microbatches leaves the last of pp stages after pp + m - 1 slots.
    """
    m = microbatches or pp
    if pp < 1 or m < 1:
        raise CostingError("pipeline needs pp >= 1 and microbatches >= 1")
    return stage_ns * (pp + m - 1)


def stage_end_offsets(stage_ns: int, pp: int, microbatches: int | None = None) -> tuple[int, ...]:
    """Offset at which each stage finishes its last microbatch."""
    m = microbatches or pp
    return tuple(stage_ns * (s + m) for s in range(pp))


def lane_boundaries(experts: int, ep: int) -> np.ndarray:
    """Contiguous expert-to-lane partition offsets (len ep + 1)."""
    if not 1 <= ep <= experts:
        raise CostingError(f"ep {ep} outside [1, {experts}]")
    base, rem = divmod(experts, ep)
    sizes = np.full(ep, base, dtype=np.int64)
    sizes[:rem] += 1
    return np.concatenate(([0], np.cumsum(sizes)))


def route_tokens_moe(tokens: int, experts: int, top_k: int, mode: str,
                     seed: int, layers: int = 1) -> np.ndarray:
    """Token-to-expert assignment counts, one row per layer.

    Balanced spreads tokens*top_k evenly (counts differ by at most one);
    skew draws a seeded multinomial with Zipf-like expert popularity.
    Row sums always equal tokens * top_k.
    """
    if mode not in ROUTING_MODES:
        raise CostingError(f"unknown routing mode {mode!r}")
    if top_k < 1 or experts < top_k:
        raise CostingError(f"need experts >= top_k >= 1, got {experts}, {top_k}")
    routed = tokens * top_k
    if mode == ROUTING_BALANCED:
        base, rem = divmod(routed, experts)
        row = np.full(experts, base, dtype=np.int64)
        row[:rem] += 1
        return np.tile(row, (layers, 1))
    rng = np.random.default_rng(seed)
    probs = 1.0 / np.arange(1, experts + 1, dtype=np.float64)
    probs /= probs.sum()
    counts = rng.multinomial(routed, probs, size=layers).astype(np.int64)
    # deterministic per-layer shuffle so the hot expert moves across lanes
    for i in range(layers):
        rng.shuffle(counts[i])
    return counts


@dataclass
class BoundTally:
    """Accumulates which fraction of op time sat on the compute roofline."""

    compute_bound_ns: int = 0
    total_ns: int = 0

    def add(self, duration_ns: int, compute_s: float, memory_s: float) -> None:
        self.total_ns += duration_ns
        if compute_s >= memory_s:
            self.compute_bound_ns += duration_ns

    def add_comm(self, duration_ns: int) -> None:
        self.total_ns += duration_ns

    @property
    def share(self) -> float:
        return self.compute_bound_ns / self.total_ns if self.total_ns else 0.0

    def merge(self, other: "BoundTally") -> None:
        self.compute_bound_ns += other.compute_bound_ns
        self.total_ns += other.total_ns


@dataclass(frozen=True)
class CostContext:
    """Everything needed to price work on one replica of one role."""

    model: ModelSpec
    runtime: RuntimeConfig
    cfg: RoleConfig
    predictors: PredictorSet
    link: LinkSpec
    stage_layers: int         # layers on the bottleneck pipeline stage
    total_layers: int

    @property
    def pp(self) -> int:
        return self.cfg.pp


def _scaled(features: dict, scale: float) -> dict:
    if scale == 1.0:
        return features
    out = dict(features)
    for key in ("batch_size", "total_tokens", "sum_q_kv", "sum_kv"):
        out[key] = features[key] * scale
    return out


def attention_features(entries: list[BatchEntry], padded_slots: int, width: int,
                       dp_attn: int, tp_attn: int) -> dict:
    """Feature vector for one batch's attention, padding included.

    Each entry contributes q new positions against a causally growing
    window: sum over i of (context + i).  Padded slots behave like fresh
    width-token requests with no history and are excluded from the
    per-phase context statistics.
    """
    batch = len(entries) + padded_slots
    total = sum(e.tokens for e in entries) + padded_slots * width
    sum_q_kv = padded_slots * (width * (width + 1) // 2)
    sum_kv = padded_slots * width
    prefill_ctx: list[int] = []
    decode_ctx: list[int] = []
    for e in entries:
        q = e.tokens
        kv_end = e.context_before + q
        sum_q_kv += q * e.context_before + q * (q + 1) // 2
        sum_kv += kv_end
        (prefill_ctx if e.is_prefill else decode_ctx).append(kv_end)

    def stats(vals: list[int], tag: str) -> dict:
        if not vals:
            return {f"{tag}_min": 0.0, f"{tag}_max": 0.0,
                    f"{tag}_p50": 0.0, f"{tag}_p90": 0.0}
        return {f"{tag}_min": float(min(vals)), f"{tag}_max": float(max(vals)),
                f"{tag}_p50": float(percentile(vals, 50)),
                f"{tag}_p90": float(percentile(vals, 90))}

    shard = 1.0 / max(1, dp_attn)
    feats = {
        "batch_size": batch * shard,
        "total_tokens": total * shard,
        "sum_q_kv": sum_q_kv * shard,
        "sum_kv": sum_kv * shard,
        "tp_slice": float(tp_attn),
    }
    feats.update(stats(prefill_ctx, "prefill"))
    feats.update(stats(decode_ctx, "decode"))
    return feats


def _token_query(op: str, tokens: float, tp: int, mode: str) -> CostQuery:
    return CostQuery(TOKEN_COUNT, mode, op,
                     {"num_tokens": tokens, "tp_slice": float(tp)})


def _predict(ctx: CostContext, query: CostQuery, tally: BoundTally | None) -> int:
    ns = ctx.predictors.predict(query)
    if tally is not None:
        c, m = ctx.predictors.analytical.terms(query)
        tally.add(ns, c, m)
    return ns


def _collective(ctx: CostContext, kind: str, num_bytes: float, group: int,
                mode: str, tally: BoundTally | None) -> int:
    if group <= 1:
        return 0
    ns = collective_time(kind, int(num_bytes), group, ctx.link)
    if mode == LAUNCH_INCLUSIVE:
        ns += ctx.predictors.launch_overhead_ns
    if tally is not None:
        tally.add_comm(ns)
    return ns


def attention_block_ns(ctx: CostContext, feats: dict, mode: str,
                       tally: BoundTally | None = None) -> int:
    """One layer of attention-domain work: projections, attention, merge."""
    cfg = ctx.cfg
    tokens = feats["total_tokens"]
    ns = _predict(ctx, _token_query(OP_QKV, tokens, cfg.tp_attn, mode), tally)
    ns += _predict(ctx, CostQuery(ATTENTION, mode, features=feats), tally)
    ns += _predict(ctx, _token_query(OP_ATTN_OUT, tokens, cfg.tp_attn, mode), tally)
    hidden_bytes = tokens * ctx.model.hidden_dim * ctx.model.dtype_bytes
    ns += _collective(ctx, ALL_REDUCE, hidden_bytes, cfg.tp_attn, mode, tally)
    return ns


def _moe_terms(ctx: CostContext, lane_tokens: np.ndarray,
               lane_active: np.ndarray) -> tuple[float, float]:
    mean_tokens = float(lane_tokens.mean()) if lane_tokens.size else 0.0
    mean_active = float(lane_active.mean()) if lane_active.size else 0.0
    q = CostQuery(MOE_GROUPED, KERNEL_ONLY, features={
        "num_tokens": mean_tokens, "expert_count": 0.0, "top_k": 0.0,
        "active_experts": mean_active, "count_variance": 0.0,
        "count_max": 0.0, "selection_ratio": 0.0,
        "tp_slice": float(ctx.cfg.tp_ffn),
    })
    return ctx.predictors.analytical.terms(q)


def ffn_phase_times(ctx: CostContext, tokens: float, counts: np.ndarray | None,
                    mode: str, tally: BoundTally | None = None
                    ) -> tuple[int, np.ndarray, int]:
    """FFN block split into (pre, per-lane, post) durations.

    pre covers routing and the dispatch collective; the array holds each
    expert lane's grouped-GEMM time (a single entry for dense models);
    post covers the combine collective and the tensor-parallel merge.
    The caller owns the barrier rule joining the lanes.
    """
    cfg = ctx.cfg
    model = ctx.model
    if counts is None:
        share = tokens / max(1, cfg.ep_ffn)
        mlp = _predict(ctx, _token_query(OP_MLP, share, cfg.tp_ffn, mode), tally)
        hidden_bytes = share * model.hidden_dim * model.dtype_bytes
        post = _collective(ctx, ALL_REDUCE, hidden_bytes, cfg.tp_ffn, mode, tally)
        return 0, np.asarray([mlp], dtype=np.int64), post

    ep = cfg.ep_ffn
    pre = _predict(ctx, _token_query(OP_ROUTER, tokens, 1, mode), tally)
    routed = int(counts.sum())
    lane_bytes = routed / max(1, ep) * model.hidden_dim * model.dtype_bytes
    pre += _collective(ctx, ALL_TO_ALL, lane_bytes, ep, mode, tally)

    bounds = lane_boundaries(model.experts, ep)
    lane_tokens = np.add.reduceat(counts, bounds[:-1]).astype(np.float64)
    nonzero = (counts > 0).astype(np.int64)
    lane_active = np.add.reduceat(nonzero, bounds[:-1]).astype(np.float64)
    lane_ns = ctx.predictors.moe_lane_ns(lane_tokens, lane_active,
                                         float(cfg.tp_ffn), mode)
    if tally is not None:
        c, m = _moe_terms(ctx, lane_tokens, lane_active)
        tally.add(int(lane_ns.max()), c, m)

    post = _collective(ctx, ALL_TO_ALL, lane_bytes, ep, mode, tally)
    hidden_bytes = tokens / max(1, ep) * model.hidden_dim * model.dtype_bytes
    post += _collective(ctx, ALL_REDUCE, hidden_bytes, cfg.tp_ffn, mode, tally)
    return pre, lane_ns, post


def ffn_block_ns(ctx: CostContext, tokens: float, counts: np.ndarray | None,
                 mode: str, tally: BoundTally | None = None,
                 delta_ep_ns: int = 0) -> int:
    """One layer of FFN work: dense MLP or routed expert block.

    `counts` is the per-expert token assignment for this layer (None for
    dense models).  The expert block is dispatch, slowest expert lane,
    combine slack, combine, then the tensor-parallel merge.
    """
    pre, lane_ns, post = ffn_phase_times(ctx, tokens, counts, mode, tally)
    ns = pre + int(lane_ns.max()) + post
    if counts is not None and ctx.cfg.ep_ffn > 1:
        ns += delta_ep_ns
        if tally is not None and delta_ep_ns:
            tally.add_comm(delta_ep_ns)
    return ns


def lm_head_ns(ctx: CostContext, lm_tokens: float, mode: str,
               tally: BoundTally | None = None) -> int:
    if lm_tokens <= 0:
        return 0
    share = lm_tokens / max(1, ctx.cfg.dp_attn)
    return _predict(ctx, _token_query(OP_LM_HEAD, share, ctx.cfg.tp_attn, mode), tally)


@dataclass(frozen=True)
class BatchTiming:
    """Device-time shape of one scheduled iteration on one replica."""

    makespan_ns: int
    stage_ns: int                 # per-microbatch bottleneck stage time
    stage_ends: tuple[int, ...]   # per-stage completion offsets, head included
    mode: str
    launch: DecodeLaunch | None
    padded_tokens: int
    useful_tokens: int
    lm_tokens: int
    compute_bound_ns: int
    total_op_ns: int


def batch_launch(plan: BatchPlan, ladder: CaptureBinLadder) -> DecodeLaunch | None:
    """Decode-graph launch decision for the batch, if it is pure decode."""
    if plan.size == 0 or not plan.pure_decode:
        return None
    widths = {e.tokens for e in plan.entries}
    if len(widths) != 1:
        return None
    return ladder.decode_launch(plan.size, True)


def _lm_head_tokens(plan: BatchPlan, width: int, padded_slots: int) -> int:
    lm = padded_slots * width
    for e in plan.entries:
        if e.is_prefill:
            if e.state.prefilled + e.tokens >= e.state.prompt:
                lm += 1  # sampling the first output token
        else:
            lm += e.tokens
    return lm


def cost_batch(ctx: CostContext, plan: BatchPlan, ladder: CaptureBinLadder,
               routing_seed: int, moe_routing: str = ROUTING_BALANCED,
               tally: BoundTally | None = None) -> BatchTiming:
    """Price one colocated or PDD iteration end to end.

    The batch is split into pp microbatches by uniform feature scaling;
    the bottleneck stage is priced once and the wavefront rule gives the
    makespan, with the LM head as a serial tail on the last stage.
    """
    if plan.size == 0:
        raise CostingError("cannot cost an empty batch")
    cfg = ctx.cfg
    launch = batch_launch(plan, ladder)
    width = plan.entries[0].tokens if launch is not None else 1
    padded_slots = launch.padded_slots if launch is not None else 0
    mode = launch.mode if launch is not None else LAUNCH_INCLUSIVE

    useful = plan.total_tokens
    padded_tokens = padded_slots * width
    total_tokens = useful + padded_tokens

    feats = attention_features(plan.entries, padded_slots, width,
                               cfg.dp_attn, cfg.tp_attn)
    m = ctx.pp  # microbatches per wavefront
    mb_feats = _scaled(feats, 1.0 / m)

    layer_ns = attention_block_ns(ctx, mb_feats, mode, tally)
    mb_tokens = total_tokens / m  # the FFN domain re-shards the full stream
    if ctx.model.is_moe:
        counts = route_tokens_moe(total_tokens, ctx.model.experts,
                                  ctx.model.top_k, moe_routing, routing_seed,
                                  layers=1)[0]
        mb_counts = (counts + m - 1) // m if m > 1 else counts
        layer_ns += ffn_block_ns(ctx, mb_tokens, mb_counts, mode, tally,
                                 ctx.runtime.delta_ep_ns)
    else:
        layer_ns += ffn_block_ns(ctx, mb_tokens, None, mode, tally)

    stage_ns = layer_ns * ctx.stage_layers
    ends = list(stage_end_offsets(stage_ns, ctx.pp, m))
    lm_tokens = _lm_head_tokens(plan, width, padded_slots)
    tail = lm_head_ns(ctx, float(lm_tokens), mode, tally)
    ends[-1] += tail
    return BatchTiming(
        makespan_ns=ends[-1],
        stage_ns=stage_ns,
        stage_ends=tuple(ends),
        mode=mode,
        launch=launch,
        padded_tokens=padded_tokens,
        useful_tokens=useful,
        lm_tokens=lm_tokens,
        compute_bound_ns=tally.compute_bound_ns if tally else 0,
        total_op_ns=tally.total_ns if tally else 0,
    )


# --- attention/FFN split costing ----------------------------------------------


def split_microbatches(entries: list[BatchEntry], m: int) -> list[list[BatchEntry]]:
    """Contiguous near-even split of batch entries into m microbatches."""
    if m <= 1:
        return [list(entries)]
    n = len(entries)
    base, rem = divmod(n, m)
    out, at = [], 0
    for j in range(m):
        size = base + (1 if j < rem else 0)
        out.append(list(entries[at:at + size]))
        at += size
    return [mb for mb in out if mb]


def microbatch_attention_ns(ctx: CostContext, mb: list[BatchEntry], width: int,
                            padded_slots: int, mode: str,
                            tally: BoundTally | None = None) -> int:
    """Per-layer attention-side cost of one microbatch on the A role."""
    feats = attention_features(mb, padded_slots, width,
                               ctx.cfg.dp_attn, ctx.cfg.tp_attn)
    return attention_block_ns(ctx, feats, mode, tally)


def activation_bytes(model: ModelSpec, tokens: int) -> int:
    """Hidden-state payload handed between attention and FFN clusters."""
    return tokens * model.hidden_dim * model.dtype_bytes
