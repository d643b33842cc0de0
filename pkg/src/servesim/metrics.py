"""Request lifecycle records, summary metrics, Pareto filtering, and
allocation scoring.

Recording happens inside the simulation as flat per-cluster fact tuples
(one append per lifecycle edge, no cross-cluster mutation).  After the
run ends the buffers are folded single-threaded into per-round records,
grouped into sessions, and reduced to a SummaryReport.  Percentiles are
nearest-rank so repeated runs produce byte-identical numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import GpuSpec, SECOND

# Fact kinds appended by the orchestration layer.  A fact is the tuple
# (kind, ts, rid, session, round_idx, value).
F_ARRIVAL = "arrival"          # value = (input_len, output_len, prompt_tokens)
F_ENQUEUE = "enqueue"          # value = replica id
F_ADMIT = "admit"              # value = replica id
F_PREFILL_END = "prefill_end"  # value = cached (prefix hit) tokens
F_COMMIT = "commit"            # value = tokens committed this step
F_TRANSFER_START = "transfer_start"  # value = bytes
F_TRANSFER_END = "transfer_end"      # value = bytes
F_PREEMPT = "preempt"          # value = progress tokens retained
F_FINISH = "finish"            # value = committed decode tokens total
F_MTP = "mtp"                  # value = (planned, verified, accepted, committed)
F_PREFIX = "prefix"            # value = (hit_blocks, lookup_blocks)

ROI_THRESHOLD = 1.08


class MetricsError(Exception):
    pass


class IncompleteLifecycleError(MetricsError):
    """A request never reached a terminal state."""


def nearest_rank_index(q: float, n: int) -> int:
    """Index of the q-th percentile in a sorted sample of size n."""
    if n <= 0:
        raise MetricsError("percentile of empty sample")
    if not 0 <= q <= 100:
        raise MetricsError(f"percentile out of range: {q}")
    if q == 0:
        return 0
    return max(0, math.ceil(q / 100.0 * n) - 1)


def percentile(values, q: float):
    """Exact empirical quantile: returns an element of `values`."""
    data = sorted(values)
    return data[nearest_rank_index(q, len(data))]


@dataclass
class RoundRecord:
    """One scheduling round of a session (a single request lifecycle)."""

    rid: int
    session: int
    round_idx: int
    input_len: int = 0
    output_len: int = 0
    prompt_tokens: int = 0
    arrival_ns: int | None = None
    enqueue_ns: int | None = None
    admit_ns: int | None = None
    prefill_end_ns: int | None = None
    finish_ns: int | None = None
    committed: int = 0
    cached_tokens: int = 0
    preemptions: int = 0
    transfer_starts: list = field(default_factory=list)
    transfer_ends: list = field(default_factory=list)
    commit_times: list | None = None
    prefix_hit_blocks: int = 0
    prefix_lookup_blocks: int = 0
    mtp_counters: tuple | None = None

    @property
    def ttft_ns(self) -> int:
        return self.prefill_end_ns - self.arrival_ns

    @property
    def e2e_ns(self) -> int:
        return self.finish_ns - self.arrival_ns

    @property
    def tpot_ns(self) -> float | None:
        if self.committed < 2:
            return None
        return (self.finish_ns - self.prefill_end_ns) / (self.committed - 1)

    def validate(self) -> None:
        if self.finish_ns is None:
            raise IncompleteLifecycleError(f"request {self.rid} not terminal")
        stamps = [self.arrival_ns, self.enqueue_ns, self.admit_ns,
                  self.prefill_end_ns, self.finish_ns]
        if any(s is None for s in stamps):
            raise IncompleteLifecycleError(
                f"request {self.rid} missing lifecycle stamps: {stamps}")
        for a, b in zip(stamps, stamps[1:]):
            if b < a:
                raise MetricsError(
                    f"request {self.rid} lifecycle not monotone: {stamps}")
        for s, e in zip(self.transfer_starts, self.transfer_ends):
            if not (self.prefill_end_ns <= s <= e):
                raise MetricsError(
                    f"request {self.rid} transfer outside lifecycle")

    def as_tuple(self) -> tuple:
        """Canonical form used by determinism comparisons."""
        return (self.rid, self.session, self.round_idx, self.input_len,
                self.output_len, self.prompt_tokens, self.arrival_ns,
                self.enqueue_ns, self.admit_ns, self.prefill_end_ns,
                self.finish_ns, self.committed, self.cached_tokens,
                self.preemptions, tuple(self.transfer_starts),
                tuple(self.transfer_ends), self.prefix_hit_blocks,
                self.prefix_lookup_blocks, self.mtp_counters)


def fold_facts(buffers, *, keep_commit_times: bool = False) -> dict[int, RoundRecord]:
    """Merge per-cluster fact buffers into per-request records.

    Folding is order-insensitive for scalar stamps (each is written by
    exactly one fact kind) and sorts interval lists afterwards, so the
    result does not depend on buffer interleaving across clusters.
    """
    records: dict[int, RoundRecord] = {}

    def rec(rid, session, round_idx) -> RoundRecord:
        r = records.get(rid)
        if r is None:
            r = records[rid] = RoundRecord(rid=rid, session=session,
                                           round_idx=round_idx)
            if keep_commit_times:
                r.commit_times = []
        return r

    for buf in buffers:
        for kind, ts, rid, session, round_idx, value in buf:
            r = rec(rid, session, round_idx)
            if kind == F_ARRIVAL:
                r.arrival_ns = ts
                r.input_len, r.output_len, r.prompt_tokens = value
            elif kind == F_ENQUEUE:
                if r.enqueue_ns is None or ts < r.enqueue_ns:
                    r.enqueue_ns = ts
            elif kind == F_ADMIT:
                if r.admit_ns is None or ts < r.admit_ns:
                    r.admit_ns = ts
            elif kind == F_PREFILL_END:
                # a preempted request re-prefills later, but the client saw
                # its first token stream out at the original prefill end
                if r.prefill_end_ns is None or ts < r.prefill_end_ns:
                    r.prefill_end_ns = ts
                    r.cached_tokens = value
            elif kind == F_COMMIT:
                if r.commit_times is not None:
                    r.commit_times.append((ts, value))
            elif kind == F_TRANSFER_START:
                r.transfer_starts.append(ts)
            elif kind == F_TRANSFER_END:
                r.transfer_ends.append(ts)
            elif kind == F_PREEMPT:
                r.preemptions += 1
            elif kind == F_FINISH:
                r.finish_ns = ts
                r.committed = value
            elif kind == F_MTP:
                r.mtp_counters = value
            elif kind == F_PREFIX:
                r.prefix_hit_blocks += value[0]
                r.prefix_lookup_blocks += value[1]
            else:
                raise MetricsError(f"unknown fact kind: {kind!r}")

    for r in records.values():
        r.transfer_starts.sort()
        r.transfer_ends.sort()
        if r.commit_times is not None:
            r.commit_times.sort()
    return records


def group_sessions(records: dict[int, RoundRecord]) -> dict[int, list[RoundRecord]]:
    sessions: dict[int, list[RoundRecord]] = {}
    for r in records.values():
        sessions.setdefault(r.session, []).append(r)
    for rounds in sessions.values():
        rounds.sort(key=lambda r: r.round_idx)
    return dict(sorted(sessions.items()))


@dataclass
class SummaryReport:
    num_rounds: int
    num_sessions: int
    makespan_ns: int
    total_committed: int
    throughput_tok_s: float
    hidden_planning_tok_s: float
    latency_percentiles: dict      # metric name -> {q: value_ns}
    padded_tokens: int
    useful_tokens: int
    padding_inflation: float
    prefix_hit_blocks: int
    prefix_lookup_blocks: int
    prefix_hit_ratio: float
    kv_timelines: dict             # cluster name -> [(ts, free, total)]
    preemptions: int
    compute_bound_share: dict      # role tag -> share of op time

    def percentile_ms(self, metric: str, q: float) -> float:
        return self.latency_percentiles[metric][q] / 1e6


def _collect(records, attr):
    vals = []
    for r in records:
        v = getattr(r, attr)
        if v is not None:
            vals.append(v)
    return vals


def finalize(records: dict[int, RoundRecord], *, padded_tokens: int = 0,
             useful_tokens: int = 0, kv_timelines: dict | None = None,
             compute_bound_share: dict | None = None,
             quantiles=(50, 95)) -> SummaryReport:
    """Reduce folded records to a SummaryReport.

    Raises IncompleteLifecycleError when any request is non-terminal,
    MetricsError when a record violates lifecycle monotonicity.
    """
    if not records:
        raise MetricsError("no records to finalize")
    rounds = sorted(records.values(), key=lambda r: r.rid)
    for r in rounds:
        r.validate()

    sessions = group_sessions(records)
    first_arrival = min(r.arrival_ns for r in rounds)
    last_finish = max(r.finish_ns for r in rounds)
    makespan_ns = max(1, last_finish - first_arrival)

    total_committed = sum(r.committed for r in rounds)
    hidden = 0
    attft = []
    for chain in sessions.values():
        final = chain[-1]
        hidden += sum(r.committed for r in chain[:-1])
        attft.append(final.prefill_end_ns - chain[0].arrival_ns)

    pct: dict[str, dict[float, float]] = {}
    series = {
        "ttft": _collect(rounds, "ttft_ns"),
        "tpot": _collect(rounds, "tpot_ns"),
        "e2e": _collect(rounds, "e2e_ns"),
        "attft": attft,
    }
    for name, vals in series.items():
        pct[name] = {q: percentile(vals, q) for q in quantiles} if vals else {}

    span_s = makespan_ns / SECOND
    inflation = ((padded_tokens - useful_tokens) / useful_tokens
                 if useful_tokens else 0.0)
    hit_blocks = sum(r.prefix_hit_blocks for r in rounds)
    lookup_blocks = sum(r.prefix_lookup_blocks for r in rounds)

    if kv_timelines:
        for name, samples in kv_timelines.items():
            for ts, free, total in samples:
                if not 0 <= free <= total:
                    raise MetricsError(
                        f"kv timeline {name} out of range at {ts}: "
                        f"{free}/{total}")

    return SummaryReport(
        num_rounds=len(rounds),
        num_sessions=len(sessions),
        makespan_ns=makespan_ns,
        total_committed=total_committed,
        throughput_tok_s=total_committed / span_s,
        hidden_planning_tok_s=hidden / span_s,
        latency_percentiles=pct,
        padded_tokens=padded_tokens,
        useful_tokens=useful_tokens,
        padding_inflation=inflation,
        prefix_hit_blocks=hit_blocks,
        prefix_lookup_blocks=lookup_blocks,
        prefix_hit_ratio=(hit_blocks / lookup_blocks) if lookup_blocks else 0.0,
        kv_timelines=dict(kv_timelines or {}),
        preemptions=sum(r.preemptions for r in rounds),
        compute_bound_share=dict(compute_bound_share or {}),
    )


def token_conservation(records: dict[int, RoundRecord]) -> tuple[int, int]:
    """(committed total, requested total) over terminal records."""
    committed = sum(r.committed for r in records.values())
    requested = sum(r.output_len for r in records.values())
    return committed, requested


@dataclass(frozen=True)
class SlaThresholds:
    max_p95_ttft_ms: float | None = None
    max_p95_tpot_ms: float | None = None

    def admits(self, p95_ttft_ms: float, p95_tpot_ms: float) -> bool:
        if self.max_p95_ttft_ms is not None and p95_ttft_ms > self.max_p95_ttft_ms:
            return False
        if self.max_p95_tpot_ms is not None and p95_tpot_ms > self.max_p95_tpot_ms:
            return False
        return True


@dataclass(frozen=True)
class CandidatePoint:
    """One sweep candidate on the speed/throughput plane."""

    name: str
    architecture: str
    generation_speed: float      # tokens/s per user, 1000 / p95 TPOT ms
    throughput: float            # system tokens/s
    p95_ttft_ms: float
    p95_tpot_ms: float
    meta: tuple = ()


def _dominates(a: CandidatePoint, b: CandidatePoint) -> bool:
    ge = a.generation_speed >= b.generation_speed and a.throughput >= b.throughput
    gt = a.generation_speed > b.generation_speed or a.throughput > b.throughput
    return ge and gt


def pareto_filter(points, sla: SlaThresholds | None = None):
    """Drop SLA violators, then keep the non-dominated set.

    Returns (frontier sorted by generation speed descending, best point
    per architecture by throughput).  Raises on empty input.
    """
    points = list(points)
    if not points:
        raise MetricsError("pareto_filter on empty input")
    if sla is not None:
        points = [p for p in points
                  if sla.admits(p.p95_ttft_ms, p.p95_tpot_ms)]
    frontier = [p for p in points
                if not any(_dominates(q, p) for q in points if q is not p)]
    frontier.sort(key=lambda p: (-p.generation_speed, -p.throughput, p.name))
    best: dict[str, CandidatePoint] = {}
    for p in frontier:
        cur = best.get(p.architecture)
        if cur is None or (p.throughput, p.generation_speed) > (
                cur.throughput, cur.generation_speed):
            best[p.architecture] = p
    return frontier, best


COMPUTE_BOUND = "compute"
MEMORY_BOUND = "memory"


@dataclass(frozen=True)
class AllocationScore:
    price_per_hour: float
    baseline_price_per_hour: float
    spend_ratio: float
    cost_efficiency: float
    alignment_ok: bool
    sla_ok: bool
    roi_ok: bool

    @property
    def accepted(self) -> bool:
        return self.alignment_ok and self.sla_ok and self.roi_ok


def allocation_price(allocation: dict[str, tuple[int, GpuSpec]]) -> float:
    return sum(count * gpu.price_per_hour for count, gpu in allocation.values())


def score_allocation(allocation: dict[str, tuple[int, GpuSpec]],
                     baseline: dict[str, tuple[int, GpuSpec]],
                     throughput: float, baseline_throughput: float, *,
                     sla_ok: bool = True,
                     bottlenecks: dict[str, str] | None = None,
                     roi_threshold: float = ROI_THRESHOLD) -> AllocationScore:
    """Price an allocation against the homogeneous baseline.

    Gate 1 rejects any compute-bound role placed on a GPU cheaper than
    its baseline type; gate 2 is the caller's SLA verdict; gate 3
    requires cost efficiency above `roi_threshold`.
    """
    if set(allocation) != set(baseline):
        raise MetricsError(
            f"allocation roles {sorted(allocation)} != baseline {sorted(baseline)}")
    price = allocation_price(allocation)
    price0 = allocation_price(baseline)
    if price <= 0 or price0 <= 0:
        raise MetricsError("non-positive allocation price")
    sr = price0 / price
    ce = (throughput / price) / (baseline_throughput / price0)

    alignment_ok = True
    for role, (_, gpu) in allocation.items():
        _, base_gpu = baseline[role]
        tag = (bottlenecks or {}).get(role)
        if tag == COMPUTE_BOUND and gpu.price_per_hour < base_gpu.price_per_hour:
            alignment_ok = False
    return AllocationScore(
        price_per_hour=price,
        baseline_price_per_hour=price0,
        spend_ratio=sr,
        cost_efficiency=ce,
        alignment_ok=alignment_ok,
        sla_ok=sla_ok,
        roi_ok=ce > roi_threshold,
    )
