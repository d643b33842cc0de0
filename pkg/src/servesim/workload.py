"""Request synthesis: shaped synthetic mixes, multi-round agentic sessions,
CSV traces, and arrival-time generation.

A request is one inference call (one prefill followed by one decode stream).
Multi-round work is a session: the plan lists every round up front, round 0
enters the arrival stream, and later rounds are re-issued by the serving side
after the tool-use gap.  Token context accumulates across rounds, so a round's
effective prompt is its own fresh input plus everything the session has
produced before it.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, replace

from .config import (
    AGENTIC_HEAVY_TEMPLATE,
    AGENTIC_SHORT_TEMPLATE,
    MS,
    PATTERN_SHAPES,
    SECOND,
    WorkloadConfig,
)


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class RoundSpec:
    """Fresh input tokens and decoded output tokens for one round."""
    input_len: int
    output_len: int

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1:
            raise WorkloadError(
                f"round lengths must be >= 1, got ({self.input_len}, {self.output_len})")


@dataclass(frozen=True)
class Request:
    """One inference call within a (possibly single-round) session."""
    rid: int
    session: int
    round_idx: int
    plan: tuple[RoundSpec, ...]
    arrival_ns: int
    prefix_group: str | None = None
    template: str = ""

    def __post_init__(self):
        if not self.plan:
            raise WorkloadError("request plan must have at least one round")
        if not 0 <= self.round_idx < len(self.plan):
            raise WorkloadError(f"round {self.round_idx} outside plan of {len(self.plan)}")
        if self.arrival_ns < 0:
            raise WorkloadError("arrival must be >= 0")

    @property
    def input_len(self) -> int:
        return self.plan[self.round_idx].input_len

    @property
    def output_len(self) -> int:
        return self.plan[self.round_idx].output_len

    @property
    def history_tokens(self) -> int:
        """Context carried in from every earlier round of the session."""
        return sum(r.input_len + r.output_len for r in self.plan[:self.round_idx])

    @property
    def prompt_tokens(self) -> int:
        """Tokens the prefill must cover: accumulated history plus fresh input."""
        return self.history_tokens + self.input_len

    @property
    def total_context(self) -> int:
        """Peak KV footprint of this round in tokens."""
        return self.prompt_tokens + self.output_len

    @property
    def is_final_round(self) -> bool:
        return self.round_idx == len(self.plan) - 1

    @property
    def is_continuation(self) -> bool:
        return self.round_idx > 0

    def next_round(self, rid: int, arrival_ns: int) -> "Request":
        if self.is_final_round:
            raise WorkloadError(f"session {self.session} has no round after {self.round_idx}")
        return replace(self, rid=rid, round_idx=self.round_idx + 1, arrival_ns=arrival_ns)


def _template_plan(raw: tuple[tuple[int, int], ...]) -> tuple[RoundSpec, ...]:
    return tuple(RoundSpec(i, o) for i, o in raw)


def arrival_times(kind: str, count: int, qps: float, seed: int) -> list[int]:
    """Arrival offsets in ns: burst (all zero), fixed rate, or Poisson."""
    if count < 0:
        raise WorkloadError("count must be >= 0")
    if kind == "burst":
        return [0] * count
    if qps <= 0:
        raise WorkloadError(f"{kind} arrivals need qps > 0")
    if kind == "rate":
        return [int(round(i * SECOND / qps)) for i in range(count)]
    if kind == "poisson":
        rng = random.Random(seed * 4 + 0)
        t = 0.0
        out = []
        for _ in range(count):
            t += rng.expovariate(qps)
            out.append(int(round(t * SECOND)))
        return out
    raise WorkloadError(f"unknown arrival kind {kind!r}")


def _jittered(base: int, frac: float, rng: random.Random) -> int:
    if frac <= 0:
        return base
    lo, hi = 1.0 - frac, 1.0 + frac
    return max(1, int(round(base * rng.uniform(lo, hi))))


def _synthetic(cfg: WorkloadConfig) -> list[Request]:
    shape = PATTERN_SHAPES[cfg.pattern]
    input_len = cfg.input_len if cfg.input_len is not None else shape[0]
    output_len = cfg.output_len if cfg.output_len is not None else shape[1]
    times = arrival_times(cfg.arrival.kind, cfg.num_requests, cfg.arrival.qps, cfg.seed)
    jitter_rng = random.Random(cfg.seed * 4 + 2)
    out = []
    for i, ts in enumerate(times):
        plan = (RoundSpec(_jittered(input_len, cfg.jitter, jitter_rng),
                          _jittered(output_len, cfg.jitter, jitter_rng)),)
        out.append(Request(rid=i, session=i, round_idx=0, plan=plan,
                           arrival_ns=ts, template=cfg.pattern))
    return out


def _agentic(cfg: WorkloadConfig) -> list[Request]:
    n = cfg.num_requests
    heavy_count = int(cfg.agentic_mix * n + 0.5)  # half-up, exact count
    labels = [True] * heavy_count + [False] * (n - heavy_count)
    random.Random(cfg.seed * 4 + 1).shuffle(labels)
    times = arrival_times(cfg.arrival.kind, n, cfg.arrival.qps, cfg.seed)
    short = _template_plan(AGENTIC_SHORT_TEMPLATE)
    heavy = _template_plan(AGENTIC_HEAVY_TEMPLATE)
    out = []
    for i, (heavy_session, ts) in enumerate(zip(labels, times)):
        out.append(Request(
            rid=i, session=i, round_idx=0,
            plan=heavy if heavy_session else short,
            arrival_ns=ts,
            template="agentic_heavy" if heavy_session else "agentic_short"))
    return out


def _parse_round_plan(text: str, where: str) -> tuple[RoundSpec, ...]:
    rounds = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 2:
            raise WorkloadError(f"{where}: round plan entry {part!r} is not 'input:output'")
        try:
            rounds.append(RoundSpec(int(bits[0]), int(bits[1])))
        except ValueError as exc:
            raise WorkloadError(f"{where}: bad round plan entry {part!r}: {exc}") from None
    if not rounds:
        raise WorkloadError(f"{where}: empty round plan")
    return tuple(rounds)


def load_trace(path: str) -> list[Request]:
    """Read a request trace CSV.

    Columns: arrival_ms, input_len, output_len and optionally session_id,
    round_plan ("in:out;in:out;..."), prefix_group.  A header row is skipped
    when the first field is not numeric.  Rows must be sorted by arrival.
    """
    out: list[Request] = []
    last_arrival = -1
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise WorkloadError(f"cannot open trace {path}: {exc}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            where = f"{path}:{lineno}"
            first = row[0].strip()
            if lineno == 1:
                try:
                    float(first)
                except ValueError:
                    continue  # header
            if len(row) < 3:
                raise WorkloadError(f"{where}: expected at least 3 columns, got {len(row)}")
            try:
                arrival = int(round(float(first) * MS))
                input_len = int(row[1])
                output_len = int(row[2])
            except ValueError as exc:
                raise WorkloadError(f"{where}: {exc}") from None
            if arrival < 0:
                raise WorkloadError(f"{where}: negative arrival")
            if arrival < last_arrival:
                raise WorkloadError(f"{where}: arrivals must be sorted (got {arrival} "
                                    f"after {last_arrival})")
            last_arrival = arrival
            rid = len(out)
            session = rid
            if len(row) > 3 and row[3].strip():
                try:
                    session = int(row[3])
                except ValueError:
                    raise WorkloadError(f"{where}: session_id must be an integer") from None
            if len(row) > 4 and row[4].strip():
                plan = _parse_round_plan(row[4], where)
            else:
                plan = (RoundSpec(input_len, output_len),)
            prefix_group = row[5].strip() if len(row) > 5 and row[5].strip() else None
            try:
                out.append(Request(rid=rid, session=session, round_idx=0, plan=plan,
                                   arrival_ns=arrival, prefix_group=prefix_group,
                                   template="trace"))
            except WorkloadError as exc:
                raise WorkloadError(f"{where}: {exc}") from None
    if not out:
        raise WorkloadError(f"{path}: trace has no requests")
    return out


def build_requests(cfg: WorkloadConfig) -> list[Request]:
    """Materialize the round-0 arrival stream for a workload."""
    if cfg.pattern == "trace":
        if not cfg.trace_path:
            raise WorkloadError("trace workload needs a trace path")
        reqs = load_trace(cfg.trace_path)
        if cfg.num_requests and cfg.num_requests < len(reqs):
            reqs = reqs[:cfg.num_requests]
        return reqs
    if cfg.pattern == "agentic":
        return _agentic(cfg)
    return _synthetic(cfg)
