"""Per-replica admission, batch composition, and preemption.

One scheduler instance owns one replica's KV block pool and queues; only that
replica's cluster driver ever touches it.  Four policies share a single
budget-driven batch builder and differ only in how they order candidates:

* vllm_v1  - running requests first (decode and in-flight chunked prefill),
             then waiting requests FCFS.
* sglang   - when any waiting prompt can be admitted, build a prefill-only
             batch; otherwise identical to vllm_v1.
* mlfq     - skip-join multi-level feedback queue: a slice enters the level
             matching its current-round observable size and is demoted as it
             burns each level's token quantum.
* h2q_br   - two-queue ranking with a sticky long flag, a one-shot carryover
             release for partially run long prefills, and a starvation bound
             that forces the oldest long slice after too many short-only
             passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .adapters import (
    MtpState,
    PrefixCacheIndex,
    blocks_needed,
    chunk_next,
    mtp_step,
    prefix_content_id,
)
from .config import RuntimeConfig
from .workload import Request

PREFILL = "prefill"
DECODE = "decode"
VERIFY = "verify"

WAITING = "waiting"
RUNNING = "running"
FINISHED = "finished"

QUEUE_SHORT = "Q_S"
QUEUE_LONG = "Q_L"


class SchedulingError(RuntimeError):
    pass


# --- request state ------------------------------------------------------------


@dataclass
class RequestState:
    """Mutable serving-side view of one request on one replica."""
    req: Request
    arrival_ns: int            # when the slice landed on this cluster
    decode_here: bool          # this replica runs the decode phase
    status: str = WAITING
    prefilled: int = 0         # prompt tokens covered, cache credit included
    cached: int = 0            # prefix-cache credit granted at admission
    decoded: int = 0           # output tokens committed
    blocks: int = 0            # KV blocks currently held
    preemptions: int = 0
    mtp: MtpState | None = None
    # mlfq
    level: int = 0
    level_served: int = 0
    # h2q
    queue_tag: str = QUEUE_SHORT
    fresh_len: int = 0         # observable size of the current round
    carryover: bool = False    # one-shot release credit
    # prefix cache accounting, accumulated over (re)admissions
    prefix_hits: int = 0
    prefix_queried: int = 0
    # lifecycle timestamps, stamped by the orchestration layer
    admitted_ns: int | None = None
    prefill_end_ns: int | None = None
    finish_ns: int | None = None

    @property
    def prompt(self) -> int:
        return self.req.prompt_tokens

    @property
    def in_prefill(self) -> bool:
        return self.prefilled < self.prompt

    @property
    def remaining_prefill(self) -> int:
        return self.prompt - self.prefilled

    @property
    def remaining_output(self) -> int:
        return self.req.output_len - self.decoded

    @property
    def round_done(self) -> bool:
        if self.decode_here:
            return not self.in_prefill and self.remaining_output <= 0
        return not self.in_prefill

    def sort_key(self) -> tuple:
        return (self.arrival_ns, self.req.session, self.req.round_idx)


# --- KV block pool ------------------------------------------------------------


class KvBlockPool:
    """Fixed pool of KV blocks with watermark-guarded admission.

    free + sum(held) == total at every boundary; admission keeps
    free - needed >= watermark * total.
    """

    def __init__(self, total: int, watermark: float):
        if total < 0:
            raise SchedulingError("pool size must be >= 0")
        if not 0.0 <= watermark < 1.0:
            raise SchedulingError("watermark must be in [0, 1)")
        self.total = total
        self.free = total
        self.watermark = watermark
        self._held: dict[int, int] = {}  # id(state) is unstable; key by rid

    @property
    def watermark_blocks(self) -> float:
        return self.watermark * self.total

    def held(self, rid: int) -> int:
        return self._held.get(rid, 0)

    def can_admit(self, needed: int) -> bool:
        return self.free - needed >= self.watermark_blocks

    def admit(self, rid: int, needed: int) -> None:
        if not self.can_admit(needed):
            raise SchedulingError(f"admission of {needed} blocks violates the watermark")
        self.free -= needed
        self._held[rid] = self._held.get(rid, 0) + needed

    def grow(self, rid: int, extra: int) -> bool:
        if extra < 0:
            raise SchedulingError("cannot grow by a negative block count")
        if extra > self.free:
            return False
        self.free -= extra
        self._held[rid] = self._held.get(rid, 0) + extra
        return True

    def release(self, rid: int) -> int:
        freed = self._held.pop(rid, 0)
        self.free += freed
        return freed

    def resize(self, total: int) -> None:
        """Re-budget the pool in place; free may go negative until the
        caller preempts holders back under the new capacity."""
        if total < 0:
            raise SchedulingError("pool size must be >= 0")
        self.free += total - self.total
        self.total = total

    def check(self) -> None:
        held = sum(self._held.values())
        if self.free + held != self.total or self.free < 0:
            raise SchedulingError(
                f"block conservation broken: free={self.free} held={held} total={self.total}")


# --- batch plan ---------------------------------------------------------------


@dataclass
class BatchEntry:
    state: RequestState
    phase: str            # prefill | decode | verify
    tokens: int           # computed tokens (chunk size, 1, or verify width)
    context_before: int   # KV tokens resident before this work runs

    @property
    def is_prefill(self) -> bool:
        return self.phase == PREFILL


@dataclass
class BatchPlan:
    entries: list[BatchEntry] = field(default_factory=list)
    preempted: list[RequestState] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def total_tokens(self) -> int:
        return sum(e.tokens for e in self.entries)

    @property
    def prefill_tokens(self) -> int:
        return sum(e.tokens for e in self.entries if e.is_prefill)

    @property
    def decode_entries(self) -> int:
        return sum(1 for e in self.entries if not e.is_prefill)

    @property
    def pure_decode(self) -> bool:
        return bool(self.entries) and all(not e.is_prefill for e in self.entries)


@dataclass
class BatchOutcome:
    """What a completed batch did, for the orchestration layer to act on."""
    prefill_completed: list[RequestState] = field(default_factory=list)
    finished: list[RequestState] = field(default_factory=list)
    committed_tokens: int = 0
    served: dict = field(default_factory=dict)   # rid -> tokens served this step


# --- H2Q primitives (standalone so properties can fuzz them directly) ---------


@dataclass
class H2qSessionState:
    """Per-session memory the two-queue policy keeps between rounds."""
    sticky_long: bool = False   # z: never resets within a session
    served: int = 0             # H: cumulative served new tokens
    last_total: int = 0         # T_last: context total after the last round


def h2q_classify(sess: H2qSessionState, fresh_len: int,
                 short_prompt: int, history_bound: int) -> str:
    """Long queue iff the sticky flag, history, or current-round size says so."""
    if sess.sticky_long or sess.served > history_bound or fresh_len > short_prompt:
        return QUEUE_LONG
    return QUEUE_SHORT


def h2q_order(
    slices: list[RequestState], eta: int, starvation_bound: int,
) -> tuple[list[RequestState], RequestState | None, RequestState | None]:
    """Rank the combined running and waiting sets.

    Rank tiers: one released carryover slice (-2, legal only if it arrived no
    later than the oldest waiting short slice), one forced oldest long slice
    (-1, only once eta reaches the starvation bound), then the short queue (0)
    and the long queue (1).  Short slices order by (size, prefill-first,
    arrival); long slices by (decode-first, arrival).
    """
    shorts = [s for s in slices if s.queue_tag == QUEUE_SHORT]
    longs = [s for s in slices if s.queue_tag == QUEUE_LONG]

    released = None
    carry = sorted((s for s in longs if s.carryover), key=RequestState.sort_key)
    if carry:
        oldest_wait = min((s.arrival_ns for s in shorts if s.status == WAITING), default=None)
        if oldest_wait is None or carry[0].arrival_ns <= oldest_wait:
            released = carry[0]

    forced = None
    if eta >= starvation_bound:
        rest = [s for s in longs if s is not released]
        if rest:
            forced = min(rest, key=RequestState.sort_key)

    def rank(s: RequestState) -> tuple:
        if s is released:
            return (-2,)
        if s is forced:
            return (-1,)
        if s.queue_tag == QUEUE_SHORT:
            return (0, s.fresh_len, 0 if s.in_prefill else 1, *s.sort_key())
        return (1, 0 if not s.in_prefill else 1, *s.sort_key())

    return sorted(slices, key=rank), released, forced


# --- policies -----------------------------------------------------------------


class _Policy:
    name = ""
    prefill_only = False

    def candidates(self, sched: "ReplicaScheduler") -> list[RequestState]:
        raise NotImplementedError

    def on_enqueue(self, sched: "ReplicaScheduler", state: RequestState) -> None:
        pass

    def on_batch_done(self, sched: "ReplicaScheduler", plan: BatchPlan,
                      outcome: BatchOutcome, served: dict[int, int]) -> None:
        pass


class VllmV1Policy(_Policy):
    name = "vllm_v1"

    def candidates(self, sched):
        waiting = sorted(sched.waiting, key=RequestState.sort_key)
        return list(sched.running) + waiting


class SglangPolicy(_Policy):
    """Prefill-first: admit prompts when possible, else behave like vllm_v1."""
    name = "sglang"

    def candidates(self, sched):
        admissible = any(
            sched.pool.can_admit(sched.blocks_for_prompt(s))
            for s in sched.waiting if s.in_prefill)
        if admissible:
            self.prefill_only = True
            running_prefills = [s for s in sched.running if s.in_prefill]
            waiting = sorted(sched.waiting, key=RequestState.sort_key)
            return running_prefills + waiting
        self.prefill_only = False
        return list(sched.running) + sorted(sched.waiting, key=RequestState.sort_key)


class MlfqSkipJoinPolicy(_Policy):
    """Skip-join MLFQ over the current round's observable size."""
    name = "mlfq"

    def on_enqueue(self, sched, state):
        # priority keys off the round's observable fresh size, not the
        # accumulated context, so an agentic answer round looks short
        state.fresh_len = state.req.input_len
        state.level = self.entry_level(sched.runtime.mlfq_quanta, state.fresh_len)
        state.level_served = 0

    @staticmethod
    def entry_level(quanta: tuple[int, ...], size: int) -> int:
        for i, q in enumerate(quanta):
            if q == 0 or size <= q:  # 0 marks the unbounded bottom level
                return i
        return len(quanta) - 1

    def candidates(self, sched):
        merged = list(sched.running) + list(sched.waiting)
        return sorted(merged, key=lambda s: (s.level, *s.sort_key()))

    def on_batch_done(self, sched, plan, outcome, served):
        quanta = sched.runtime.mlfq_quanta
        for entry in plan.entries:
            s = entry.state
            s.level_served += served.get(s.req.rid, 0)
            q = quanta[s.level]
            if q > 0 and s.level_served >= q and s.level < len(quanta) - 1:
                s.level += 1
                s.level_served = 0


class H2qBrPolicy(_Policy):
    """Two-queue ranking with carryover release and a starvation bound."""
    name = "h2q_br"

    def on_enqueue(self, sched, state):
        sess = sched.h2q_session(state.req.session)
        state.fresh_len = max(state.prompt - sess.last_total, 0)
        state.queue_tag = h2q_classify(
            sess, state.fresh_len,
            sched.runtime.h2q_short_prompt, sched.runtime.h2q_history)
        if state.queue_tag == QUEUE_LONG:
            sess.sticky_long = True

    def candidates(self, sched):
        merged = list(sched.running) + list(sched.waiting)
        ordered, released, _ = h2q_order(
            merged, sched.h2q_eta, sched.runtime.h2q_release_bound)
        self._released = released
        return ordered

    def on_batch_done(self, sched, plan, outcome, served):
        released = getattr(self, "_released", None)
        any_long = False
        short_count = 0
        for entry in plan.entries:
            s = entry.state
            sess = sched.h2q_session(s.req.session)
            sess.served += served.get(s.req.rid, 0)
            if s.queue_tag == QUEUE_LONG:
                any_long = True
            else:
                short_count += 1
            if s is released:
                s.carryover = False  # the one-shot credit is spent
            elif entry.is_prefill and s.in_prefill and s.status == RUNNING:
                # partial unfinished prefill: goes long and earns the credit
                s.queue_tag = QUEUE_LONG
                s.carryover = True
                sess.sticky_long = True
        for s in outcome.finished:
            sess = sched.h2q_session(s.req.session)
            sess.last_total = s.prompt + s.decoded
        sched.h2q_eta = 0 if any_long else sched.h2q_eta + short_count
        self._released = None


POLICIES = {p.name: p for p in (VllmV1Policy, SglangPolicy, MlfqSkipJoinPolicy, H2qBrPolicy)}


# --- replica scheduler --------------------------------------------------------


class ReplicaScheduler:
    """Admission, batching, and preemption for one replica."""

    def __init__(self, runtime: RuntimeConfig, pool: KvBlockPool,
                 prefix: PrefixCacheIndex | None, workload_seed: int,
                 decode_here: bool = True, prefill_here: bool = True):
        if runtime.scheduler not in POLICIES:
            raise SchedulingError(f"unknown scheduler {runtime.scheduler!r}")
        self.runtime = runtime
        self.pool = pool
        self.prefix = prefix
        self.workload_seed = workload_seed
        self.decode_here = decode_here
        self.prefill_here = prefill_here
        self.policy = POLICIES[runtime.scheduler]()
        self.waiting: list[RequestState] = []
        self.running: list[RequestState] = []  # admission order; preemption stack
        self.h2q_sessions: dict[int, H2qSessionState] = {}
        self.h2q_eta = 0
        self.states: dict[int, RequestState] = {}
        self.preempt_count = 0

    # -- bookkeeping helpers

    def h2q_session(self, session: int) -> H2qSessionState:
        sess = self.h2q_sessions.get(session)
        if sess is None:
            sess = self.h2q_sessions[session] = H2qSessionState()
        return sess

    def blocks_for_prompt(self, state: RequestState) -> int:
        return blocks_needed(state.prompt, self.runtime.block_tokens)

    def _context_tokens(self, state: RequestState) -> int:
        # resident KV: computed prompt so far plus committed output
        return min(state.prefilled, state.prompt) + state.decoded

    def has_work(self) -> bool:
        return bool(self.waiting or self.running)

    # -- intake

    def enqueue(self, req: Request, now: int, prefilled: int = 0,
                decoded: int = 0) -> RequestState:
        """Register a slice; prefilled > 0 means the prefill ran elsewhere."""
        state = RequestState(req=req, arrival_ns=now, decode_here=self.decode_here,
                             prefilled=prefilled, decoded=decoded)
        if prefilled == 0 and not self.prefill_here:
            raise SchedulingError("this replica cannot run prefills")
        max_admit = self.pool.total - self.pool.watermark_blocks
        peak_tokens = state.prompt + (req.output_len if self.decode_here else 0)
        if (self.blocks_for_prompt(state) > max_admit
                or blocks_needed(peak_tokens, self.runtime.block_tokens) > self.pool.total):
            raise SchedulingError(
                f"request {req.rid} needs {self.blocks_for_prompt(state)} blocks to admit "
                f"and {blocks_needed(peak_tokens, self.runtime.block_tokens)} at peak; "
                f"pool holds {self.pool.total}")
        if self.runtime.spec_decode is not None and self.decode_here:
            state.mtp = MtpState.seeded(self.workload_seed, req.rid)
        state.fresh_len = state.prompt  # policies overwrite with session context
        self.policy.on_enqueue(self, state)
        self.waiting.append(state)
        self.states[req.rid] = state
        return state

    # -- preemption

    def _preempt_until(self, needed: int, plan: BatchPlan,
                       protected: set[int]) -> bool:
        """Free blocks most-recently-admitted-first until the watermark holds.

        Requests already planned into the batch being built are off limits:
        their work is committed for this step.
        """
        while not self.pool.can_admit(needed):
            victim = None
            for s in reversed(self.running):
                if s.req.rid not in protected:
                    victim = s
                    break
            if victim is None:
                return self.pool.free >= needed  # everything left is protected
            self._preempt(victim, plan)
        return True

    def _preempt(self, victim: RequestState, plan: BatchPlan) -> None:
        self.pool.release(victim.req.rid)
        self.running.remove(victim)
        if self.prefix is not None and victim.prefilled > victim.cached:
            # computed blocks stay recoverable as prefix hashes
            content = prefix_content_id(victim.req.session, victim.req.prefix_group)
            self.prefix.insert(content, min(victim.prefilled, victim.prompt))
        victim.status = WAITING
        victim.blocks = 0
        victim.prefilled = 0
        victim.cached = 0
        victim.decoded = 0
        victim.preemptions += 1
        self.preempt_count += 1
        if victim.mtp is not None:
            victim.mtp = MtpState.seeded(self.workload_seed, victim.req.rid)
        if self.prefill_here:
            self.policy.on_enqueue(self, victim)  # re-derive level / queue tag
            self.waiting.append(victim)
        else:
            # this replica cannot recompute the prompt; hand the victim back
            # to the orchestration layer for a fresh prefill elsewhere
            self.states.pop(victim.req.rid, None)
        if plan is not None:
            plan.preempted.append(victim)

    # -- batch construction

    def next_batch(self) -> BatchPlan:
        plan = BatchPlan()
        candidates = self.policy.candidates(self)
        prefill_only = self.policy.prefill_only
        rt = self.runtime
        total_tokens = 0
        prefill_tokens = 0
        seen: set[int] = set()
        planned: set[int] = set()
        for state in candidates:
            if plan.size >= rt.max_batch_size or total_tokens >= rt.max_batch_tokens:
                break
            if state.status == FINISHED or state.req.rid in seen:
                continue
            seen.add(state.req.rid)
            if state.in_prefill:
                if not self.prefill_here:
                    continue
                chunk = chunk_next(state.remaining_prefill,
                                   min(rt.prefill_token_budget,
                                       rt.max_batch_tokens - total_tokens + prefill_tokens),
                                   prefill_tokens)
                if chunk <= 0:
                    continue
                if state.status == WAITING and not self._admit(state):
                    continue
                plan.entries.append(BatchEntry(
                    state, PREFILL, chunk, self._context_tokens(state)))
                planned.add(state.req.rid)
                prefill_tokens += chunk
                total_tokens += chunk
            else:
                if prefill_only or not self.decode_here or state.remaining_output <= 0:
                    continue
                width = 1
                if state.mtp is not None:
                    width = rt.spec_decode.verify_tokens + 1
                if total_tokens + width > rt.max_batch_tokens:
                    continue
                if state.status == WAITING and not self._admit(state):
                    continue
                if not self._ensure_decode_blocks(state, width, plan, planned):
                    continue
                plan.entries.append(BatchEntry(
                    state, VERIFY if width > 1 else DECODE, width,
                    self._context_tokens(state)))
                planned.add(state.req.rid)
                total_tokens += width
        self.pool.check()
        return plan

    def _admit(self, state: RequestState) -> bool:
        needed = self.blocks_for_prompt(state)
        if not self.pool.can_admit(needed):
            return False
        self.pool.admit(state.req.rid, needed)
        state.blocks = needed
        state.status = RUNNING
        if state.in_prefill and self.prefix is not None:
            content = prefix_content_id(state.req.session, state.req.prefix_group)
            before = self.prefix.hit_blocks
            credit = self.prefix.lookup(content, state.prompt)
            state.prefix_hits += self.prefix.hit_blocks - before
            state.prefix_queried += state.prompt // self.runtime.block_tokens
            state.cached = credit
            state.prefilled = max(state.prefilled, credit)
        self.waiting.remove(state)
        self.running.append(state)
        return True

    def _ensure_decode_blocks(self, state: RequestState, width: int,
                              plan: BatchPlan, planned: set[int]) -> bool:
        target = blocks_needed(self._context_tokens(state) + width,
                               self.runtime.block_tokens)
        extra = target - self.pool.held(state.req.rid)
        if extra <= 0:
            return True
        if not self.pool.grow(state.req.rid, extra):
            self._preempt_until(extra, plan, planned | {state.req.rid})
            if state.status != RUNNING:  # lost its own blocks in the scramble
                return False
            if not self.pool.grow(state.req.rid, extra):
                return False
        state.blocks = self.pool.held(state.req.rid)
        return True

    # -- batch completion

    def complete_batch(self, plan: BatchPlan) -> BatchOutcome:
        """Apply progress for every scheduled entry and retire finished rounds."""
        outcome = BatchOutcome()
        served: dict[int, int] = {}
        rt = self.runtime
        for entry in plan.entries:
            state = entry.state
            if entry.is_prefill:
                state.prefilled += entry.tokens
                served[state.req.rid] = entry.tokens
                if not state.in_prefill:
                    outcome.prefill_completed.append(state)
                    if state.decoded == 0 and state.req.output_len > 0:
                        # the prefill forward pass samples the first output token
                        state.decoded = 1
                        served[state.req.rid] += 1
                        outcome.committed_tokens += 1
                    if self.prefix is not None:
                        content = prefix_content_id(state.req.session,
                                                    state.req.prefix_group)
                        self.prefix.insert(content, state.prompt)
            else:
                if state.mtp is not None:
                    sd = rt.spec_decode
                    committed = mtp_step(state.mtp, sd.verify_tokens, sd.acceptance,
                                         state.remaining_output)
                else:
                    committed = 1
                state.decoded += committed
                served[state.req.rid] = committed
                outcome.committed_tokens += committed
            if state.round_done:
                state.status = FINISHED
                outcome.finished.append(state)
        for state in outcome.finished:
            self.pool.release(state.req.rid)
            state.blocks = 0
            if state in self.running:
                self.running.remove(state)
            if self.decode_here and self.prefill_here and self.prefix is not None:
                # the full context, decoded tail included, seeds the next round
                content = prefix_content_id(state.req.session, state.req.prefix_group)
                self.prefix.insert(content, state.prompt + state.decoded)
            self.states.pop(state.req.rid, None)
        outcome.served = served
        self.policy.on_batch_done(self, plan, outcome, served)
        self.pool.check()
        return outcome
