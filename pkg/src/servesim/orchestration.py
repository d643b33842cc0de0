"""Role-cluster event graph on top of the deterministic fabric.

One driver per role cluster.  Colocated and prefill/decode-split replicas
run whole batches as single timed spans (the pipeline wavefront is priced
arithmetically); the attention/FFN split instead walks every layer through
paired activation transfers so cross-cluster contention is simulated, not
approximated.  All cross-cluster interaction rides the fabric channels;
every per-request milestone lands in the owning cluster's fact buffer and
is folded into lifecycle records after the run.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

from .adapters import CaptureBinLadder, PrefixCacheIndex
from .compiler import (
    ACTIVATION,
    KV_TRANSFER,
    REQUEUE,
    ClusterSpec,
    SimulationPlan,
    compile_plan,
    resolve_layout,
    stage_layers,
)
from .config import (
    Architecture,
    DECODE_ROLE,
    ENTRY_ROLE,
    Role,
    ServingSpec,
    ceil_div,
)
from .costing import (
    BoundTally,
    CostContext,
    activation_bytes,
    batch_launch,
    cost_batch,
    ffn_phase_times,
    lm_head_ns,
    microbatch_attention_ns,
    route_tokens_moe,
    split_microbatches,
)
from .engine import (
    ClusterDriver,
    Event,
    EventFabric,
    EventKind,
    make_executor,
)
from .fidelity import LAUNCH_INCLUSIVE, FidelityPlane, transfer_time
from .metrics import (
    F_ADMIT,
    F_ARRIVAL,
    F_COMMIT,
    F_ENQUEUE,
    F_FINISH,
    F_MTP,
    F_PREEMPT,
    F_PREFILL_END,
    F_PREFIX,
    F_TRANSFER_END,
    F_TRANSFER_START,
    RoundRecord,
    fold_facts,
)
from .scheduling import BatchPlan, ReplicaScheduler, KvBlockPool, RequestState
from .workload import Request, build_requests


class OrchestrationError(RuntimeError):
    pass


def _mix(*parts: int) -> int:
    """Deterministic integer stream id from nested indices."""
    h = 0
    for p in parts:
        h = h * 1_000_003 + p + 7
    return h & 0x7FFFFFFFFFFFFFFF


class StepLog(NamedTuple):
    """One scheduled iteration as the replica executed it."""

    start_ns: int
    end_ns: int
    replica: int
    size: int
    prefill_tokens: int
    decode_tokens: int
    padded_tokens: int
    kernel_only: bool


class EpSyncBarrier:
    """Join point for one expert-parallel layer's combine collective.

    Every lane reports its ready time exactly once; the combine fires at
    the slowest lane plus the configured slack.
    """

    def __init__(self, layer_id, expected_lanes: int, slack_ns: int = 0):
        if expected_lanes < 1:
            raise OrchestrationError("barrier needs at least one lane")
        self.layer_id = layer_id
        self.expected = expected_lanes
        self.slack_ns = slack_ns
        self.ready: dict[int, int] = {}

    def report(self, lane: int, t_ready: int) -> int | None:
        """Record one lane; returns the fire time once all have reported."""
        if lane in self.ready:
            raise OrchestrationError(
                f"lane {lane} reported twice at barrier {self.layer_id}")
        if not 0 <= lane < self.expected:
            raise OrchestrationError(f"lane {lane} outside barrier width")
        self.ready[lane] = t_ready
        if len(self.ready) == self.expected:
            return self.fire_time
        return None

    @property
    def complete(self) -> bool:
        return len(self.ready) == self.expected

    @property
    def fire_time(self) -> int:
        if not self.complete:
            raise OrchestrationError(f"barrier {self.layer_id} still pending")
        return max(self.ready.values()) + self.slack_ns


class StageLane:
    """Serial execution slot for one pipeline stage of a split replica."""

    __slots__ = ("busy", "tasks")

    def __init__(self):
        self.busy = False
        self.tasks: deque = deque()


@dataclass
class AfdIteration:
    """In-flight per-layer walk of one decode iteration on a split pair."""

    it: int
    plan: BatchPlan
    mode: str
    start_ns: int
    mb_tokens: list[int]          # per microbatch, padding included
    attn_ns: list[int]            # per microbatch, per layer
    lm_ns: list[int]
    pending: int                  # microbatches still walking
    padded_tokens: int


class ReplicaSim:
    """Mutable per-replica serving state, owned by one cluster driver."""

    def __init__(self, idx: int, sched: ReplicaScheduler | None,
                 ctx: CostContext, ladder: CaptureBinLadder | None):
        self.idx = idx
        self.sched = sched
        self.ctx = ctx
        self.ladder = ladder
        self.busy = False
        self.tick_pending = False
        self.iterations = 0
        self.inflight_kv = 0
        self.inflight_m2n = 0
        self.steps: list[StepLog] = []
        self.kv_samples: list[tuple[int, int, int]] = []
        self.padded_tokens = 0
        self.useful_tokens = 0
        self.tally = BoundTally()
        # attention/FFN split state
        self.attn_lanes: list[StageLane] = []
        self.ffn_lanes: list[StageLane] = []
        self.afd: AfdIteration | None = None
        self.routing_cache: dict = {}

    def sample_kv(self, ts: int) -> None:
        if self.sched is not None:
            pool = self.sched.pool
            self.kv_samples.append((ts, pool.free, pool.total))


class ClusterSim:
    """One role cluster: replicas, routing, facts, and the event handler."""

    def __init__(self, sim: "Simulation", spec: ClusterSpec, driver: ClusterDriver):
        self.sim = sim
        self.spec = spec
        self.driver = driver
        self.role = spec.role
        self.name = spec.role.value
        self.facts: list[tuple] = []
        self.replicas: list[ReplicaSim] = []
        self.affinity: dict[int, int] = {}
        self.rr = 0
        self.rid_counter = 0
        self.out: dict[tuple[Role, str], object] = {}   # (dst role, kind) -> Channel
        self.in_links: dict[tuple[Role, str], object] = {}
        self.active_sessions = 0
        self.total_sessions = 0
        self.switched = False
        self.draining = False
        self.frozen_until = 0
        self.switch_ns: int | None = None
        driver.handler = self.handle

    # -- plumbing

    def fact(self, kind: str, ts: int, req: Request, value=None) -> None:
        self.facts.append((kind, ts, req.rid, req.session, req.round_idx, value))

    def route(self, session: int) -> int:
        """Fresh sessions round-robin; continuations stick to their replica."""
        rep = self.affinity.get(session)
        if rep is None:
            rep = self.rr % len(self.replicas)
            self.rr += 1
            self.affinity[session] = rep
        return rep

    def next_rid(self) -> int:
        rid = self.rid_counter
        self.rid_counter += 1
        return rid

    def kick(self, rep: ReplicaSim, now: int) -> None:
        if rep.busy or rep.tick_pending or self.draining:
            return
        if rep.sched is None or not rep.sched.has_work():
            return
        rep.tick_pending = True
        self.driver.schedule(max(now, self.frozen_until),
                             EventKind.SCHEDULER_TICK, rep.idx)

    # -- event dispatch

    def handle(self, driver: ClusterDriver, ev: Event) -> None:
        kind = ev.kind
        if kind is EventKind.SCHEDULER_TICK:
            self._on_tick(ev)
        elif kind is EventKind.GLOBAL_BATCH_END:
            self._on_batch_end(ev)
        elif kind is EventKind.BATCH_STAGE_END:
            self._on_stage_end(ev)
        elif kind is EventKind.REQUEST_ARRIVAL:
            self._begin_round(ev.payload, ev.ts)
        elif kind is EventKind.KV_TRANSFER_START:
            self._on_kv_start(ev)
        elif kind is EventKind.KV_TRANSFER_END:
            self._on_kv_end(ev)
        elif kind is EventKind.M2N_TRANSFER_START:
            self._on_m2n_start(ev)
        elif kind is EventKind.M2N_TRANSFER_END:
            self._on_m2n_end(ev)
        elif kind is EventKind.ALL_TO_ALL_COMBINE_READY:
            self._on_combine_ready(ev)
        elif kind is EventKind.THINKING_REQUEUE:
            self._on_requeue(ev)
        elif kind is EventKind.LAYOUT_SWITCH:
            self._apply_layout_switch(ev.ts)
        else:
            raise OrchestrationError(f"{self.name}: unhandled event {kind}")

    # -- request intake

    def _begin_round(self, req: Request, now: int) -> None:
        self.fact(F_ARRIVAL, req.arrival_ns, req,
                  (req.input_len, req.output_len, req.prompt_tokens))
        rep = self.replicas[self.route(req.session)]
        rep.sched.enqueue(req, now)
        self.fact(F_ENQUEUE, now, req)
        self.kick(rep, now)

    # -- batch lifecycle (colocated / prefill / decode clusters)

    def _on_tick(self, ev: Event) -> None:
        rep = self.replicas[ev.payload]
        rep.tick_pending = False
        if rep.busy or self.draining:
            return
        if self.role is Role.ATTENTION:
            self._start_split_iteration(rep, ev.ts)
        else:
            self._start_batch(rep, ev.ts)

    def _stamp_admissions(self, plan: BatchPlan, now: int) -> None:
        for entry in plan.entries:
            state = entry.state
            if state.admitted_ns is None:
                state.admitted_ns = now
                self.fact(F_ADMIT, now, state.req, self.spec.index)

    def _route_preempted(self, plan: BatchPlan, rep: ReplicaSim, now: int) -> None:
        for victim in plan.preempted:
            self.fact(F_PREEMPT, now, victim.req,
                      min(victim.prefilled, victim.prompt))
            if victim.req.rid not in rep.sched.states:
                # no local prefill path; send back for a fresh prefill
                ch = self.out[(ENTRY_ROLE[self.sim.plan.architecture], REQUEUE)]
                ch.send(EventKind.THINKING_REQUEUE, ("re_prefill", victim.req, now))

    def _start_batch(self, rep: ReplicaSim, now: int) -> None:
        plan = rep.sched.next_batch()
        self._route_preempted(plan, rep, now)
        if plan.size == 0:
            return
        self._stamp_admissions(plan, now)
        rep.busy = True
        rep.iterations += 1
        seed = _mix(self.sim.seed, self.spec.index, rep.idx, rep.iterations)
        timing = cost_batch(rep.ctx, plan, rep.ladder, seed,
                            self.sim.moe_routing, rep.tally)
        rep.padded_tokens += timing.padded_tokens
        rep.useful_tokens += timing.useful_tokens
        self.driver.schedule(now + timing.makespan_ns, EventKind.GLOBAL_BATCH_END,
                             (rep.idx, plan, timing, now))

    def _on_batch_end(self, ev: Event) -> None:
        if self.role is Role.ATTENTION:
            self._finish_split_iteration(ev)
            return
        rep_idx, plan, timing, started = ev.payload
        rep = self.replicas[rep_idx]
        outcome = rep.sched.complete_batch(plan)
        rep.busy = False
        now = ev.ts
        rep.steps.append(StepLog(
            started, now, rep_idx, plan.size,
            plan.prefill_tokens, plan.total_tokens - plan.prefill_tokens,
            timing.padded_tokens, timing.mode != LAUNCH_INCLUSIVE))
        rep.sample_kv(now)
        if self.sim.keep_commit_times:
            for entry in plan.entries:
                if not entry.is_prefill:
                    self.fact(F_COMMIT, now, entry.state.req,
                              outcome.served.get(entry.state.req.rid, 0))
        for state in outcome.prefill_completed:
            self._on_prefill_complete(state, now)
        for state in outcome.finished:
            self._on_round_finished(state, now)
        self._maybe_reconfigure(now)
        self.kick(rep, now)

    def _on_prefill_complete(self, state: RequestState, now: int) -> None:
        req = state.req
        self.fact(F_PREFILL_END, now, req, state.cached)
        if state.prefix_queried or state.prefix_hits:
            self.fact(F_PREFIX, now, req, (state.prefix_hits, state.prefix_queried))
        if state.decode_here:
            return
        if req.output_len <= 1:
            # the prefill pass already sampled the only output token
            return
        dst_role = DECODE_ROLE[self.sim.plan.architecture]
        dst_cluster = self.sim.clusters[dst_role]
        # affinity maps are written only by this cluster's thread
        dst_rep = dst_cluster.route(req.session)
        blocks = ceil_div(req.prompt_tokens, self.sim.plan.spec.runtime.block_tokens)
        nbytes = blocks * self.spec.block_bytes
        self.fact(F_TRANSFER_START, now, req, nbytes)
        self.out[(dst_role, KV_TRANSFER)].send(
            EventKind.KV_TRANSFER_START, (req, state.decoded, nbytes, dst_rep))

    def _on_round_finished(self, state: RequestState, now: int) -> None:
        req = state.req
        if not state.decode_here and req.output_len > 1:
            return  # prefill handoff, not a terminal round
        self.fact(F_FINISH, now, req, state.decoded)
        if state.mtp is not None:
            self.fact(F_MTP, now, req, (state.mtp.steps, state.mtp.drafted,
                                        state.mtp.accepted, state.mtp.committed))
        if req.is_final_round:
            if self is self.sim.entry_cluster:
                self.active_sessions -= 1
            return
        resume_at = now + self.sim.tool_delay_ns
        if self.role is ENTRY_ROLE[self.sim.plan.architecture]:
            nxt = req.next_round(self.next_rid(), resume_at)
            self.driver.schedule(resume_at, EventKind.THINKING_REQUEUE,
                                 ("think", nxt, resume_at))
        else:
            entry = ENTRY_ROLE[self.sim.plan.architecture]
            self.out[(entry, REQUEUE)].send(
                EventKind.THINKING_REQUEUE, ("think_remote", req, resume_at))

    def _on_requeue(self, ev: Event) -> None:
        tag, req, when = ev.payload
        now = ev.ts
        if tag == "re_prefill":
            rep = self.replicas[self.route(req.session)]
            rep.sched.enqueue(req, now)
            self.kick(rep, now)
            return
        if tag == "think_remote":
            resume_at = when
            if now < resume_at:
                self.driver.schedule(resume_at, EventKind.THINKING_REQUEUE,
                                     ("think_remote_due", req, resume_at))
                return
            nxt = req.next_round(self.next_rid(), resume_at)
            self._begin_round(nxt, now)
            return
        if tag == "think_remote_due":
            nxt = req.next_round(self.next_rid(), when)
            self._begin_round(nxt, now)
            return
        if tag == "think":
            self._begin_round(req, now)
            return
        raise OrchestrationError(f"unknown requeue tag {tag!r}")

    # -- KV transfers

    def _on_kv_start(self, ev: Event) -> None:
        req, decoded, nbytes, rep_idx = ev.payload
        rep = self.replicas[rep_idx]
        rep.inflight_kv += 1
        link = self.in_links[(ENTRY_ROLE[self.sim.plan.architecture], KV_TRANSFER)]
        dur = transfer_time(nbytes, link, rep.inflight_kv)
        self.driver.schedule(ev.ts + dur, EventKind.KV_TRANSFER_END,
                             (req, decoded, rep_idx))

    def _on_kv_end(self, ev: Event) -> None:
        req, decoded, rep_idx = ev.payload
        rep = self.replicas[rep_idx]
        rep.inflight_kv -= 1
        self.fact(F_TRANSFER_END, ev.ts, req)
        rep.sched.enqueue(req, ev.ts, prefilled=req.prompt_tokens, decoded=decoded)
        self.kick(rep, ev.ts)

    # -- reconfiguration (single-transition layout switch)

    def _maybe_reconfigure(self, now: int) -> None:
        policy = self.sim.reconfig
        if policy is None or self.role is not Role.COLOCATED or self.switched:
            return
        if self.total_sessions == 0:
            return
        if not self.draining:
            if self.active_sessions / self.total_sessions >= policy.threshold:
                return
            self.draining = True  # stop new batches; let inflight ones land
        if not any(r.busy for r in self.replicas):
            self.switched = True
            self.driver.schedule(now, EventKind.LAYOUT_SWITCH, None)

    def _apply_layout_switch(self, now: int) -> None:
        policy = self.sim.reconfig
        target = policy.target.filled()
        spec = self.sim.plan.spec
        gpu = spec.gpu_for(self.role)
        layout = resolve_layout(spec.model, self.role, target, gpu)
        if layout.world_size != self.spec.layout.world_size:
            raise OrchestrationError(
                f"layout switch must re-tile the same device group: "
                f"{self.spec.layout.world_size} -> {layout.world_size} GPUs")
        fidelity = self.sim.fidelity
        blocks = fidelity.block_budget(self.role, target, gpu)
        new_ctx = self.sim._cost_context(self.role, target, gpu)
        self.frozen_until = now + policy.cost_ns
        self.switch_ns = now
        for rep in self.replicas:
            rep.ctx = new_ctx
            pool = rep.sched.pool
            pool.resize(blocks)
            while pool.free < 0 and rep.sched.running:
                victim = rep.sched.running[-1]
                rep.sched._preempt(victim, None)
                self.fact(F_PREEMPT, now, victim.req,
                          min(victim.prefilled, victim.prompt))
            rep.sample_kv(now)
        self.draining = False
        for rep in self.replicas:
            self.kick(rep, now)

    # -- attention/FFN split iteration walk

    def _start_split_iteration(self, rep: ReplicaSim, now: int) -> None:
        plan = rep.sched.next_batch()
        self._route_preempted(plan, rep, now)
        if plan.size == 0:
            return
        self._stamp_admissions(plan, now)
        rep.busy = True
        rep.iterations += 1
        launch = batch_launch(plan, rep.ladder)
        mode = launch.mode if launch is not None else LAUNCH_INCLUSIVE
        width = plan.entries[0].tokens
        padded = launch.padded_slots if launch is not None else 0

        pp = rep.ctx.pp
        groups = split_microbatches(plan.entries, pp)
        mb_n = len(groups)
        base, rem = divmod(padded, mb_n)
        pads = [base + (1 if j < rem else 0) for j in range(mb_n)]
        attn_ns, mb_tokens, lm_ns = [], [], []
        for j, mb in enumerate(groups):
            attn_ns.append(microbatch_attention_ns(rep.ctx, mb, width, pads[j],
                                                   mode, rep.tally))
            tokens = sum(e.tokens for e in mb) + pads[j] * width
            mb_tokens.append(tokens)
            lm_ns.append(lm_head_ns(rep.ctx, float(tokens), mode, rep.tally))
        padded_tokens = padded * width
        rep.afd = AfdIteration(
            it=rep.iterations, plan=plan, mode=mode, start_ns=now,
            mb_tokens=mb_tokens, attn_ns=attn_ns, lm_ns=lm_ns,
            pending=mb_n, padded_tokens=padded_tokens)
        rep.padded_tokens += padded_tokens
        rep.useful_tokens += plan.total_tokens
        for j in range(mb_n):
            rep.attn_lanes[0].tasks.append(("attn", rep.afd.it, 0, j, 0))
        self._kick_attn_lane(rep, 0, now)

    def _layers_in_stage(self, s: int) -> int:
        return stage_layers(self.sim.plan.spec.model.layers, self.spec.layout.pp, s)

    def _kick_attn_lane(self, rep: ReplicaSim, s: int, now: int) -> None:
        lane = rep.attn_lanes[s]
        if lane.busy or not lane.tasks:
            return
        task = lane.tasks.popleft()
        lane.busy = True
        it = rep.afd
        dur = it.lm_ns[task[3]] if task[0] == "lm" else it.attn_ns[task[3]]
        self.driver.schedule(now + dur, EventKind.BATCH_STAGE_END,
                             (rep.idx, task))

    def _on_stage_end(self, ev: Event) -> None:
        rep_idx, task = ev.payload
        rep = self.replicas[rep_idx]
        now = ev.ts
        if self.role is Role.ATTENTION:
            kind, it_id, s, j, k = task
            lane = rep.attn_lanes[s]
            lane.busy = False
            if kind == "attn":
                f_rep = rep.idx % len(self.sim.clusters[Role.FFN].replicas)
                tokens = rep.afd.mb_tokens[j]
                self.out[(Role.FFN, ACTIVATION)].send(
                    EventKind.M2N_TRANSFER_START,
                    ("fwd", f_rep, rep.idx, it_id, s, j, k, tokens))
            else:  # lm tail: this microbatch is done
                rep.afd.pending -= 1
                if rep.afd.pending == 0:
                    self.driver.schedule(now, EventKind.GLOBAL_BATCH_END,
                                         (rep.idx,))
            self._kick_attn_lane(rep, s, now)
        else:  # FFN cluster lane finished a layer's expert block
            _, a_rep, _, it_id, s, j, k, tokens = task
            lane = rep.ffn_lanes[s]
            lane.busy = False
            self.out[(Role.ATTENTION, ACTIVATION)].send(
                EventKind.M2N_TRANSFER_START,
                ("back", a_rep, rep.idx, it_id, s, j, k, tokens))
            self._kick_ffn_lane(rep, s, now)

    def _on_m2n_start(self, ev: Event) -> None:
        payload = ev.payload
        rep = self.replicas[payload[1]]
        rep.inflight_m2n += 1
        src_role = Role.ATTENTION if payload[0] == "fwd" else Role.FFN
        link = self.in_links[(src_role, ACTIVATION)]
        nbytes = activation_bytes(self.sim.plan.spec.model, payload[7])
        dur = transfer_time(nbytes, link, rep.inflight_m2n)
        self.driver.schedule(ev.ts + dur, EventKind.M2N_TRANSFER_END, payload)

    def _on_m2n_end(self, ev: Event) -> None:
        tag, dst_rep, src_rep, it_id, s, j, k, tokens = ev.payload
        rep = self.replicas[dst_rep]
        rep.inflight_m2n -= 1
        now = ev.ts
        if tag == "fwd":
            rep.ffn_lanes[s].tasks.append(
                ("ffn", src_rep, rep.idx, it_id, s, j, k, tokens))
            self._kick_ffn_lane(rep, s, now)
            return
        # activation returned: the layer is complete on the attention side
        it = rep.afd
        if k + 1 < self._layers_in_stage(s):
            rep.attn_lanes[s].tasks.append(("attn", it_id, s, j, k + 1))
            self._kick_attn_lane(rep, s, now)
        elif s + 1 < self.spec.layout.pp:
            rep.attn_lanes[s + 1].tasks.append(("attn", it_id, s + 1, j, 0))
            self._kick_attn_lane(rep, s + 1, now)
        else:
            last = self.spec.layout.pp - 1
            rep.attn_lanes[last].tasks.append(("lm", it_id, last, j, 0))
            self._kick_attn_lane(rep, last, now)

    def _kick_ffn_lane(self, rep: ReplicaSim, s: int, now: int) -> None:
        lane = rep.ffn_lanes[s]
        if lane.busy or not lane.tasks:
            return
        task = lane.tasks.popleft()
        lane.busy = True
        _, src_rep, _, it_id, s, j, k, tokens = task
        model = self.sim.plan.spec.model
        counts = None
        if model.is_moe:
            key = (src_rep, it_id, s, j)
            matrix = rep.routing_cache.get(key)
            if matrix is None:
                seed = _mix(self.sim.seed, self.spec.index, rep.idx,
                            src_rep, it_id, s, j)
                matrix = route_tokens_moe(tokens, model.experts, model.top_k,
                                          self.sim.moe_routing, seed,
                                          layers=self._layers_in_stage(s))
                rep.routing_cache[key] = matrix
            counts = matrix[k]
            if k + 1 == self._layers_in_stage(s):
                rep.routing_cache.pop(key, None)
        mode = LAUNCH_INCLUSIVE  # expert blocks on the split path run eager
        pre, lane_ns, post = ffn_phase_times(rep.ctx, float(tokens), counts,
                                             mode, rep.tally)
        ep = rep.ctx.cfg.ep_ffn
        if counts is not None and ep > 1:
            barrier = EpSyncBarrier((it_id, s, j, k), ep,
                                    self.sim.plan.spec.runtime.delta_ep_ns)
            fire = None
            for lane_idx in range(ep):
                fire = barrier.report(lane_idx, now + pre + int(lane_ns[lane_idx]))
            self.driver.schedule(fire, EventKind.ALL_TO_ALL_COMBINE_READY,
                                 (rep.idx, task, fire + post))
        else:
            end = now + pre + int(lane_ns.max()) + post
            self.driver.schedule(end, EventKind.BATCH_STAGE_END, (rep.idx, task))

    def _on_combine_ready(self, ev: Event) -> None:
        rep_idx, task, end_ns = ev.payload
        self.driver.schedule(end_ns, EventKind.BATCH_STAGE_END, (rep_idx, task))

    def _finish_split_iteration(self, ev: Event) -> None:
        rep = self.replicas[ev.payload[0]]
        it = rep.afd
        rep.afd = None
        rep.busy = False
        now = ev.ts
        outcome = rep.sched.complete_batch(it.plan)
        rep.steps.append(StepLog(
            it.start_ns, now, rep.idx, it.plan.size, 0,
            it.plan.total_tokens, it.padded_tokens,
            it.mode != LAUNCH_INCLUSIVE))
        rep.sample_kv(now)
        if self.sim.keep_commit_times:
            for entry in it.plan.entries:
                self.fact(F_COMMIT, now, entry.state.req,
                          outcome.served.get(entry.state.req.rid, 0))
        for state in outcome.finished:
            self._on_round_finished(state, now)
        self.kick(rep, now)


class SimulationResult:
    """Everything a run produced, ready for metric folding."""

    def __init__(self, sim: "Simulation"):
        self.plan = sim.plan
        self.executor = sim.executor_name
        self.facts_by_cluster = {c.name: c.facts for c in sim.clusters.values()}
        self.records: dict[int, RoundRecord] = fold_facts(
            (c.facts for c in sim.clusters.values()),
            keep_commit_times=sim.keep_commit_times)
        self.step_logs = {
            f"{c.name}/r{r.idx}": r.steps
            for c in sim.clusters.values() for r in c.replicas}
        self.kv_timelines = {
            f"{c.name}/r{r.idx}": r.kv_samples
            for c in sim.clusters.values() for r in c.replicas
            if r.kv_samples}
        self.padded_tokens = sum(r.padded_tokens for c in sim.clusters.values()
                                 for r in c.replicas)
        self.useful_tokens = sum(r.useful_tokens for c in sim.clusters.values()
                                 for r in c.replicas)
        self.tallies: dict[str, BoundTally] = {}
        for c in sim.clusters.values():
            t = BoundTally()
            for r in c.replicas:
                t.merge(r.tally)
            self.tallies[c.name] = t
        self.prefix_hit_blocks = 0
        self.prefix_queried_blocks = 0
        for c in sim.clusters.values():
            for r in c.replicas:
                if r.sched is not None and r.sched.prefix is not None:
                    self.prefix_hit_blocks += r.sched.prefix.hit_blocks
                    self.prefix_queried_blocks += r.sched.prefix.queried_blocks
        self.events_created = sim.fabric.total_created
        self.events_processed = sim.fabric.total_processed
        self.switch_ns = next(
            (c.switch_ns for c in sim.clusters.values()
             if c.switch_ns is not None), None)
        self.preemptions = sum(
            r.sched.preempt_count for c in sim.clusters.values()
            for r in c.replicas if r.sched is not None)
        self.processed_logs = {
            c.name: c.driver.processed_log for c in sim.clusters.values()
        } if sim.log_events else {}

    def summarize(self, quantiles=(50, 95)):
        from .metrics import finalize
        return finalize(
            self.records,
            padded_tokens=self.padded_tokens,
            useful_tokens=self.useful_tokens,
            kv_timelines=self.kv_timelines,
            compute_bound_share={k: t.share for k, t in self.tallies.items()},
            quantiles=quantiles)

    def request_outputs(self) -> list[tuple]:
        """Canonical per-request tuples for determinism comparisons."""
        return [self.records[rid].as_tuple() for rid in sorted(self.records)]


class Simulation:
    """Build the fabric for one plan, inject a workload, and run it."""

    def __init__(self, plan: SimulationPlan, requests: list[Request] | None = None,
                 *, executor: str = "sequential", keep_commit_times: bool = False,
                 log_events: bool = False,
                 fidelity: FidelityPlane | None = None):
        self.plan = plan
        spec = plan.spec
        self.requests = build_requests(spec.workload) if requests is None else requests
        if not self.requests:
            raise OrchestrationError("nothing to simulate: no requests")
        self.executor_name = executor
        self.keep_commit_times = keep_commit_times
        self.log_events = log_events
        self.seed = spec.workload.seed
        self.tool_delay_ns = spec.workload.tool_delay_ns
        self.moe_routing = spec.runtime.moe_routing
        self.reconfig = spec.runtime.reconfig
        if self.reconfig is not None and spec.architecture is not Architecture.COLOCATED:
            raise OrchestrationError("layout switching runs on colocated clusters")
        self.fidelity = fidelity or FidelityPlane(spec.model, spec.runtime)

        self.fabric = EventFabric()
        self.clusters: dict[Role, ClusterSim] = {}
        for cspec in plan.clusters:
            driver = self.fabric.add_driver(cspec.role.value)
            self.clusters[cspec.role] = ClusterSim(self, cspec, driver)
        for ch in plan.channels:
            src, dst = self.clusters[ch.src], self.clusters[ch.dst]
            channel = self.fabric.add_channel(src.driver, dst.driver, ch.kind)
            src.out[(ch.dst, ch.kind)] = channel
            dst.in_links[(ch.src, ch.kind)] = ch.link
        self.fabric.seal()
        if log_events:
            for c in self.clusters.values():
                c.driver.processed_log = []

        for cluster in self.clusters.values():
            self._build_replicas(cluster)

        self.entry_cluster = self.clusters[ENTRY_ROLE[plan.architecture]]
        sessions = {r.session for r in self.requests}
        self.entry_cluster.total_sessions = len(sessions)
        self.entry_cluster.active_sessions = len(sessions)
        self.entry_cluster.rid_counter = 1 + max(r.rid for r in self.requests)

    def _cost_context(self, role: Role, cfg, gpu) -> CostContext:
        spec = self.plan.spec
        cfg = cfg.filled()
        return CostContext(
            model=spec.model,
            runtime=spec.runtime,
            cfg=cfg,
            predictors=self.fidelity.predictors_for(gpu),
            link=self.fidelity.link_for(gpu),
            stage_layers=stage_layers(spec.model.layers, cfg.pp, 0),
            total_layers=spec.model.layers,
        )

    def _build_replicas(self, cluster: ClusterSim) -> None:
        spec = self.plan.spec
        role = cluster.role
        cspec = cluster.spec
        ctx = self._cost_context(role, spec.roles[role], cspec.layout.gpu)
        rt = spec.runtime
        for idx in range(cspec.layout.replicas):
            if role is Role.FFN:
                rep = ReplicaSim(idx, None, ctx, None)
                rep.ffn_lanes = [StageLane() for _ in range(cspec.layout.pp)]
            else:
                pool = KvBlockPool(cspec.blocks_per_replica, rt.watermark)
                prefix = None
                if rt.prefix_cache:
                    prefix = PrefixCacheIndex(rt.block_tokens,
                                              rt.prefix_cache_capacity)
                sched = ReplicaScheduler(
                    rt, pool, prefix, spec.workload.seed,
                    decode_here=role in (Role.COLOCATED, Role.DECODE, Role.ATTENTION),
                    prefill_here=role in (Role.COLOCATED, Role.PREFILL))
                ladder = CaptureBinLadder(rt.capture_bins, rt.cuda_graph)
                rep = ReplicaSim(idx, sched, ctx, ladder)
                if role is Role.ATTENTION:
                    rep.attn_lanes = [StageLane() for _ in range(cspec.layout.pp)]
            cluster.replicas.append(rep)

    def run(self) -> SimulationResult:
        entry = self.entry_cluster
        for req in self.requests:
            self.fabric.inject(entry.driver, req.arrival_ns,
                               EventKind.REQUEST_ARRIVAL, req)
        make_executor(self.executor_name).run(self.fabric)
        return SimulationResult(self)


def run_simulation(spec: ServingSpec, *, executor: str = "sequential",
                   requests: list[Request] | None = None,
                   keep_commit_times: bool = False,
                   log_events: bool = False,
                   tables: dict | None = None) -> SimulationResult:
    """Compile, build, and run one scenario end to end."""
    fidelity = FidelityPlane(spec.model, spec.runtime, tables)
    plan = compile_plan(spec, fidelity)
    sim = Simulation(plan, requests, executor=executor,
                     keep_commit_times=keep_commit_times,
                     log_events=log_events, fidelity=fidelity)
    return sim.run()
