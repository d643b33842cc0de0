"""Deterministic discrete-event core.

Time is integer nanoseconds.  Each device-group cluster is driven by its own
event queue ordered by (timestamp, sequence); sequence numbers interleave a
per-creator counter with the creator's lane index, so they are unique and are
assigned identically no matter how drivers are interleaved.  Cross-cluster
traffic travels on directed channels: a send is delivered at sender-clock + 1 ns
and raises the channel's inbound time bound, which is the receiver's guarantee
that nothing earlier can still arrive.

Two executors share all of this machinery.  The sequential executor drains
drivers round-robin over one merged picture of the pending work; the threaded
executor runs one OS thread per cluster under a conservative-synchronization
monitor.  Both process, per cluster, the exact same event sequence, which is
what makes their outputs bit-identical.
"""

from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable

INFINITY = (1 << 63) - 1


class EngineError(RuntimeError):
    pass


class CausalityError(EngineError):
    """An event was scheduled in a driver's past."""


class EngineStallError(EngineError):
    """No driver can make progress but events remain pending."""


class EventKind(Enum):
    REQUEST_ARRIVAL = "request_arrival"
    SCHEDULER_TICK = "scheduler_tick"
    BATCH_STAGE_END = "batch_stage_end"
    GLOBAL_BATCH_END = "global_batch_end"
    KV_TRANSFER_START = "kv_transfer_start"
    KV_TRANSFER_END = "kv_transfer_end"
    M2N_TRANSFER_START = "m2n_transfer_start"
    M2N_TRANSFER_END = "m2n_transfer_end"
    ALL_TO_ALL_COMBINE_READY = "all_to_all_combine_ready"
    THINKING_REQUEUE = "thinking_requeue"
    LAYOUT_SWITCH = "layout_switch"


class Event:
    """One scheduled occurrence on a cluster's timeline."""

    __slots__ = ("ts", "cluster", "seq", "kind", "payload")

    def __init__(self, ts: int, cluster: int, seq: int, kind: EventKind, payload: Any):
        self.ts = ts
        self.cluster = cluster
        self.seq = seq
        self.kind = kind
        self.payload = payload

    def __repr__(self):
        return f"Event(t={self.ts}, cluster={self.cluster}, seq={self.seq}, {self.kind.value})"


class SequenceLane:
    """Deterministic unique sequence numbers: counter interleaved with lane index."""

    __slots__ = ("lane", "stride", "counter")

    def __init__(self, lane: int, stride: int):
        self.lane = lane
        self.stride = stride
        self.counter = 0

    def next(self) -> int:
        seq = self.counter * self.stride + self.lane
        self.counter += 1
        return seq


class ClusterDriver:
    """Per-cluster event queue, clock, and handler dispatch."""

    def __init__(self, index: int, name: str, lane: SequenceLane):
        self.index = index
        self.name = name
        self.lane = lane
        self.queue: list[tuple[int, int, Event]] = []
        self.clock = 0
        self.handler: Callable[["ClusterDriver", Event], None] | None = None
        self.inbound: list[Channel] = []
        self.outbound: list[Channel] = []
        self.created = 0
        self.processed = 0
        self.processed_log: list[tuple[int, str, int]] | None = None  # (ts, kind, seq)

    # scheduling -------------------------------------------------------------

    def schedule(self, ts: int, kind: EventKind, payload: Any = None) -> Event:
        """Schedule a local event; the timestamp may not precede the clock."""
        if ts < self.clock:
            raise CausalityError(
                f"{self.name}: event {kind.value} at t={ts} is before clock {self.clock}")
        ev = Event(ts, self.index, self.lane.next(), kind, payload)
        heapq.heappush(self.queue, (ev.ts, ev.seq, ev))
        self.created += 1
        return ev

    def _accept(self, ev: Event) -> None:
        heapq.heappush(self.queue, (ev.ts, ev.seq, ev))

    # safety -----------------------------------------------------------------

    def safe_bound(self) -> int:
        """Largest timestamp that no inbound channel can still undercut."""
        bound = INFINITY
        for ch in self.inbound:
            if ch.bound < bound:
                bound = ch.bound
        return bound

    def quiescent_floor(self) -> int:
        """Earliest timestamp this driver could still process, given what it knows."""
        head = self.queue[0][0] if self.queue else INFINITY
        safe = self.safe_bound()
        incoming = safe + 1 if safe < INFINITY else INFINITY
        return min(head, incoming)

    def _pop_safe(self, horizon: int) -> Event | None:
        if not self.queue:
            return None
        ts = self.queue[0][0]
        if ts > horizon or ts > self.safe_bound():
            return None
        return heapq.heappop(self.queue)[2]

    def _process(self, ev: Event) -> None:
        if ev.ts < self.clock:
            raise CausalityError(
                f"{self.name}: out-of-order processing at t={ev.ts} after {self.clock}")
        self.clock = ev.ts
        self.processed += 1
        if self.processed_log is not None:
            self.processed_log.append((ev.ts, ev.kind.value, ev.seq))
        if self.handler is None:
            raise EngineError(f"{self.name}: no handler installed")
        self.handler(self, ev)

    def advance(self, horizon: int) -> int:
        """Process every pending event that is safe and within the horizon.

        Returns the number processed.  Afterwards the clock rests at the last
        processed timestamp, or at min(horizon, safe bound) when nothing ran.
        """
        processed = 0
        while True:
            ev = self._pop_safe(horizon)
            if ev is None:
                break
            self._process(ev)
            processed += 1
        if processed == 0:
            rest = min(horizon, self.safe_bound())
            if self.clock < rest < INFINITY:
                self.clock = rest
        return processed


class Channel:
    """Directed cross-cluster edge with an inbound time lower bound.

    ``bound`` promises the receiver that every future delivery on this channel
    has a timestamp strictly greater than it.
    """

    __slots__ = ("index", "src", "dst", "kind", "bound")

    def __init__(self, index: int, src: ClusterDriver, dst: ClusterDriver, kind: str):
        self.index = index
        self.src = src
        self.dst = dst
        self.kind = kind
        self.bound = 0
        src.outbound.append(self)
        dst.inbound.append(self)

    def send(self, kind: EventKind, payload: Any = None) -> Event:
        """Deliver an event to the destination at sender-clock + 1 ns."""
        ts = self.src.clock + 1
        ev = Event(ts, self.dst.index, self.src.lane.next(), kind, payload)
        self.src.created += 1
        self.dst._accept(ev)
        if self.src.clock > self.bound:
            self.bound = self.src.clock
        return ev

    def raise_bound(self, value: int) -> bool:
        if value > self.bound:
            self.bound = value
            return True
        return False


class EventFabric:
    """Drivers, channels, and the sequence-lane allocator for one simulation."""

    def __init__(self):
        self.drivers: list[ClusterDriver] = []
        self.channels: list[Channel] = []
        self._stride = 0
        self.source_lane: SequenceLane | None = None

    def add_driver(self, name: str) -> ClusterDriver:
        if self.source_lane is not None:
            raise EngineError("drivers must be added before sealing the fabric")
        d = ClusterDriver(len(self.drivers), name, SequenceLane(0, 0))
        self.drivers.append(d)
        return d

    def add_channel(self, src: ClusterDriver, dst: ClusterDriver, kind: str) -> Channel:
        ch = Channel(len(self.channels), src, dst, kind)
        self.channels.append(ch)
        return ch

    def seal(self) -> None:
        """Fix lane stride once the driver set is final."""
        self._stride = len(self.drivers) + 1
        for d in self.drivers:
            d.lane.lane = d.index
            d.lane.stride = self._stride
        self.source_lane = SequenceLane(len(self.drivers), self._stride)

    def inject(self, driver: ClusterDriver, ts: int, kind: EventKind, payload: Any) -> None:
        """Pre-seed an event from outside any driver (arrival streams)."""
        if self.source_lane is None:
            raise EngineError("fabric must be sealed before injection")
        ev = Event(ts, driver.index, self.source_lane.next(), kind, payload)
        driver._accept(ev)

    @property
    def total_created(self) -> int:
        injected = self.source_lane.counter if self.source_lane else 0
        return injected + sum(d.created for d in self.drivers)

    @property
    def total_processed(self) -> int:
        return sum(d.processed for d in self.drivers)

    @property
    def pending(self) -> int:
        return sum(len(d.queue) for d in self.drivers)

    def promise_fixed_point(self) -> None:
        """Raise every channel bound to the least fixed point of

            floor(d) = min(local queue head,
                           min over inbound channels of floor(src) + 1)

        computed as single-source shortest paths from the queued events
        (every channel hop adds at least 1 ns).  Seeding from real work is
        what lets an idle channel cycle settle at INFINITY outright instead
        of ratcheting its bounds up one nanosecond per pass.  Any event a
        driver processes from here on has ts >= floor(driver), so deliveries
        it emits land strictly later, which is exactly the channel promise.
        """
        dist = [INFINITY] * len(self.drivers)
        heap: list[tuple[int, int]] = []
        for d in self.drivers:
            if d.queue:
                head = d.queue[0][0]
                dist[d.index] = head
                heapq.heappush(heap, (head, d.index))
        while heap:
            floor, i = heapq.heappop(heap)
            if floor > dist[i]:
                continue
            for ch in self.drivers[i].outbound:
                j = ch.dst.index
                if floor + 1 < dist[j]:
                    dist[j] = floor + 1
                    heapq.heappush(heap, (floor + 1, j))
        for d in self.drivers:
            for ch in d.outbound:
                ch.raise_bound(dist[d.index])


class SequentialExecutor:
    """Round-robin driver drain over one merged view of the pending work."""

    name = "sequential"

    def run(self, fabric: EventFabric) -> None:
        drivers = fabric.drivers
        while True:
            fabric.promise_fixed_point()
            progressed = 0
            for d in drivers:
                progressed += d.advance(INFINITY)
            if progressed:
                continue
            if fabric.pending == 0:
                return
            raise EngineStallError(
                f"{fabric.pending} events pending but no driver can advance")


class ThreadedExecutor:
    """One thread per cluster under a conservative-synchronization monitor."""

    name = "threaded"

    def run(self, fabric: EventFabric) -> None:
        monitor = threading.Condition()
        state = {"stop": False, "error": None, "waiting": 0}
        n = len(fabric.drivers)

        def loop(driver: ClusterDriver) -> None:
            try:
                while True:
                    # pop and process under one acquisition: a popped event that
                    # has not yet run must never be visible to bound propagation
                    with monitor:
                        ev = None
                        while ev is None:
                            if state["stop"] or state["error"]:
                                return
                            ev = driver._pop_safe(INFINITY)
                            if ev is not None:
                                break
                            state["waiting"] += 1
                            if state["waiting"] == n:
                                # last one awake settles the global fixed point
                                fabric.promise_fixed_point()
                                can_run = any(
                                    d.queue and d.queue[0][0] <= d.safe_bound()
                                    for d in fabric.drivers)
                                if can_run:
                                    monitor.notify_all()
                                elif fabric.pending == 0:
                                    state["stop"] = True
                                    monitor.notify_all()
                                else:
                                    state["error"] = EngineStallError(
                                        f"{fabric.pending} events pending but all "
                                        f"drivers are blocked")
                                    monitor.notify_all()
                            if not (state["stop"] or state["error"]):
                                monitor.wait()
                            state["waiting"] -= 1
                        driver._process(ev)
                        monitor.notify_all()
            except BaseException as exc:  # surface handler failures to the caller
                with monitor:
                    if state["error"] is None:
                        state["error"] = exc
                    monitor.notify_all()

        threads = [threading.Thread(target=loop, args=(d,), name=d.name, daemon=True)
                   for d in fabric.drivers]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if state["error"] is not None:
            raise state["error"]


EXECUTORS = {
    "sequential": SequentialExecutor,
    "threaded": ThreadedExecutor,
}


def make_executor(name: str):
    try:
        return EXECUTORS[name]()
    except KeyError:
        raise EngineError(f"unknown executor {name!r}; choose from {sorted(EXECUTORS)}") from None
