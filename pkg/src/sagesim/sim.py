"""Deterministic discrete-event core: queue, trace, stats, telemetry.

Simulated time is integer microseconds. Simultaneous events execute in
schedule order via a monotone sequence number, so a run is a total order
and its SHA-256 trace hash is a replay witness: equal seeds, topology and
workload produce equal hashes.
"""

from __future__ import annotations

import copy
import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Callable

from .errors import LivelockDetected

DEFAULT_LIVELOCK_BOUND = 10_000_000


class NodeCrashInterrupt(Exception):
    """Control flow only: a crash trigger fired inside a node's handler."""

    def __init__(self, node_id: str):
        super().__init__(node_id)
        self.node_id = node_id


@dataclass(order=True)
class Event:
    time: int
    seq: int
    kind: str = field(compare=False)
    fn: Callable[[], None] = field(compare=False, repr=False)
    owner: str | None = field(compare=False, default=None)
    guard: str | None = field(compare=False, default=None)  # "cont" | "delivery"
    owner_epoch: int = field(compare=False, default=0)
    info: dict = field(compare=False, default_factory=dict)


class Trace:
    """Append-only record of everything that happened, with a running hash."""

    def __init__(self, keep_entries: bool = True):
        self._sha = hashlib.sha256()
        self.entries: list[dict] = []
        self.keep = keep_entries

    def add(self, kind: str, time: int, **info):
        entry = {"k": kind, "t": time, **info}
        self._sha.update(json.dumps(entry, sort_keys=True, separators=(",", ":")).encode())
        self._sha.update(b"\n")
        if self.keep:
            self.entries.append(entry)

    def digest(self) -> str:
        return self._sha.hexdigest()


@dataclass
class TierStats:
    bytes_read: int = 0
    bytes_written: int = 0
    used_blocks: int = 0
    capacity_blocks: int = 0


@dataclass
class StatsSnapshot:
    tiers: dict[int, TierStats]
    network_bytes: int
    op_counts: dict[str, int]
    tx_committed: int
    tx_aborted: int
    lost_units: int
    wal_appends: int
    sim_time_us: int

    def to_json(self) -> dict:
        return {
            "tiers": {
                str(t): {
                    "bytes_read": s.bytes_read,
                    "bytes_written": s.bytes_written,
                    "used_blocks": s.used_blocks,
                    "capacity_blocks": s.capacity_blocks,
                }
                for t, s in sorted(self.tiers.items())
            },
            "network_bytes": self.network_bytes,
            "op_counts": dict(sorted(self.op_counts.items())),
            "tx_counts": {"committed": self.tx_committed, "aborted": self.tx_aborted},
            "lost_units": self.lost_units,
            "wal_appends": self.wal_appends,
            "sim_time_us": self.sim_time_us,
        }


class Stats:
    def __init__(self, tier_capacities: dict[int, int]):
        self.tiers = {t: TierStats(capacity_blocks=c) for t, c in sorted(tier_capacities.items())}
        self.network_bytes = 0
        self.op_counts: dict[str, int] = {}
        self.tx_committed = 0
        self.tx_aborted = 0
        self.lost_units = 0
        self.wal_appends = 0

    def count_op(self, kind: str):
        self.op_counts[kind] = self.op_counts.get(kind, 0) + 1

    def snapshot(self, sim_time_us: int) -> StatsSnapshot:
        return StatsSnapshot(
            tiers=copy.deepcopy(self.tiers),
            network_bytes=self.network_bytes,
            op_counts=dict(self.op_counts),
            tx_committed=self.tx_committed,
            tx_aborted=self.tx_aborted,
            lost_units=self.lost_units,
            wal_appends=self.wal_appends,
            sim_time_us=sim_time_us,
        )


@dataclass
class TelemetryRecord:
    time_us: int
    subsystem: str
    event: str
    kv: dict

    def to_json(self):
        return {"time_us": self.time_us, "subsystem": self.subsystem,
                "event": self.event, "kv": self.kv}


class Telemetry:
    def __init__(self):
        self.records: list[TelemetryRecord] = []

    def emit(self, time_us: int, subsystem: str, event: str, **kv):
        self.records.append(TelemetryRecord(time_us, subsystem, event, kv))

    def dump(self, subsystem_prefix: str = "", event_prefix: str = "") -> list[TelemetryRecord]:
        return [r for r in self.records
                if r.subsystem.startswith(subsystem_prefix)
                and r.event.startswith(event_prefix)]


class EventLoop:
    """Single-threaded priority queue over (time, seq)."""

    def __init__(self, trace: Trace, livelock_bound: int = DEFAULT_LIVELOCK_BOUND):
        self.now = 0
        self._seq = 0
        self._heap: list[Event] = []
        self.trace = trace
        self.livelock_bound = livelock_bound
        # liveness oracle installed by the cluster: (owner, guard, epoch) -> bool
        self.can_run: Callable[[Event], bool] = lambda ev: True
        self.processed = 0

    def schedule(self, delay_us: int, kind: str, fn: Callable[[], None],
                 owner: str | None = None, guard: str | None = None,
                 owner_epoch: int = 0, info: dict | None = None) -> Event:
        assert delay_us >= 0
        self._seq += 1
        ev = Event(time=self.now + delay_us, seq=self._seq, kind=kind, fn=fn,
                   owner=owner, guard=guard, owner_epoch=owner_epoch,
                   info=info or {})
        heapq.heappush(self._heap, ev)
        return ev

    @property
    def pending(self) -> int:
        return len(self._heap)

    def _execute(self, ev: Event):
        self.now = ev.time
        if ev.owner is not None and not self.can_run(ev):
            self.trace.add("drop", ev.time, q=ev.seq, ek=ev.kind, owner=ev.owner, **ev.info)
            return
        self.trace.add("ev", ev.time, q=ev.seq, ek=ev.kind, **ev.info)
        try:
            ev.fn()
        except NodeCrashInterrupt as exc:
            self.trace.add("crash-interrupt", self.now, node=exc.node_id, ek=ev.kind)

    def peek_time(self) -> int | None:
        return self._heap[0].time if self._heap else None

    def run_one(self) -> bool:
        """Execute the single next event; False when the queue is empty."""
        if not self._heap:
            return False
        self._execute(heapq.heappop(self._heap))
        self.processed += 1
        return True

    def run(self, *, quiescent: bool = False, until_time: int | None = None,
            predicate: Callable[[], bool] | None = None,
            max_events: int | None = None):
        bound = max_events if max_events is not None else self.livelock_bound
        executed = 0
        while True:
            if predicate is not None and predicate():
                return
            if not self._heap:
                if until_time is not None:
                    self.now = max(self.now, until_time)
                if predicate is not None:
                    raise LivelockDetected(reason="event queue drained before predicate held")
                return
            if until_time is not None and self._heap[0].time > until_time:
                self.now = until_time
                return
            ev = heapq.heappop(self._heap)
            self._execute(ev)
            executed += 1
            self.processed += 1
            if executed > bound:
                raise LivelockDetected(events=executed)
