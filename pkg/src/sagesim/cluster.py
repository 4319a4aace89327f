"""Simulated cluster substrate: nodes, devices, WALs, network, failures.

All cluster state is owned by the single-threaded event loop. A node crash
clears volatile state; its WAL records and device blocks survive. A device
failure is permanent and loses the blocks. Higher subsystems (dtm, ha,
hsm, shipping) register message handlers here and never touch sockets or
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .catalog import Catalog
from .errors import (
    CapacityExceeded,
    DeviceFailed,
    InvalidTopology,
    NodeCrashed,
    UnknownTarget,
)
from .ids import EntityId, EntityKind, IdAllocator
from .layout import TierSpec
from .okv import OrderedKV
from .sim import EventLoop, NodeCrashInterrupt, Stats, StatsSnapshot, Telemetry, Trace

ONLINE = "ONLINE"
FAILED = "FAILED"
CRASHED = "CRASHED"
RECOVERING = "RECOVERING"

_MSG_OVERHEAD = 32  # framing/header bytes charged per message


@dataclass(frozen=True)
class NetworkSpec:
    latency_us: int
    bandwidth_bps: int


@dataclass(frozen=True)
class ClusterTopology:
    seed: int
    tiers: tuple[TierSpec, ...]
    nodes: tuple[tuple[str, tuple[tuple[int, int], ...]], ...]
    network: NetworkSpec

    def validate(self):
        if not self.nodes:
            raise InvalidTopology("at least one node (the coordinator) is required")
        tier_ids = [t.tier_id for t in self.tiers]
        if len(set(tier_ids)) != len(tier_ids):
            raise InvalidTopology("duplicate tier_id")
        for t in self.tiers:
            t.validate()
        ordered = sorted(self.tiers, key=lambda t: t.tier_id)
        for a, b in zip(ordered, ordered[1:]):
            if not (a.latency_us < b.latency_us and a.bandwidth_bps > b.bandwidth_bps):
                raise InvalidTopology(
                    f"tier {a.tier_id} must be strictly faster than tier {b.tier_id}")
        by_tier = {t.tier_id: t for t in self.tiers}
        node_ids = [n for n, _ in self.nodes]
        if len(set(node_ids)) != len(node_ids):
            raise InvalidTopology("duplicate node_id")
        seen: set[tuple[int, int]] = set()
        for node_id, devs in self.nodes:
            for tier, idx in devs:
                if tier not in by_tier:
                    raise InvalidTopology(f"node {node_id} references unknown tier {tier}")
                if not 0 <= idx < by_tier[tier].device_count:
                    raise InvalidTopology(f"device index {idx} out of range for tier {tier}")
                if (tier, idx) in seen:
                    raise InvalidTopology(f"device ({tier},{idx}) attached to two nodes")
                seen.add((tier, idx))
        want = {(t.tier_id, i) for t in self.tiers for i in range(t.device_count)}
        if seen != want:
            missing = sorted(want - seen)[:3]
            raise InvalidTopology(f"devices not attached to any node, e.g. {missing}")

    @property
    def coordinator(self) -> str:
        return self.nodes[0][0]


class UnitStore:
    """Blocks of one placement unit on one device."""

    __slots__ = ("nblocks", "base", "blocks")

    def __init__(self, nblocks: int, base: int):
        self.nblocks = nblocks
        self.base = base
        self.blocks: dict[int, bytes] = {}


class Device:
    def __init__(self, tier: TierSpec, index: int, node_id: str):
        self.tier = tier
        self.tier_id = tier.tier_id
        self.index = index
        self.node_id = node_id
        self.status = ONLINE
        self.used = 0
        self.units: dict[tuple, UnitStore] = {}
        self._cursor = 0  # bump allocator for reported block ranges

    @property
    def capacity(self) -> int:
        return self.tier.device_capacity

    @property
    def free_blocks(self) -> int:
        return self.capacity - self.used

    def allocate(self, unit_key: tuple, nblocks: int) -> UnitStore:
        unit = self.units.get(unit_key)
        if unit is not None:  # idempotent re-apply
            return unit
        if self.used + nblocks > self.capacity:
            raise CapacityExceeded(device=(self.tier_id, self.index),
                                   need=nblocks, free=self.free_blocks)
        unit = UnitStore(nblocks, self._cursor)
        self._cursor += nblocks
        self.used += nblocks
        self.units[unit_key] = unit
        return unit

    def free(self, unit_key: tuple) -> int:
        unit = self.units.pop(unit_key, None)
        if unit is None:
            return 0
        self.used -= unit.nblocks
        return unit.nblocks


class NodeVolatile:
    """Everything a node forgets when it crashes."""

    def __init__(self):
        self.catalog: Catalog | None = None      # coordinator only
        self.indexes: dict[EntityId, OrderedKV] = {}
        self.prepared: dict[int, dict] = {}       # txid -> {"coordinator", "updates"}
        self.applied: set[int] = set()
        self.aborted: set[int] = set()
        self.outcomes: dict[int, str] = {}        # coordinator: txid -> COMMITTED/ABORTED
        self.tx_meta: dict[int, dict] = {}        # coordinator: txid -> protocol state
        self.epochs_closed: int = 0
        self.recovery_report: dict | None = None


@dataclass
class WalRecord:
    lsn: int
    kind: str
    txid: int | None = None
    payload: dict = field(default_factory=dict)


class Node:
    def __init__(self, node_id: str, devices: list[Device], fsync_us: int):
        self.node_id = node_id
        self.status = ONLINE
        self.epoch = 0  # bumped on crash and restart; guards stale continuations
        self.devices = devices
        self.fsync_us = fsync_us
        self.wal: list[WalRecord] = []
        self.next_lsn = 1
        self.volatile = NodeVolatile()

    @property
    def up(self) -> bool:
        return self.status in (ONLINE, RECOVERING)


def wire_size(payload) -> int:
    """Deterministic serialized-size estimate used for network accounting."""
    if payload is None or isinstance(payload, bool):
        return 1
    if isinstance(payload, (bytes, bytearray, memoryview)):
        return len(payload)
    if isinstance(payload, str):
        return len(payload.encode())
    if isinstance(payload, (int, float)):
        return 8
    if isinstance(payload, (list, tuple)):
        return 2 + sum(wire_size(v) for v in payload)
    if isinstance(payload, dict):
        return 2 + sum(len(str(k)) + wire_size(v) for k, v in payload.items())
    raise TypeError(f"unsizable payload {type(payload)}")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def transfer_us(nbytes: int, bandwidth_bps: int) -> int:
    """Transfer time; division rounds up so it is integral and monotone."""
    if nbytes == 0:
        return 0
    return _ceil_div(nbytes * 1_000_000, bandwidth_bps)


class SageCluster:
    """Composition root: substrate plus the subsystems attached onto it."""

    def __init__(self, topology: ClusterTopology, keep_trace: bool = True):
        topology.validate()
        self.topology = topology
        self.seed = topology.seed
        self.trace = Trace(keep_entries=keep_trace)
        self.loop = EventLoop(self.trace)
        self.loop.can_run = self._can_run
        self.telemetry = Telemetry()
        self.ids = IdAllocator()
        self.tiers = {t.tier_id: t for t in topology.tiers}
        self.stats = Stats({t.tier_id: t.device_count * t.device_capacity
                            for t in topology.tiers})

        self.devices: dict[tuple[int, int], Device] = {}
        self.nodes: dict[str, Node] = {}
        for node_id, devs in topology.nodes:
            dev_objs = []
            for tier, idx in devs:
                d = Device(self.tiers[tier], idx, node_id)
                self.devices[(tier, idx)] = d
                dev_objs.append(d)
            fsync = min((d.tier.latency_us for d in dev_objs), default=10)
            self.nodes[node_id] = Node(node_id, dev_objs, fsync)
        self.coordinator_id = topology.coordinator

        self.handlers: dict[str, object] = {}
        self._link_free: dict[tuple[str, str], int] = {}
        self._wal_counts: dict[str, int] = {n: 0 for n in self.nodes}
        self._wal_kind_counts: dict[tuple[str, str], int] = {}
        self._msg_counts: dict[str, int] = {n: 0 for n in self.nodes}
        self._crash_triggers: list[dict] = []
        self.invocation_bytes: dict[str, int] = {}
        self.on_failure_event = None  # installed by the HA subsystem

        # root realm bootstrap, journaled so coordinator replay rebuilds it
        self.root_realm = self.ids.generate(EntityKind.REALM)
        boot_payload = {"bootstrap_realm": self.root_realm.to_json()}
        self.wal_append(self.coordinator_id, "CONFIG", payload=boot_payload)
        self.apply_config_record(self.nodes[self.coordinator_id],
                                 WalRecord(0, "CONFIG", None, boot_payload))
        self.telemetry.emit(0, "cluster", "boot",
                            nodes=len(self.nodes), devices=len(self.devices))

    # -- liveness ------------------------------------------------------------

    def _can_run(self, ev) -> bool:
        node = self.nodes.get(ev.owner)
        if node is None:
            return True
        if ev.guard == "delivery":
            return node.up
        if ev.guard == "cont":
            return node.up and node.epoch == ev.owner_epoch
        return True

    def node(self, node_id: str) -> Node:
        node = self.nodes.get(node_id)
        if node is None:
            raise UnknownTarget(node=node_id)
        return node

    def device(self, tier: int, idx: int) -> Device:
        dev = self.devices.get((tier, idx))
        if dev is None:
            raise UnknownTarget(device=(tier, idx))
        return dev

    @property
    def now(self) -> int:
        return self.loop.now

    # -- catalog access (lives in coordinator volatile state) -----------------

    def catalog_node(self) -> Node:
        return self.nodes[self.coordinator_id]

    def catalog(self) -> Catalog:
        vol = self.catalog_node().volatile
        if vol.catalog is None:
            vol.catalog = Catalog()
        return vol.catalog

    def apply_config_record(self, node: Node, rec: WalRecord):
        """CONFIG records: cluster bootstrap and HA config journal entries."""
        boot = rec.payload.get("bootstrap_realm")
        if boot and node.node_id == self.coordinator_id:
            from .catalog import RealmRecord  # local import avoids cycle at module load
            vol = node.volatile
            if vol.catalog is None:
                vol.catalog = Catalog()
            realm = RealmRecord(id=EntityId.from_json(boot), parent=None)
            vol.catalog.entities[realm.id] = realm

    # -- write-ahead log -------------------------------------------------------

    def wal_append(self, node_id: str, kind: str, txid: int | None = None,
                   payload: dict | None = None) -> int:
        node = self.node(node_id)
        if node.status == CRASHED:
            raise NodeCrashed(node=node_id)
        lsn = node.next_lsn
        node.next_lsn += 1
        node.wal.append(WalRecord(lsn, kind, txid, payload or {}))
        self.stats.wal_appends += 1
        self.trace.add("wal", self.now, node=node_id, lsn=lsn, rk=kind,
                       tx=format(txid, "x") if txid is not None else None)
        self._wal_counts[node_id] += 1
        key = (node_id, kind)
        self._wal_kind_counts[key] = self._wal_kind_counts.get(key, 0) + 1
        self._check_trigger("wal", node_id, self._wal_counts[node_id])
        self._check_trigger("wal-kind", key, self._wal_kind_counts[key])
        return lsn

    def wal_replay(self, node_id: str) -> list[WalRecord]:
        """All records in lsn order; available regardless of node status."""
        return list(self.node(node_id).wal)

    def after_fsync(self, node_id: str, kind: str, fn):
        """Run fn after the WAL append's simulated fsync cost."""
        node = self.node(node_id)
        self.loop.schedule(node.fsync_us, kind, fn, owner=node_id,
                           guard="cont", owner_epoch=node.epoch)

    # -- network ----------------------------------------------------------------

    def send(self, src: str | None, dst: str, kind: str, payload: dict,
             invocation: str | None = None):
        """Reliable FIFO message; delivered unless dst is down at delivery."""
        self.node(dst)
        nbytes = wire_size(payload) + _MSG_OVERHEAD
        if src == dst:
            delay = 0
        else:
            link = (src or "@client", dst)
            net = self.topology.network
            depart = max(self.now, self._link_free.get(link, 0))
            tx = transfer_us(nbytes, net.bandwidth_bps)
            self._link_free[link] = depart + tx
            delay = depart + tx + net.latency_us - self.now
            self.stats.network_bytes += nbytes
            if invocation is not None:
                self.invocation_bytes[invocation] = (
                    self.invocation_bytes.get(invocation, 0) + nbytes)

        def deliver():
            node = self.nodes[dst]
            self._msg_counts[dst] += 1
            self._check_trigger("msg", dst, self._msg_counts[dst])
            handler = self.handlers.get(kind)
            if handler is None:
                raise KeyError(f"no handler for message kind {kind!r}")
            handler(src, dst, payload)

        self.loop.schedule(delay, f"msg:{kind}", deliver, owner=dst,
                           guard="delivery",
                           info={"src": src or "@client", "dst": dst, "b": nbytes})

    def send_to_client(self, src: str, kind: str, payload: dict, fn,
                       invocation: str | None = None):
        """Network-accounted response from a node to the client runtime."""
        nbytes = wire_size(payload) + _MSG_OVERHEAD
        link = (src, "@client")
        net = self.topology.network
        depart = max(self.now, self._link_free.get(link, 0))
        tx = transfer_us(nbytes, net.bandwidth_bps)
        self._link_free[link] = depart + tx
        delay = depart + tx + net.latency_us - self.now
        self.stats.network_bytes += nbytes
        if invocation is not None:
            self.invocation_bytes[invocation] = (
                self.invocation_bytes.get(invocation, 0) + nbytes)
        self.loop.schedule(delay, f"msg:{kind}", lambda: fn(payload),
                           info={"src": src, "dst": "@client", "b": nbytes})

    # -- device I/O ---------------------------------------------------------------

    def io_submit(self, device: tuple[int, int], op: str, nbytes: int, fn,
                  client_owned: bool = False):
        """Schedule an I/O completion; fn(ok) runs on the device's node.

        Client-owned completions survive a crash of the device's node (the
        caller is the crash-immune client runtime) but then report ok=False.
        """
        dev = self.device(*device)
        if dev.status == FAILED:
            raise DeviceFailed(device=device)
        node = self.nodes[dev.node_id]
        if not node.up:
            raise NodeCrashed(node=dev.node_id)
        delay = dev.tier.latency_us + transfer_us(nbytes, dev.tier.bandwidth_bps)

        def complete():
            ok = dev.status != FAILED and (not client_owned or self.nodes[dev.node_id].up)
            if ok:
                ts = self.stats.tiers[dev.tier_id]
                if op == "read":
                    ts.bytes_read += nbytes
                else:
                    ts.bytes_written += nbytes
                self.trace.add("io", self.now, tier=dev.tier_id, dev=dev.index,
                               op=op, b=nbytes)
            fn(ok)

        owner = None if client_owned else dev.node_id
        self.loop.schedule(delay, f"io:{op}", complete, owner=owner,
                           guard="cont", owner_epoch=node.epoch,
                           info={"tier": dev.tier_id, "dev": dev.index,
                                 "op": op, "b": nbytes})

    def alloc_unit(self, device: tuple[int, int], unit_key: tuple, nblocks: int):
        dev = self.device(*device)
        if dev.status == FAILED:
            raise DeviceFailed(device=device)
        fresh = unit_key not in dev.units
        dev.allocate(unit_key, nblocks)
        if fresh:
            self.stats.tiers[dev.tier_id].used_blocks += nblocks
            self.trace.add("alloc", self.now, tier=dev.tier_id, dev=dev.index,
                           blocks=nblocks)

    def free_unit(self, device: tuple[int, int], unit_key: tuple):
        dev = self.device(*device)
        freed = dev.free(unit_key)
        if freed:
            self.stats.tiers[dev.tier_id].used_blocks -= freed
            self.trace.add("dealloc", self.now, tier=dev.tier_id, dev=dev.index,
                           blocks=freed)

    # -- failures -------------------------------------------------------------------

    def _check_trigger(self, kind: str, key, count: int):
        for trig in self._crash_triggers:
            if (not trig["fired"] and trig["kind"] == kind
                    and trig["key"] == key and trig["nth"] == count):
                trig["fired"] = True
                node_id = key if isinstance(key, str) else key[0]
                self.crash_node(node_id, reason=f"trigger-{kind}-{count}")
                raise NodeCrashInterrupt(node_id)

    def arm_crash_trigger(self, node_id: str, kind: str, nth: int,
                          record_kind: str | None = None):
        """Crash the node deterministically at its nth WAL append or message
        delivery; with record_kind, at its nth append of that WAL record kind
        (e.g. the 3rd PREPARED)."""
        self.node(node_id)
        if kind not in ("wal", "msg"):
            raise ValueError(kind)
        if record_kind is not None:
            if kind != "wal":
                raise ValueError("record_kind applies to wal triggers only")
            self._crash_triggers.append({"key": (node_id, record_kind),
                                         "kind": "wal-kind", "nth": nth,
                                         "fired": False})
        else:
            self._crash_triggers.append({"key": node_id, "kind": kind,
                                         "nth": nth, "fired": False})

    def inject_failure(self, *, node: str | None = None,
                       device: tuple[int, int] | None = None,
                       at_time: int | None = None):
        """Schedule a crash (node) or permanent failure (device)."""
        if (node is None) == (device is None):
            raise UnknownTarget(reason="exactly one of node/device required")
        if node is not None:
            self.node(node)
            fn = lambda: self.crash_node(node, reason="injected")
            info = {"target": node}
        else:
            self.device(*device)
            fn = lambda: self.fail_device(*device)
            info = {"target": list(device)}
        delay = 0 if at_time is None else max(0, at_time - self.now)
        self.loop.schedule(delay, "fault-injection", fn, info=info)

    def _emit_failure_event(self, kind: str, target):
        self.trace.add("failure", self.now, fk=kind, target=target)
        self.telemetry.emit(self.now, "cluster", f"failure.{kind.lower()}", target=target)
        if self.on_failure_event is not None:
            cb = self.on_failure_event
            time = self.now
            self.loop.schedule(0, f"ha-event:{kind}",
                               lambda: cb(kind, target, time))

    def crash_node(self, node_id: str, reason: str = ""):
        node = self.node(node_id)
        if node.status == CRASHED:
            return
        node.status = CRASHED
        node.epoch += 1
        node.volatile = NodeVolatile()
        self.trace.add("node-crash", self.now, node=node_id, reason=reason)
        self._emit_failure_event("CRASH", node_id)

    def fail_device(self, tier: int, idx: int):
        dev = self.device(tier, idx)
        if dev.status == FAILED:
            return
        dev.status = FAILED
        wiped = dev.used
        for key in list(dev.units):
            dev.free(key)
        self.stats.tiers[tier].used_blocks -= wiped
        self.trace.add("device-fail", self.now, tier=tier, dev=idx, wiped_blocks=wiped)
        self._emit_failure_event("DEVICE_FAIL", [tier, idx])

    def restart_node(self, node_id: str):
        node = self.node(node_id)
        if node.status != CRASHED:
            raise UnknownTarget(node=node_id, reason="restart requires a crashed node")
        node.status = RECOVERING
        node.epoch += 1
        node.volatile = NodeVolatile()
        self.trace.add("node-restart", self.now, node=node_id)
        self._emit_failure_event("RESTART", node_id)

    # -- run / observe -------------------------------------------------------------

    def run_until(self, *, quiescent: bool = False, until_time: int | None = None,
                  predicate=None, max_events: int | None = None) -> StatsSnapshot:
        self.loop.run(quiescent=quiescent, until_time=until_time,
                      predicate=predicate, max_events=max_events)
        return self.snapshot()

    def snapshot(self) -> StatsSnapshot:
        return self.stats.snapshot(self.now)

    def online_devices(self, tier_id: int) -> list[int]:
        """Devices usable for new placements: ONLINE and on an up node."""
        return sorted(d.index for d in self.devices.values()
                      if d.tier_id == tier_id and d.status == ONLINE
                      and self.nodes[d.node_id].up)

    def trace_hash(self) -> str:
        return self.trace.digest()

    def config_version(self) -> int:
        ha = getattr(self, "ha", None)
        return ha.version if ha is not None else 0
