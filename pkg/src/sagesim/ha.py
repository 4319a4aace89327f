"""HA subsystem: versioned cluster configuration, failure events, and
automated repair.

Failure events arrive from the substrate in simulated-time order. A device
failure enqueues a repair for every placement unit that lived on it; each
repair copies from a surviving replica or reconstructs from parity, writes
the unit to a freshly chosen device (same tier when capacity allows, one
tier down otherwise, flagged as degraded) and swaps the placement inside
one transaction. Units whose redundancy cannot cover the loss are marked
LOST in stats, never silently dropped.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from . import erasure
from .catalog import ObjectRecord
from .errors import NoEligibleDevice, SageError
from .ids import EntityId
from .layout import Extent, Layout, Replication, extent_units, make_unit_key
from .placement import place_unit

_MAX_REPAIR_ATTEMPTS = 3


@dataclass
class FailureEvent:
    time_us: int
    kind: str  # CRASH | DEVICE_FAIL | RESTART
    target: object  # node_id or [tier, index]


@dataclass
class RepairItem:
    obj: EntityId
    extent_index: int
    gen: int
    stripe: int
    role: tuple[str, int]
    old_device: tuple[int, int]
    attempts: int = 0
    degraded: bool = False
    new_device: tuple[int, int] | None = None


@dataclass
class LostUnit:
    obj: EntityId
    extent_index: int
    stripe: int
    role: tuple[str, int]
    reason: str


class HaSubsystem:
    """Event-loop actor owning the global cluster configuration view."""

    def __init__(self, cluster, dtm, ctx):
        self.cluster = cluster
        self.dtm = dtm
        self.ctx = ctx  # client context used to build repair transactions
        self.version = 0
        self.events: list[FailureEvent] = []
        self.repair_queue: deque[RepairItem] = deque()
        self.repairs_done = 0
        self.repairs_degraded = 0
        self.lost: list[LostUnit] = []
        self.failed_devices: list[tuple[int, int]] = []
        self._repair_running = False
        cluster.on_failure_event = self.handle_event
        cluster.ha = self

    # ------------------------------------------------------------------ events

    def handle_event(self, kind: str, target, time_us: int):
        cluster = self.cluster
        self.version += 1
        ev = FailureEvent(time_us=time_us, kind=kind, target=target)
        self.events.append(ev)
        cluster.trace.add("ha-config", cluster.now, v=self.version, fk=kind,
                          target=target)
        cluster.telemetry.emit(cluster.now, "ha", f"event.{kind.lower()}",
                               target=target, version=self.version)
        self._journal_config_change(kind, target)
        if kind == "CRASH":
            self.dtm.on_node_crash(target)
        elif kind == "DEVICE_FAIL":
            tier, idx = target
            self.failed_devices.append((tier, idx))
            for item in self._units_on_device(tier, idx):
                self.repair_queue.append(item)
            self._kick_repair()
        elif kind == "RESTART":
            self.dtm.recover(target)

    def _journal_config_change(self, kind: str, target):
        """Config changes ride a transaction when the coordinator is up."""
        if not self.cluster.nodes[self.cluster.coordinator_id].up:
            return
        try:
            tx = self.dtm.tx_begin(self.cluster.root_realm)
            tx.add_update({"node": self.cluster.coordinator_id, "kind": "config-change",
                           "payload": {"version": self.version, "event": kind,
                                       "target": target}})
            self.dtm.tx_commit(tx)
        except SageError:
            pass  # journaling is best-effort while the cluster is degraded

    def _units_on_device(self, tier: int, idx: int) -> list[RepairItem]:
        cat = self.cluster.catalog()
        out = []
        for eid in sorted(cat.entities):
            rec = cat.entities[eid]
            if not isinstance(rec, ObjectRecord):
                continue
            for eidx, ext in enumerate(rec.layout.extents):
                for (s, tag, ri, t, d) in ext.placements:
                    if (t, d) == (tier, idx):
                        out.append(RepairItem(obj=rec.id, extent_index=eidx,
                                              gen=ext.gen, stripe=s, role=(tag, ri),
                                              old_device=(tier, idx)))
        return out

    # ------------------------------------------------------------------ status

    def status(self) -> dict:
        return {
            "config_version": self.version,
            "failed_devices": [list(d) for d in self.failed_devices],
            "repairs_pending": len(self.repair_queue),
            "repairs_done": self.repairs_done,
            "repairs_degraded": self.repairs_degraded,
            "lost_units": len(self.lost),
        }

    # ------------------------------------------------------------------ repair

    def repair_plan(self) -> list[dict]:
        """Preview the pending queue: replacement device and source kind per
        lost unit. Execution re-evaluates against live state, so this is a
        read-only view."""
        out = []
        for item in list(self.repair_queue):
            entry = {"obj": item.obj.short(), "extent": item.extent_index,
                     "stripe": item.stripe, "role": list(item.role),
                     "old_device": list(item.old_device)}
            cur = self._current_extent(item)
            if cur is None:
                entry["action"] = "skip"
                out.append(entry)
                continue
            rec, ext = cur
            if isinstance(ext.sub.scheme, Replication):
                entry["source"] = "replica"
                survivors = sum(
                    1 for i in range(ext.sub.scheme.n)
                    if ("replica", i) != item.role
                    and self._viable_unit(rec, ext, item.extent_index, 0,
                                          ("replica", i)) is not None)
            else:
                entry["source"] = "parity"
                n, k = ext.sub.scheme.n, ext.sub.scheme.k
                survivors = sum(
                    1 for role in ([("data", i) for i in range(n)]
                                   + [("parity", j) for j in range(k)])
                    if role != item.role
                    and self._viable_unit(rec, ext, item.extent_index,
                                          item.stripe, role) is not None)
            if survivors == 0 and entry["source"] == "replica":
                entry["action"] = "lost"
                out.append(entry)
                continue
            geom = [g for g in extent_units(ext.length, ext.sub)
                    if g[0] == item.stripe and g[1] == item.role]
            nblocks = geom[0][2] if geom else 0
            try:
                device, degraded = self._choose_device(item, rec, ext, nblocks)
                entry["action"] = "copy" if entry["source"] == "replica" else "reconstruct"
                entry["new_device"] = list(device)
                entry["degraded"] = degraded
            except NoEligibleDevice:
                entry["action"] = "lost"
            out.append(entry)
        return out

    def _kick_repair(self):
        if not self._repair_running and self.repair_queue:
            self._repair_running = True
            self.cluster.loop.schedule(0, "ha-repair", self._repair_next)

    def _repair_next(self):
        if not self.repair_queue:
            self._repair_running = False
            self.cluster.telemetry.emit(self.cluster.now, "ha", "repair.quiescent",
                                        done=self.repairs_done, lost=len(self.lost))
            return
        item = self.repair_queue.popleft()
        try:
            self._repair_one(item)
        except SageError as err:
            self._mark_lost(item, str(err))
            self.cluster.loop.schedule(0, "ha-repair", self._repair_next)

    def _mark_lost(self, item: RepairItem, reason: str):
        self.lost.append(LostUnit(obj=item.obj, extent_index=item.extent_index,
                                  stripe=item.stripe, role=item.role, reason=reason))
        self.cluster.stats.lost_units += 1
        self.cluster.trace.add("lost-unit", self.cluster.now, obj=item.obj.short(),
                               extent=item.extent_index, stripe=item.stripe,
                               role=list(item.role), reason=reason)
        self.cluster.telemetry.emit(self.cluster.now, "ha", "unit.lost",
                                    obj=item.obj.short(), reason=reason)

    def _current_extent(self, item: RepairItem) -> tuple[ObjectRecord, Extent] | None:
        cat = self.cluster.catalog()
        rec = cat.entities.get(item.obj)
        if not isinstance(rec, ObjectRecord):
            return None  # freed since the failure
        if item.extent_index >= len(rec.layout.extents):
            return None
        ext = rec.layout.extents[item.extent_index]
        if ext.gen != item.gen:
            return None  # migrated away in the meantime
        if ext.placement_map().get((item.stripe, item.role[0], item.role[1])) \
                != item.old_device:
            return None  # already repaired
        return rec, ext

    def _choose_device(self, item: RepairItem, rec: ObjectRecord, ext: Extent,
                       nblocks: int) -> tuple[tuple[int, int], bool]:
        """Same tier first, then spill down-tier; excludes devices already
        holding units of the same stripe group."""
        cluster = self.cluster
        pmap = ext.placement_map()
        group_devices = {dev for (s, tag, ri), dev in pmap.items() if s == item.stripe}
        tiers = sorted(t for t in cluster.tiers if t >= ext.sub.tier_id)
        for fallback, tier in enumerate(tiers):
            online = cluster.online_devices(tier)
            exclude = {d for (t, d) in group_devices if t == tier}
            for dev in online:
                if cluster.devices[(tier, dev)].free_blocks < nblocks:
                    exclude.add(dev)
            try:
                dev = place_unit(cluster.seed, rec.id, item.extent_index, item.stripe,
                                 item.role, tier, online, exclude)
            except NoEligibleDevice:
                continue
            return (tier, dev), fallback > 0
        raise NoEligibleDevice(tier=ext.sub.tier_id, unit=list(item.role))

    def _repair_one(self, item: RepairItem):
        cluster = self.cluster
        cur = self._current_extent(item)
        if cur is None:
            cluster.loop.schedule(0, "ha-repair", self._repair_next)
            return
        rec, ext = cur
        self._gather_source(item, rec, ext)

    # -- source data ------------------------------------------------------

    def _viable_unit(self, rec, ext, eidx, stripe, role):
        dev_ref = ext.placement_map().get((stripe, role[0], role[1]))
        if dev_ref is None:
            return None
        dev = self.cluster.devices.get(dev_ref)
        if dev is None or dev.status != "ONLINE":
            return None
        if not self.cluster.nodes[dev.node_id].up:
            return None
        unit = dev.units.get(make_unit_key(rec.id, eidx, ext.gen, stripe, role))
        if unit is None:
            return None
        return dev, unit

    def _gather_source(self, item: RepairItem, rec: ObjectRecord, ext: Extent):
        """Read enough surviving data to rebuild the lost unit, then commit
        the repair transaction."""
        cluster = self.cluster
        bs = rec.block_size
        eidx = item.extent_index
        zeros = b"\x00" * bs

        if isinstance(ext.sub.scheme, Replication):
            survivor = None
            for i in range(ext.sub.scheme.n):
                role = ("replica", i)
                if role == item.role:
                    continue
                v = self._viable_unit(rec, ext, eidx, 0, role)
                if v is not None:
                    survivor = v
                    break
            if survivor is None:
                self._mark_lost(item, "no surviving replica")
                cluster.loop.schedule(0, "ha-repair", self._repair_next)
                return
            dev, unit = survivor
            blocks = dict(unit.blocks)
            nblocks = unit.nblocks

            def done(ok):
                if not ok:
                    self._retry(item, "source read failed")
                    return
                self._commit_repair(item, rec, ext, nblocks, blocks)

            cluster.io_submit((dev.tier_id, dev.index), "read",
                              max(1, len(blocks)) * bs, done)
            return

        n, k, u = ext.sub.scheme.n, ext.sub.scheme.k, ext.sub.unit_size
        span, length = n * u, ext.length
        base = item.stripe * span
        # unit geometry of the lost unit
        if item.role[0] == "data":
            lost_width = max(0, min(u, length - (base + item.role[1] * u)))
        else:
            lost_width = max(0, min(u, length - base))
        survivors: dict[tuple, tuple] = {}
        for i in range(n):
            role = ("data", i)
            if role == item.role or base + i * u >= length:
                continue
            v = self._viable_unit(rec, ext, eidx, item.stripe, role)
            if v is not None:
                survivors[role] = v
        for j in range(k):
            role = ("parity", j)
            if role == item.role:
                continue
            v = self._viable_unit(rec, ext, eidx, item.stripe, role)
            if v is not None:
                survivors[role] = v

        positions = sorted({p for (_dev, unit) in survivors.values()
                            for p in unit.blocks if p < lost_width})
        real_roles = {("data", i) for i in range(n) if base + i * u < length} \
            | {("parity", j) for j in range(k)}
        missing = {r for r in real_roles if r not in survivors}
        avail_parities = sum(1 for r in survivors if r[0] == "parity")
        missing_data = sum(1 for r in missing if r[0] == "data")
        if missing_data > avail_parities:
            self._mark_lost(item, "losses exceed parity")
            cluster.loop.schedule(0, "ha-repair", self._repair_next)
            return

        pending = {"n": len(survivors)}
        failed = {"flag": False}
        collected: dict[tuple, dict[int, bytes]] = {}

        def one_done(ok, role=None):
            if not ok:
                failed["flag"] = True
            pending["n"] -= 1
            if pending["n"] == 0:
                finish()

        def finish():
            if failed["flag"]:
                self._retry(item, "source read failed")
                return
            new_blocks: dict[int, bytes] = {}
            for p in positions:
                available, miss = {}, set()
                for i in range(n):
                    role = ("data", i)
                    rel = base + i * u + p
                    if base + i * u >= length or rel >= length:
                        available[role] = zeros
                    elif role in collected:
                        available[role] = collected[role].get(p, zeros)
                    else:
                        miss.add(role)
                for j in range(k):
                    role = ("parity", j)
                    if role in collected:
                        available[role] = collected[role].get(p, zeros)
                    else:
                        miss.add(role)
                solved = erasure.parity_reconstruct(available, miss, n, k)
                merged = {**available, **solved}
                new_blocks[p] = merged[item.role]
            self._commit_repair(item, rec, ext, lost_width, new_blocks)

        if not survivors:
            # nothing written anywhere in this stripe: rebuild an empty unit
            self._commit_repair(item, rec, ext, lost_width, {})
            return
        for role in sorted(survivors):
            dev, unit = survivors[role]
            collected[role] = {p: unit.blocks.get(p, zeros) for p in positions}
            cluster.io_submit((dev.tier_id, dev.index), "read",
                              max(1, len(positions)) * bs, one_done)

    def _retry(self, item: RepairItem, reason: str):
        item.attempts += 1
        if item.attempts >= _MAX_REPAIR_ATTEMPTS:
            self._mark_lost(item, f"{reason}; retries exhausted")
        else:
            self.repair_queue.append(item)
        self.cluster.loop.schedule(0, "ha-repair", self._repair_next)

    # -- the repair transaction --------------------------------------------

    def _commit_repair(self, item: RepairItem, rec: ObjectRecord, ext: Extent,
                       nblocks: int, blocks: dict[int, bytes]):
        cluster = self.cluster
        cur = self._current_extent(item)
        if cur is None:
            cluster.loop.schedule(0, "ha-repair", self._repair_next)
            return
        rec, ext = cur
        try:
            new_device, degraded = self._choose_device(item, rec, ext, nblocks)
        except NoEligibleDevice as err:
            self._mark_lost(item, str(err))
            cluster.loop.schedule(0, "ha-repair", self._repair_next)
            return

        # verify data-bearing blocks against the catalog before re-writing
        if item.role[0] in ("replica", "data"):
            from .crc import block_checksum
            if item.role[0] == "replica":
                rel_of = lambda p: p
            else:
                base = item.stripe * ext.sub.scheme.n * ext.sub.unit_size
                rel_of = lambda p: base + item.role[1] * ext.sub.unit_size + p
            for p in sorted(blocks):
                expected = rec.checksums.get(ext.start + rel_of(p))
                if expected is not None and block_checksum(blocks[p]) != expected:
                    self._retry(item, f"checksum mismatch at position {p}")
                    return

        item.new_device = new_device
        item.degraded = degraded
        unit_key = make_unit_key(rec.id, item.extent_index, ext.gen, item.stripe, item.role)
        new_placements = tuple(
            (s, tag, ri, *(new_device if (s, tag, ri) ==
                           (item.stripe, item.role[0], item.role[1]) else (t, d)))
            for (s, tag, ri, t, d) in ext.placements)
        new_ext = Extent(start=ext.start, end=ext.end, sub=ext.sub, gen=ext.gen,
                         config_version=self.version, placements=new_placements)
        extents = list(rec.layout.extents)
        extents[item.extent_index] = new_ext
        new_layout = Layout(extents=tuple(extents))
        cluster.trace.add("placement", cluster.now, obj=rec.id.short(),
                          extent=item.extent_index, cfg=self.version)

        node_id = cluster.devices[new_device].node_id
        updates = [
            {"node": node_id, "kind": "alloc-unit", "device": list(new_device),
             "unit_key": list(unit_key), "nblocks": nblocks},
            {"node": node_id, "kind": "obj-block-write", "device": list(new_device),
             "unit_key": list(unit_key), "writes": sorted(blocks.items())},
            {"node": cluster.coordinator_id, "kind": "catalog", "op": "obj-merge",
             "payload": {"id": rec.id.to_json(), "layout": new_layout.to_json()}},
        ]
        try:
            tx = self.dtm.tx_begin(cluster.root_realm)
        except SageError as err:
            self._retry(item, str(err))
            return
        for u in updates:
            tx.add_update(u)

        def decided(committed, reason):
            if committed:
                self.repairs_done += 1
                if degraded:
                    self.repairs_degraded += 1
                cluster.telemetry.emit(cluster.now, "ha", "repair.done",
                                       obj=rec.id.short(), degraded=degraded)
                cluster.loop.schedule(0, "ha-repair", self._repair_next)
            else:
                self._retry(item, f"repair tx aborted: {reason}")

        tx.on_decided.append(decided)
        self.dtm.tx_commit(tx)
