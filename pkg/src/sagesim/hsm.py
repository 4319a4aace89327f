"""Hierarchical storage management: access temperature, watermark planning,
transactional extent migration.

Temperature is a decaying access counter: on every access
``T <- T * exp(-(now - last)/tau) + 1``. The planner demotes the coldest
extents of any tier above its high watermark until it projects back at the
low watermark, and promotes extents whose temperature crossed the
threshold one tier up when the target has room. Each migration is a single
transaction; reads keep hitting the old placement until it commits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .catalog import ObjectRecord
from .errors import SageError
from .ids import EntityId
from .layout import Extent, Layout, Striped, SubLayout, assign_placements, make_unit_key
from . import erasure


@dataclass
class HsmPolicy:
    high_watermark: float = 0.90
    low_watermark: float = 0.80
    promote_threshold: float = 3.0
    decay_tau_s: float = 100.0

    def __post_init__(self):
        if not 0 < self.low_watermark < self.high_watermark <= 1:
            raise ValueError("need 0 < low_watermark < high_watermark <= 1")
        if self.promote_threshold <= 0 or self.decay_tau_s <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class HeatRecord:
    temperature: float = 0.0
    last_access_us: int = 0


@dataclass
class Migration:
    obj: EntityId
    extent_index: int
    gen: int
    from_tier: int
    to_tier: int
    temperature: float
    reason: str  # "demote" | "promote"
    footprint: int


class HsmEngine:
    def __init__(self, cluster, dtm, ctx, policy: HsmPolicy | None = None):
        self.cluster = cluster
        self.dtm = dtm
        self.ctx = ctx
        self.policy = policy or HsmPolicy()
        self.heat: dict[tuple[int, int], HeatRecord] = {}  # (obj value, extent)
        self.migrations_done = 0
        self.migrations_failed = 0
        cluster.hsm = self
        ctx.on_access = self.on_access

    # ------------------------------------------------------------------- heat

    def on_access(self, obj: EntityId, extent_indices: list[int]):
        now = self.cluster.now
        for eidx in extent_indices:
            self.heat_update(obj, eidx, now)

    def heat_update(self, obj: EntityId, extent_index: int, now_us: int) -> float:
        rec = self.heat.setdefault((obj.value, extent_index), HeatRecord())
        dt_s = (now_us - rec.last_access_us) / 1e6
        if rec.temperature:
            rec.temperature *= math.exp(-dt_s / self.policy.decay_tau_s)
        rec.temperature += 1.0
        rec.last_access_us = now_us
        return rec.temperature

    def temperature(self, obj_value: int, extent_index: int, now_us: int) -> float:
        rec = self.heat.get((obj_value, extent_index))
        if rec is None:
            return 0.0
        dt_s = (now_us - rec.last_access_us) / 1e6
        return rec.temperature * math.exp(-dt_s / self.policy.decay_tau_s)

    # ------------------------------------------------------------------ stats

    def tier_occupancy(self) -> dict[int, tuple[int, int]]:
        """(used, capacity) over ONLINE devices per tier."""
        out: dict[int, list[int]] = {t: [0, 0] for t in sorted(self.cluster.tiers)}
        for (tier, _idx), dev in sorted(self.cluster.devices.items()):
            if dev.status == "ONLINE":
                out[tier][0] += dev.used
                out[tier][1] += dev.capacity
        return {t: (u, c) for t, (u, c) in out.items()}

    def stats(self) -> dict:
        occ = self.tier_occupancy()
        temps = sorted(self.temperature(o, e, self.cluster.now)
                       for (o, e) in self.heat)
        hist = [0] * 8
        for t in temps:
            hist[min(7, int(t))] += 1
        return {
            "tiers": {str(t): {"used_blocks": u, "capacity_blocks": c,
                               "occupancy": (u / c if c else 0.0)}
                      for t, (u, c) in occ.items()},
            "migrations_done": self.migrations_done,
            "migrations_failed": self.migrations_failed,
            "tracked_extents": len(self.heat),
            "temperature_histogram": hist,
        }

    # ------------------------------------------------------------------- plan

    def _extents_by_tier(self) -> dict[int, list[tuple]]:
        """tier -> [(obj_record, extent_index, extent)] from the catalog."""
        cat = self.cluster.catalog()
        out: dict[int, list[tuple]] = {t: [] for t in sorted(self.cluster.tiers)}
        for eid in sorted(cat.entities):
            rec = cat.entities[eid]
            if isinstance(rec, ObjectRecord):
                for eidx, ext in enumerate(rec.layout.extents):
                    out[ext.sub.tier_id].append((rec, eidx, ext))
        return out

    def plan(self) -> list[Migration]:
        """Deterministic migration plan from the current occupancy and heat."""
        now = self.cluster.now
        pol = self.policy
        occ = {t: [u, c] for t, (u, c) in self.tier_occupancy().items()}
        by_tier = self._extents_by_tier()
        planned: set[tuple[int, int]] = set()
        out: list[Migration] = []

        def key_of(rec, eidx):
            return (rec.id.value, eidx)

        def temp_of(rec, eidx):
            return self.temperature(rec.id.value, eidx, now)

        # demotions: coldest first until the tier projects at the low watermark
        for tier in sorted(by_tier):
            used, cap = occ[tier]
            if cap == 0 or used / cap <= pol.high_watermark:
                continue
            candidates = sorted(by_tier[tier],
                                key=lambda it: (temp_of(it[0], it[1]),
                                                it[0].id.value, it[1]))
            for rec, eidx, ext in candidates:
                if used / cap <= pol.low_watermark:
                    break
                if key_of(rec, eidx) in planned:
                    continue
                fp = ext.footprint_blocks()
                target = None
                for t2 in sorted(self.cluster.tiers):
                    if t2 <= tier:
                        continue
                    u2, c2 = occ[t2]
                    if c2 and (u2 + fp) / c2 < pol.high_watermark:
                        target = t2
                        break
                if target is None:
                    continue
                out.append(Migration(obj=rec.id, extent_index=eidx, gen=ext.gen,
                                     from_tier=tier, to_tier=target,
                                     temperature=temp_of(rec, eidx),
                                     reason="demote", footprint=fp))
                planned.add(key_of(rec, eidx))
                used -= fp
                occ[tier][0] = used
                occ[target][0] += fp

        # promotions: hottest first, one tier up, if it stays under the high mark
        hot = []
        for tier in sorted(by_tier):
            if tier == min(self.cluster.tiers):
                continue
            for rec, eidx, ext in by_tier[tier]:
                if key_of(rec, eidx) in planned:
                    continue
                t = temp_of(rec, eidx)
                if t >= pol.promote_threshold:
                    hot.append((-t, rec.id.value, eidx, rec, ext, tier))
        for negt, _oid, eidx, rec, ext, tier in sorted(hot):
            target = tier - 1
            if target not in self.cluster.tiers:
                continue
            fp = ext.footprint_blocks()
            u2, c2 = occ[target]
            if not c2 or (u2 + fp) / c2 >= pol.high_watermark:
                continue
            out.append(Migration(obj=rec.id, extent_index=eidx, gen=ext.gen,
                                 from_tier=tier, to_tier=target,
                                 temperature=-negt, reason="promote", footprint=fp))
            planned.add((rec.id.value, eidx))
            occ[target][0] += fp
            occ[tier][0] -= fp
        return out

    # ---------------------------------------------------------------- migrate

    def tick(self) -> list[Migration]:
        """One plan/execute cycle; migrations run sequentially as events."""
        plan = self.plan()
        self.cluster.telemetry.emit(self.cluster.now, "hsm", "tick", planned=len(plan))
        if plan:
            queue = list(plan)

            def next_one():
                if not queue:
                    return
                m = queue.pop(0)
                self._migrate(m, next_one)

            self.cluster.loop.schedule(0, "hsm-migrate", next_one)
        return plan

    def _migrate(self, m: Migration, done):
        cluster = self.cluster
        cat = cluster.catalog()
        rec = cat.entities.get(m.obj)
        if not isinstance(rec, ObjectRecord) or m.extent_index >= len(rec.layout.extents):
            done()
            return
        ext = rec.layout.extents[m.extent_index]
        if ext.gen != m.gen or ext.sub.tier_id != m.from_tier:
            done()
            return

        written_rels = sorted(b - ext.start for b in rec.checksums
                              if ext.start <= b < ext.end)

        from .access import _ExtentRead

        def have_data(blocks, err):
            if err is not None:
                self.migrations_failed += 1
                cluster.telemetry.emit(cluster.now, "hsm", "migrate.read_failed",
                                       obj=m.obj.short(), err=str(err))
                done()
                return
            self._commit_migration(m, rec, ext, written_rels, blocks or {}, done)

        if written_rels:
            _ExtentRead(self.ctx, rec, m.extent_index, ext, written_rels,
                        verify=True, cb=have_data).start()
        else:
            have_data({}, None)

    def _commit_migration(self, m: Migration, rec: ObjectRecord, ext: Extent,
                          rels: list[int], blocks: dict[int, bytes], done):
        cluster = self.cluster
        bs = rec.block_size
        zeros = b"\x00" * bs
        new_sub = SubLayout(tier_id=m.to_tier, scheme=ext.sub.scheme,
                            unit_size=ext.sub.unit_size)
        try:
            new_ext = assign_placements(cluster.seed, rec.id, m.extent_index,
                                        ext.start, ext.end, new_sub,
                                        self.ctx.directory,
                                        cluster.config_version(), gen=ext.gen + 1)
        except SageError as err:
            self.migrations_failed += 1
            cluster.telemetry.emit(cluster.now, "hsm", "migrate.no_device",
                                   obj=m.obj.short(), err=str(err))
            done()
            return
        cluster.trace.add("placement", cluster.now, obj=rec.id.short(),
                          extent=m.extent_index, cfg=new_ext.config_version)

        rel_bytes = {r: blocks[r] for r in rels}
        unit_writes: dict[tuple, dict] = {}
        pmap = new_ext.placement_map()

        def add(device, key, idx, data):
            entry = unit_writes.setdefault(key, {"device": device, "writes": {}})
            entry["writes"][idx] = data

        if isinstance(new_sub.scheme, Striped):
            n, k, u = new_sub.scheme.n, new_sub.scheme.k, new_sub.unit_size
            span, length = n * u, ext.length
            by_stripe_pos: dict[tuple[int, int], None] = {}
            for rel in rels:
                s, off = rel // span, rel % span
                by_stripe_pos[(s, off % u)] = None
            for (s, p) in sorted(by_stripe_pos):
                base = s * span
                stripe_blocks = []
                for i in range(n):
                    rel = base + i * u + p
                    data = rel_bytes.get(rel, zeros) if rel < length else zeros
                    stripe_blocks.append(data)
                    if rel < length and rel in rel_bytes:
                        dev = pmap[(s, "data", i)]
                        key = make_unit_key(rec.id, m.extent_index, new_ext.gen,
                                            s, ("data", i))
                        add(dev, key, p, data)
                if k:
                    parities = erasure.parity_encode(stripe_blocks, k)
                    for j in range(k):
                        dev = pmap[(s, "parity", j)]
                        key = make_unit_key(rec.id, m.extent_index, new_ext.gen,
                                            s, ("parity", j))
                        add(dev, key, p, parities[j])
        else:
            for i in range(new_sub.scheme.n):
                dev = pmap[(0, "replica", i)]
                key = make_unit_key(rec.id, m.extent_index, new_ext.gen,
                                    0, ("replica", i))
                for rel in rels:
                    add(dev, key, rel, rel_bytes[rel])

        from .layout import extent_units
        updates = []
        for stripe, role, nb, _lo, _hi in extent_units(new_ext.length, new_sub):
            tier, dev = pmap[(stripe, role[0], role[1])]
            node = cluster.devices[(tier, dev)].node_id
            updates.append({"node": node, "kind": "alloc-unit", "device": [tier, dev],
                            "unit_key": list(make_unit_key(
                                rec.id, m.extent_index, new_ext.gen, stripe, role)),
                            "nblocks": nb})
        for key in sorted(unit_writes):
            entry = unit_writes[key]
            device = entry["device"]
            node = cluster.devices[device].node_id
            updates.append({"node": node, "kind": "obj-block-write",
                            "device": list(device), "unit_key": list(key),
                            "writes": sorted(entry["writes"].items())})
        new_layout_extents = list(rec.layout.extents)
        new_layout_extents[m.extent_index] = new_ext
        updates.append({"node": cluster.coordinator_id, "kind": "catalog",
                        "op": "obj-merge",
                        "payload": {"id": rec.id.to_json(),
                                    "layout": Layout(tuple(new_layout_extents)).to_json()}})
        old_pmap = ext.placement_map()
        for stripe, role, _nb, _lo, _hi in extent_units(ext.length, ext.sub):
            tier, dev = old_pmap[(stripe, role[0], role[1])]
            node = cluster.devices[(tier, dev)].node_id
            updates.append({"node": node, "kind": "free-unit", "device": [tier, dev],
                            "unit_key": list(make_unit_key(
                                rec.id, m.extent_index, ext.gen, stripe, role))})

        try:
            tx = self.dtm.tx_begin(cluster.root_realm)
        except SageError:
            self.migrations_failed += 1
            done()
            return
        for u in updates:
            tx.add_update(u)

        def decided(committed, reason):
            if committed:
                self.migrations_done += 1
                cluster.telemetry.emit(cluster.now, "hsm", "migrate.done",
                                       obj=m.obj.short(), extent=m.extent_index,
                                       to_tier=m.to_tier, kind=m.reason)
            else:
                self.migrations_failed += 1
                cluster.telemetry.emit(cluster.now, "hsm", "migrate.aborted",
                                       obj=m.obj.short(), reason=reason)
            done()

        tx.on_decided.append(decided)
        self.dtm.tx_commit(tx)
