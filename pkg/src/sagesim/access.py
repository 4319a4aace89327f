"""The access API: entity lifecycle, object and index I/O, async operations.

Every mutating call is wrapped in a transaction - its own unless the caller
binds one - and drives an Operation through
INIT -> LAUNCHED -> EXECUTED -> STABLE (or FAILED). Reads terminate at
EXECUTED and transparently fall back to surviving replicas or parity
reconstruction when devices are gone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import erasure
from .crc import block_checksum, block_checksums_bulk
from .catalog import ContainerRecord, ObjectRecord, IndexRecord, RealmRecord, READ_WRITE
from .dtm import DtmEngine, Transaction
from .errors import (
    ChecksumMismatch,
    DataUnavailable,
    InvalidState,
    KeyNotFound,
    NodeUnavailable,
    RangeOutOfBounds,
    SageError,
    Timeout,
    TxAborted,
)
from .ids import EntityId, EntityKind
from .layout import (
    Extent,
    Layout,
    MAX_BLOCK_SIZE,
    MIN_BLOCK_SIZE,
    Replication,
    Striped,
    assign_placements,
    instantiate_template,
    make_unit_key,
)
from .placement import pick_node

INIT = "INIT"
LAUNCHED = "LAUNCHED"
EXECUTED = "EXECUTED"
STABLE = "STABLE"
FAILED = "FAILED"

STATE_RANK = {INIT: 0, LAUNCHED: 1, EXECUTED: 2, STABLE: 3, FAILED: 3}
_LEGAL = {(INIT, LAUNCHED), (LAUNCHED, EXECUTED), (LAUNCHED, FAILED), (EXECUTED, STABLE)}

_READ_RETRY_LIMIT = 6


@dataclass
class Operation:
    op_id: int
    kind: str
    state: str = INIT
    result: object = None
    error: SageError | None = None
    txid: int | None = None
    _exec: object = field(default=None, repr=False)

    @property
    def done(self) -> bool:
        return self.state in (EXECUTED, STABLE, FAILED)


class _Directory:
    """Cluster view used by placement assignment."""

    def __init__(self, cluster):
        self.cluster = cluster

    def online_devices(self, tier_id):
        return self.cluster.online_devices(tier_id)

    def free_blocks(self, tier_id, device_index):
        return self.cluster.devices[(tier_id, device_index)].free_blocks

    def device_count(self, tier_id):
        return self.cluster.tiers[tier_id].device_count


class ClientContext:
    """One client runtime; crash-immune, drives ops through the event loop."""

    def __init__(self, cluster, dtm: DtmEngine):
        self.cluster = cluster
        self.dtm = dtm
        self.directory = _Directory(cluster)
        self._op_counter = 0
        self.on_access = None  # hsm hook: fn(obj_id, extent_indices)

    # ------------------------------------------------------------ op plumbing

    def _new_op(self, kind: str, exec_fn) -> Operation:
        self._op_counter += 1
        op = Operation(op_id=self._op_counter, kind=kind, _exec=exec_fn)
        return op

    def _transition(self, op: Operation, to: str):
        if (op.state, to) not in _LEGAL:
            raise InvalidState(op=op.op_id, from_state=op.state, to_state=to)
        self.cluster.trace.add("op", self.cluster.now, op=op.op_id,
                               ok=op.kind, fr=op.state, to=to)
        op.state = to

    def _fail(self, op: Operation, err: SageError):
        op.error = err
        self._transition(op, FAILED)

    def op_launch(self, ops: list[Operation]):
        for op in ops:
            if op.state != INIT:
                raise InvalidState(op=op.op_id, state=op.state, expected=INIT)
        for op in ops:
            self._transition(op, LAUNCHED)
            self.cluster.stats.count_op(op.kind)
            exec_fn = op._exec
            self.cluster.loop.schedule(0, f"op:{op.kind}",
                                       lambda f=exec_fn, o=op: f(o),
                                       info={"op": op.op_id})

    def op_wait(self, op: Operation, target_state: str = EXECUTED,
                timeout_us: int | None = None) -> str:
        if op.state == INIT:
            raise InvalidState(op=op.op_id, reason="wait on unlaunched op")
        if target_state not in STATE_RANK:
            raise InvalidState(target=target_state)
        deadline = None if timeout_us is None else self.cluster.now + timeout_us
        loop = self.cluster.loop
        while True:
            if op.state == FAILED or STATE_RANK[op.state] >= STATE_RANK[target_state]:
                return op.state
            if deadline is not None and self.cluster.now >= deadline:
                raise Timeout(op=op.op_id, state=op.state)
            nxt = loop.peek_time()
            if nxt is None:
                if deadline is None:
                    raise Timeout(op=op.op_id, state=op.state,
                                  reason="event queue drained; no progress possible")
                loop.now = deadline
                raise Timeout(op=op.op_id, state=op.state)
            if deadline is not None and nxt > deadline:
                loop.now = deadline
                raise Timeout(op=op.op_id, state=op.state)
            loop.run_one()

    def run(self, op: Operation, target_state: str = EXECUTED):
        """Launch, wait, and either return the result or raise the error."""
        self.op_launch([op])
        self.op_wait(op, target_state)
        if op.state == FAILED:
            raise op.error
        return op.result

    # --------------------------------------------------------------- helpers

    def catalog(self):
        return self.cluster.catalog()

    def _coordinator_up(self):
        if not self.cluster.nodes[self.cluster.coordinator_id].up:
            raise NodeUnavailable(node=self.cluster.coordinator_id, role="coordinator")

    def id_generate(self, kind: EntityKind) -> EntityId:
        return self.cluster.ids.generate(kind)

    def _coord_update(self, kind: str, **fields) -> dict:
        return {"node": self.cluster.coordinator_id, "kind": kind, **fields}

    def _mutation(self, op: Operation, tx: Transaction | None, updates: list[dict],
                  result, validation_err: SageError | None = None):
        """Attach updates to the bound or a fresh transaction and wire the
        op's EXECUTED/STABLE/FAILED transitions to the tx outcome."""
        if validation_err is not None:
            if tx is not None:
                tx.poisoned = str(validation_err)
            self._fail(op, validation_err)
            return
        own = tx is None
        if own:
            try:
                tx = self.dtm.tx_begin(self._realm_for_updates(updates))
            except SageError as err:
                self._fail(op, err)
                return
        op.txid = tx.txid

        def decided(committed: bool, reason: str):
            if op.done:
                return
            if committed:
                op.result = result
                self._transition(op, EXECUTED)
            else:
                self._fail(op, TxAborted(reason))

        def stable():
            if op.state == EXECUTED:
                self._transition(op, STABLE)

        tx.on_decided.append(decided)
        tx.on_stable.append(stable)
        for u in updates:
            tx.add_update(u)
        if own:
            self.dtm.tx_commit(tx)

    def _realm_for_updates(self, updates) -> EntityId:
        return self.cluster.root_realm

    # ------------------------------------------------------ realms, containers

    def realm_create(self, parent: EntityId, access: str = READ_WRITE,
                     tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                self.catalog().realm(parent)
                self.catalog().check_writable(parent)
            except SageError as err:
                self._fail(op, err)
                return
            rid = self.id_generate(EntityKind.REALM)
            rec = RealmRecord(id=rid, parent=parent, access=access)
            upd = self._coord_update("catalog", op="ent-put",
                                     payload={"record": rec.to_json()})
            self._mutation(op, tx, [upd], rid)
        return self._new_op("realm_create", exec_fn)

    def container_create(self, realm: EntityId, label: str,
                         attrs: dict | None = None,
                         tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                self.catalog().realm(realm)
                self.catalog().check_writable(realm)
            except SageError as err:
                self._fail(op, err)
                return
            cid = self.id_generate(EntityKind.CONTAINER)
            rec = ContainerRecord(id=cid, realm=realm, label=label, attrs=attrs or {})
            upd = self._coord_update("catalog", op="ent-put",
                                     payload={"record": rec.to_json()})
            self._mutation(op, tx, [upd], cid)
        return self._new_op("container_create", exec_fn)

    def container_update(self, container: EntityId, add: set[EntityId] = frozenset(),
                         remove: set[EntityId] = frozenset(),
                         tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                cat = self.catalog()
                cat.get_container(container)
                for eid in sorted(add):
                    cat.get(eid)
            except SageError as err:
                self._fail(op, err)
                return
            upd = self._coord_update("catalog", op="cont-update", payload={
                "id": container.to_json(),
                "add": [e.to_json() for e in sorted(add)],
                "remove": [e.to_json() for e in sorted(remove)]})
            self._mutation(op, tx, [upd], None)
        return self._new_op("container_update", exec_fn)

    def entity_set_attrs(self, eid: EntityId, attrs: dict[str, str],
                         tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                self.catalog().get(eid)
            except SageError as err:
                self._fail(op, err)
                return
            upd = self._coord_update("catalog", op="attrs-merge",
                                     payload={"id": eid.to_json(), "attrs": attrs})
            self._mutation(op, tx, [upd], None)
        return self._new_op("entity_set_attrs", exec_fn)

    def catalog_query(self, predicate: dict[str, str]) -> list[EntityId]:
        self._coordinator_up()
        self.cluster.stats.count_op("catalog_query")
        return self.catalog().query(predicate)

    # ---------------------------------------------------------------- objects

    def obj_create(self, realm: EntityId, block_size: int, nblocks: int,
                   layout_template: list[dict], attrs: dict | None = None,
                   tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                self.catalog().realm(realm)
                self.catalog().check_writable(realm)
                if block_size < MIN_BLOCK_SIZE or block_size > MAX_BLOCK_SIZE \
                        or block_size & (block_size - 1):
                    raise RangeOutOfBounds(block_size=block_size,
                                           reason="block_size must be a power of two in 512..1MiB")
                if nblocks < 0:
                    raise RangeOutOfBounds(nblocks=nblocks)
                oid = self.id_generate(EntityKind.OBJECT)
                parts = instantiate_template(layout_template, nblocks)
                version = self.cluster.config_version()
                extents = []
                for eidx, (start, end, sub) in enumerate(parts):
                    extents.append(assign_placements(
                        self.cluster.seed, oid, eidx, start, end, sub,
                        self.directory, version))
                layout = Layout(extents=tuple(extents))
                layout.validate(nblocks)
            except SageError as err:
                self._fail(op, err)
                if tx is not None:
                    tx.poisoned = str(err)
                return
            for eidx, ext in enumerate(extents):
                self.cluster.trace.add("placement", self.cluster.now,
                                       obj=oid.short(), extent=eidx, cfg=ext.config_version)
            rec = ObjectRecord(id=oid, realm=realm, block_size=block_size,
                               nblocks=nblocks, layout=layout, attrs=attrs or {})
            updates = [self._coord_update("catalog", op="ent-put",
                                          payload={"record": rec.to_json()})]
            updates.extend(self._alloc_updates(oid, extents))
            self._mutation(op, tx, updates, rec)
        return self._new_op("obj_create", exec_fn)

    def _alloc_updates(self, oid: EntityId, extents: list[Extent]) -> list[dict]:
        from .layout import extent_units
        out = []
        for eidx, ext in enumerate(extents):
            pmap = ext.placement_map()
            for stripe, role, nblocks, _lo, _hi in extent_units(ext.length, ext.sub):
                tier, dev = pmap[(stripe, role[0], role[1])]
                device = self.cluster.devices[(tier, dev)]
                out.append({
                    "node": device.node_id, "kind": "alloc-unit",
                    "device": [tier, dev],
                    "unit_key": list(make_unit_key(oid, eidx, ext.gen, stripe, role)),
                    "nblocks": nblocks})
        return out

    def obj_write(self, obj: EntityId, offset_block: int, data: bytes,
                  tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                rec = self.catalog().get_object(obj)
                self.catalog().check_writable(rec.realm)
                bs = rec.block_size
                if len(data) == 0 or len(data) % bs:
                    raise RangeOutOfBounds(
                        reason=f"data length {len(data)} not a positive multiple of block_size {bs}")
                nw = len(data) // bs
                if offset_block < 0 or offset_block + nw > rec.nblocks:
                    raise RangeOutOfBounds(offset=offset_block, nblocks=nw,
                                           object_blocks=rec.nblocks)
            except SageError as err:
                if tx is not None:
                    tx.poisoned = str(err)
                self._fail(op, err)
                return
            self._write_stage(op, tx, rec, offset_block, data)
        return self._new_op("obj_write", exec_fn)

    def _write_stage(self, op, tx, rec: ObjectRecord, offset: int, data: bytes):
        """Gather any sibling blocks needed for parity, then build the tx."""
        bs = rec.block_size
        nw = len(data) // bs
        end = offset + nw
        zeros = b"\x00" * bs

        # sibling positions needed for parity recompute, per extent
        needs: dict[int, list[int]] = {}
        touched_extents = []
        for eidx, ext in enumerate(rec.layout.extents):
            lo, hi = max(offset, ext.start), min(end, ext.end)
            if lo >= hi:
                continue
            touched_extents.append(eidx)
            if not isinstance(ext.sub.scheme, Striped) or ext.sub.scheme.k == 0:
                continue
            n, u = ext.sub.scheme.n, ext.sub.unit_size
            span = n * u
            length = ext.length
            rel_lo, rel_hi = lo - ext.start, hi - ext.start
            want: set[int] = set()
            for s in range(rel_lo // span, (rel_hi - 1) // span + 1):
                base = s * span
                positions = set()
                for rel in range(max(rel_lo, base), min(rel_hi, base + span)):
                    positions.add((rel - base) % u)
                for p in sorted(positions):
                    for i in range(n):
                        rel = base + i * u + p
                        if rel >= length:
                            continue  # virtual zero block
                        ab = ext.start + rel
                        if not (offset <= ab < end):
                            want.add(rel)
            if want:
                needs[eidx] = sorted(want)

        gathered: dict[int, dict[int, bytes]] = {}
        pending = {"n": len(needs)}
        failed: list[SageError] = []

        def after_gather():
            if failed:
                if tx is not None:
                    tx.poisoned = str(failed[0])
                self._fail(op, failed[0])
                return
            try:
                updates = self._build_write_updates(rec, offset, data, gathered, zeros)
            except SageError as err:
                if tx is not None:
                    tx.poisoned = str(err)
                self._fail(op, err)
                return
            if self.on_access is not None:
                self.on_access(rec.id, touched_extents)
            self._mutation(op, tx, updates, None)

        if not needs:
            after_gather()
            return

        for eidx in sorted(needs):
            ext = rec.layout.extents[eidx]

            def done(result, err, eidx=eidx):
                if err is not None:
                    failed.append(err)
                else:
                    gathered[eidx] = result
                pending["n"] -= 1
                if pending["n"] == 0:
                    after_gather()

            _ExtentRead(self, rec, eidx, ext, needs[eidx], verify=True, cb=done).start()

    def _build_write_updates(self, rec: ObjectRecord, offset: int, data: bytes,
                             gathered: dict[int, dict[int, bytes]], zeros: bytes) -> list[dict]:
        bs = rec.block_size
        nw = len(data) // bs
        end = offset + nw
        cluster = self.cluster
        unit_writes: dict[tuple, dict] = {}  # unit_key -> {"device", "node", "writes": {idx: bytes}}

        def add_write(device, unit_key, internal_idx, payload):
            entry = unit_writes.setdefault(unit_key, {
                "device": device, "node": cluster.devices[device].node_id, "writes": {}})
            entry["writes"][internal_idx] = payload

        def block_data(abs_block: int) -> bytes:
            return data[(abs_block - offset) * bs:(abs_block - offset + 1) * bs]

        for eidx, ext in enumerate(rec.layout.extents):
            lo, hi = max(offset, ext.start), min(end, ext.end)
            if lo >= hi:
                continue
            pmap = ext.placement_map()
            sib = gathered.get(eidx, {})
            length = ext.length

            def rel_bytes(rel: int) -> bytes:
                ab = ext.start + rel
                if offset <= ab < end:
                    return block_data(ab)
                if rel in sib:
                    return sib[rel]
                return zeros

            if isinstance(ext.sub.scheme, Replication):
                nrep = ext.sub.scheme.n
                for rel in range(lo - ext.start, hi - ext.start):
                    payload = block_data(ext.start + rel)
                    for i in range(nrep):
                        device = pmap[(0, "replica", i)]
                        key = make_unit_key(rec.id, eidx, ext.gen, 0, ("replica", i))
                        add_write(device, key, rel, payload)
            else:
                n, k, u = ext.sub.scheme.n, ext.sub.scheme.k, ext.sub.unit_size
                span = n * u
                rel_lo, rel_hi = lo - ext.start, hi - ext.start
                for s in range(rel_lo // span, (rel_hi - 1) // span + 1):
                    base = s * span
                    positions = sorted({(rel - base) % u
                                        for rel in range(max(rel_lo, base),
                                                         min(rel_hi, base + span))})
                    for p in positions:
                        stripe_blocks = []
                        for i in range(n):
                            rel = base + i * u + p
                            stripe_blocks.append(rel_bytes(rel) if rel < length else zeros)
                            if rel < length and offset <= ext.start + rel < end:
                                device = pmap[(s, "data", i)]
                                key = make_unit_key(rec.id, eidx, ext.gen, s, ("data", i))
                                add_write(device, key, p, stripe_blocks[-1])
                        if k:
                            parities = erasure.parity_encode(stripe_blocks, k)
                            for j in range(k):
                                device = pmap[(s, "parity", j)]
                                key = make_unit_key(rec.id, eidx, ext.gen, s, ("parity", j))
                                add_write(device, key, p, parities[j])

        updates = []
        for key in sorted(unit_writes):
            entry = unit_writes[key]
            updates.append({
                "node": entry["node"], "kind": "obj-block-write",
                "device": list(entry["device"]), "unit_key": list(key),
                "writes": sorted(entry["writes"].items())})
        sums = block_checksums_bulk(data, bs)
        checks = {str(offset + i): sums[i] for i in range(nw)}
        updates.append(self._coord_update(
            "catalog", op="obj-merge",
            payload={"id": rec.id.to_json(), "checksums": checks}))
        return updates

    def obj_read(self, obj: EntityId, offset_block: int, nblocks: int) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                rec = self.catalog().get_object(obj)
                if offset_block < 0 or nblocks < 0 or offset_block + nblocks > rec.nblocks:
                    raise RangeOutOfBounds(offset=offset_block, nblocks=nblocks,
                                           object_blocks=rec.nblocks)
            except SageError as err:
                self._fail(op, err)
                return
            if nblocks == 0:
                op.result = b""
                self._transition(op, EXECUTED)
                return
            end = offset_block + nblocks
            parts = []
            for eidx, ext in enumerate(rec.layout.extents):
                lo, hi = max(offset_block, ext.start), min(end, ext.end)
                if lo < hi:
                    parts.append((eidx, ext, list(range(lo - ext.start, hi - ext.start))))
            results: dict[int, dict[int, bytes]] = {}
            pending = {"n": len(parts)}
            failed: list[SageError] = []

            def assemble():
                if failed:
                    self._fail(op, failed[0])
                    return
                buf = bytearray()
                for eidx, ext, rels in parts:
                    blocks = results[eidx]
                    for rel in rels:
                        buf += blocks[rel]
                if self.on_access is not None:
                    self.on_access(rec.id, [eidx for eidx, _, _ in parts])
                op.result = bytes(buf)
                self._transition(op, EXECUTED)

            for eidx, ext, rels in parts:
                def done(result, err, eidx=eidx):
                    if err is not None:
                        failed.append(err)
                    else:
                        results[eidx] = result
                    pending["n"] -= 1
                    if pending["n"] == 0:
                        assemble()
                _ExtentRead(self, rec, eidx, ext, rels, verify=True, cb=done).start()
        return self._new_op("obj_read", exec_fn)

    def obj_free(self, obj: EntityId, tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                rec = self.catalog().get_object(obj)
                self.catalog().check_writable(rec.realm)
            except SageError as err:
                if tx is not None:
                    tx.poisoned = str(err)
                self._fail(op, err)
                return
            from .layout import extent_units
            updates = []
            for eidx, ext in enumerate(rec.layout.extents):
                pmap = ext.placement_map()
                for stripe, role, _nb, _lo, _hi in extent_units(ext.length, ext.sub):
                    tier, dev = pmap[(stripe, role[0], role[1])]
                    device = self.cluster.devices[(tier, dev)]
                    updates.append({
                        "node": device.node_id, "kind": "free-unit",
                        "device": [tier, dev],
                        "unit_key": list(make_unit_key(rec.id, eidx, ext.gen, stripe, role))})
            updates.append(self._coord_update("catalog", op="ent-del",
                                              payload={"id": rec.id.to_json()}))
            updates.append(self._coord_update("catalog", op="member-gc",
                                              payload={"id": rec.id.to_json()}))
            self._mutation(op, tx, updates, None)
        return self._new_op("obj_free", exec_fn)

    # ---------------------------------------------------------------- indices

    def idx_create(self, realm: EntityId, attrs: dict | None = None,
                   tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                self.catalog().realm(realm)
                self.catalog().check_writable(realm)
            except SageError as err:
                self._fail(op, err)
                return
            iid = self.id_generate(EntityKind.INDEX)
            up_nodes = sorted(n for n, node in self.cluster.nodes.items() if node.up)
            home = pick_node(self.cluster.seed, iid, up_nodes)
            rec = IndexRecord(id=iid, realm=realm, home_node=home, attrs=attrs or {})
            upd = self._coord_update("catalog", op="ent-put",
                                     payload={"record": rec.to_json()})
            self._mutation(op, tx, [upd], iid)
        return self._new_op("idx_create", exec_fn)

    def _index_home(self, index: EntityId) -> tuple[IndexRecord, str]:
        rec = self.catalog().get_index(index)
        if not self.cluster.nodes[rec.home_node].up:
            raise NodeUnavailable(node=rec.home_node, index=index.short())
        return rec, rec.home_node

    def _index_kv(self, index: EntityId, home: str):
        return self.cluster.nodes[home].volatile.indexes.get(index.value)

    def idx_put(self, index: EntityId, key: bytes, value: bytes,
                tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                rec, home = self._index_home(index)
                self.catalog().check_writable(rec.realm)
            except SageError as err:
                if tx is not None:
                    tx.poisoned = str(err)
                self._fail(op, err)
                return
            upd = {"node": home, "kind": "idx-put", "index": index.to_json(),
                   "key": bytes(key), "value": bytes(value)}
            self._mutation(op, tx, [upd], None)
        return self._new_op("idx_put", exec_fn)

    def idx_del(self, index: EntityId, key: bytes,
                tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                rec, home = self._index_home(index)
                self.catalog().check_writable(rec.realm)
                kv = self._index_kv(index, home)
                if kv is None or kv.get(bytes(key)) is None:
                    raise KeyNotFound(index=index.short())
            except SageError as err:
                if tx is not None:
                    tx.poisoned = str(err)
                self._fail(op, err)
                return
            upd = {"node": home, "kind": "idx-del", "index": index.to_json(),
                   "key": bytes(key)}
            self._mutation(op, tx, [upd], None)
        return self._new_op("idx_del", exec_fn)

    def idx_get(self, index: EntityId, key: bytes) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                rec, home = self._index_home(index)
                kv = self._index_kv(index, home)
                value = kv.get(bytes(key)) if kv is not None else None
                if value is None:
                    raise KeyNotFound(index=index.short())
            except SageError as err:
                self._fail(op, err)
                return
            op.result = value
            self._transition(op, EXECUTED)
        return self._new_op("idx_get", exec_fn)

    def idx_next(self, index: EntityId, key: bytes, n: int) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                rec, home = self._index_home(index)
            except SageError as err:
                self._fail(op, err)
                return
            kv = self._index_kv(index, home)
            op.result = kv.next_after(bytes(key), n) if kv is not None else []
            self._transition(op, EXECUTED)
        return self._new_op("idx_next", exec_fn)

    def idx_free(self, index: EntityId, tx: Transaction | None = None) -> Operation:
        def exec_fn(op):
            try:
                self._coordinator_up()
                rec = self.catalog().get_index(index)
                self.catalog().check_writable(rec.realm)
            except SageError as err:
                if tx is not None:
                    tx.poisoned = str(err)
                self._fail(op, err)
                return
            updates = [
                {"node": rec.home_node, "kind": "idx-drop", "index": index.to_json()},
                self._coord_update("catalog", op="ent-del", payload={"id": index.to_json()}),
                self._coord_update("catalog", op="member-gc", payload={"id": index.to_json()}),
            ]
            self._mutation(op, tx, updates, None)
        return self._new_op("idx_free", exec_fn)


class _ExtentRead:
    """Read extent-relative blocks with replica fallback and parity
    reconstruction; retries with a growing exclusion set on mid-flight
    device loss or checksum mismatch."""

    def __init__(self, ctx: ClientContext, rec: ObjectRecord, eidx: int,
                 ext: Extent, rels: list[int], verify: bool, cb):
        self.ctx = ctx
        self.cluster = ctx.cluster
        self.rec = rec
        self.eidx = eidx
        self.ext = ext
        self.rels = rels
        self.verify = verify
        self.cb = cb  # cb(result: dict[rel -> bytes] | None, err | None)
        self.bad_units: set[tuple] = set()
        self.attempts = 0

    # a unit is usable if its device and node are up and the unit exists
    def _viable(self, stripe: int, role: tuple) -> bool:
        key = make_unit_key(self.rec.id, self.eidx, self.ext.gen, stripe, role)
        if key in self.bad_units:
            return False
        tier_dev = self.ext.placement_map().get((stripe, role[0], role[1]))
        if tier_dev is None:
            return False
        dev = self.cluster.devices[tier_dev]
        return (dev.status == "ONLINE" and self.cluster.nodes[dev.node_id].up
                and key in dev.units)

    def _device(self, stripe, role):
        return self.ext.placement_map()[(stripe, role[0], role[1])]

    def start(self):
        self.attempts += 1
        if self.attempts > _READ_RETRY_LIMIT:
            self.cb(None, DataUnavailable(obj=self.rec.id.short(), extent=self.eidx,
                                          reason="retry limit"))
            return
        try:
            plan = self._plan()
        except SageError as err:
            self.cb(None, err)
            return
        self._submit(plan)

    def _plan(self):
        """Figure out which unit blocks to read; returns
        {unit(sig): {"device", "blocks": {internal_idx}, "key"}} plus the
        per-rel assembly recipe."""
        ext, rec = self.ext, self.rec
        reads: dict[tuple, dict] = {}
        recipe: list = []  # ("direct", rel, sig, idx) | ("reconstruct", stripe, positions)

        def want(stripe, role, internal_idx):
            sig = (stripe, role)
            entry = reads.setdefault(sig, {
                "device": self._device(stripe, role),
                "key": make_unit_key(rec.id, self.eidx, ext.gen, stripe, role),
                "blocks": set()})
            entry["blocks"].add(internal_idx)

        if isinstance(ext.sub.scheme, Replication):
            nrep = ext.sub.scheme.n
            src = None
            for i in range(nrep):
                if self._viable(0, ("replica", i)):
                    src = i
                    break
            if src is None:
                raise DataUnavailable(obj=rec.id.short(), extent=self.eidx,
                                      reason="no replica available")
            for rel in self.rels:
                want(0, ("replica", src), rel)
                recipe.append(("direct", rel, (0, ("replica", src)), rel))
            return reads, recipe

        n, k, u = ext.sub.scheme.n, ext.sub.scheme.k, ext.sub.unit_size
        span = n * u
        length = ext.length
        degraded: dict[int, set[int]] = {}  # stripe -> positions to reconstruct
        for rel in self.rels:
            s, off = rel // span, rel % span
            i, p = off // u, off % u
            if self._viable(s, ("data", i)):
                want(s, ("data", i), p)
                recipe.append(("direct", rel, (s, ("data", i)), p))
            else:
                degraded.setdefault(s, set()).add(p)
                recipe.append(("rc", rel, s, (i, p)))
        for s in sorted(degraded):
            base = s * span
            positions = sorted(degraded[s])
            missing = []
            for i in range(n):
                if base + i * u < length and not self._viable(s, ("data", i)):
                    missing.append(("data", i))
            avail_parity = [j for j in range(k) if self._viable(s, ("parity", j))]
            if len(missing) > len(avail_parity):
                raise DataUnavailable(obj=rec.id.short(), extent=self.eidx, stripe=s,
                                      lost=len(missing), parity=len(avail_parity))
            for i in range(n):
                if base + i * u >= length:
                    continue
                if self._viable(s, ("data", i)):
                    for p in positions:
                        want(s, ("data", i), p)
            for j in avail_parity:
                for p in positions:
                    want(s, ("parity", j), p)
        self._degraded = degraded
        return reads, recipe

    def _submit(self, plan):
        reads, recipe = plan
        cluster = self.cluster
        bs = self.rec.block_size
        zeros = b"\x00" * bs
        data: dict[tuple, dict[int, bytes]] = {}
        pending = {"n": 0}
        failed = {"flag": False}

        def finish():
            if failed["flag"]:
                self.start()  # replan with updated exclusions
                return
            try:
                result = self._assemble(recipe, data, zeros)
            except _RetryRead:
                self.start()
                return
            except SageError as err:
                self.cb(None, err)
                return
            self.cb(result, None)

        if not reads:
            finish()
            return

        for sig in sorted(reads, key=lambda s: (s[0], s[1][0], s[1][1])):
            entry = reads[sig]
            blocks = sorted(entry["blocks"])
            dev = cluster.devices[entry["device"]]
            key = entry["key"]
            pending["n"] += 1

            def complete(ok, sig=sig, dev=dev, key=key, blocks=blocks):
                if not ok:
                    self.bad_units.add(key)
                    failed["flag"] = True
                else:
                    unit = dev.units.get(key)
                    if unit is None:
                        self.bad_units.add(key)
                        failed["flag"] = True
                    else:
                        data[sig] = {b: unit.blocks.get(b, zeros) for b in blocks}
                pending["n"] -= 1
                if pending["n"] == 0:
                    finish()

            try:
                cluster.io_submit(entry["device"], "read", len(blocks) * bs,
                                  complete, client_owned=True)
            except SageError:
                self.bad_units.add(key)
                failed["flag"] = True
                pending["n"] -= 1
                if pending["n"] == 0:
                    finish()

    def _assemble(self, recipe, data, zeros):
        ext, rec = self.ext, self.rec
        bs = rec.block_size
        out: dict[int, bytes] = {}
        rc_cache: dict[tuple[int, int], dict] = {}  # (stripe, p) -> role -> bytes

        if isinstance(ext.sub.scheme, Striped):
            n, k, u = ext.sub.scheme.n, ext.sub.scheme.k, ext.sub.unit_size
            span, length = n * u, ext.length

            def reconstruct(s, p):
                if (s, p) in rc_cache:
                    return rc_cache[(s, p)]
                base = s * span
                available, missing = {}, set()
                for i in range(n):
                    rel = base + i * u + p
                    if rel >= length:
                        available[("data", i)] = zeros  # past the extent tail
                    elif (s, ("data", i)) in data and p in data[(s, ("data", i))]:
                        available[("data", i)] = data[(s, ("data", i))][p]
                    else:
                        missing.add(("data", i))
                for j in range(k):
                    if (s, ("parity", j)) in data and p in data[(s, ("parity", j))]:
                        available[("parity", j)] = data[(s, ("parity", j))][p]
                    else:
                        missing.add(("parity", j))
                solved = erasure.parity_reconstruct(available, missing, n, k)
                merged = {**available, **solved}
                rc_cache[(s, p)] = merged
                return merged

        for item in recipe:
            if item[0] == "direct":
                _, rel, sig, idx = item
                out[rel] = data[sig][idx]
            else:
                _, rel, s, (i, p) = item
                merged = reconstruct(s, p)
                out[rel] = merged[("data", i)]

        if self.verify:
            for rel in self.rels:
                expected = rec.checksums.get(ext.start + rel)
                if expected is None:
                    continue
                if block_checksum(out[rel]) != expected:
                    # distrust the unit that produced this block and retry
                    sig = self._source_sig(rel)
                    if sig is not None:
                        key = make_unit_key(rec.id, self.eidx, ext.gen, sig[0], sig[1])
                        if key not in self.bad_units:
                            self.bad_units.add(key)
                            raise _RetryRead()
                    raise ChecksumMismatch(obj=rec.id.short(),
                                           block=ext.start + rel)
        return out

    def _source_sig(self, rel):
        ext = self.ext
        if isinstance(ext.sub.scheme, Replication):
            for i in range(ext.sub.scheme.n):
                if self._viable(0, ("replica", i)):
                    return (0, ("replica", i))
            return None
        n, u = ext.sub.scheme.n, ext.sub.unit_size
        s, off = rel // (n * u), rel % (n * u)
        return (s, ("data", off // u))


class _RetryRead(Exception):
    pass
