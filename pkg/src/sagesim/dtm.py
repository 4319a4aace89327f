"""Failure-atomic distributed transactions.

Presumed-abort two-phase commit with redo-only logging:

* the client ships all updates to the coordinator (``dtm.begin``),
* the coordinator logs TX_BEGIN and fans out PREPARE(redo),
* participants log PREPARED (redo payload included) and ack,
* the coordinator's COMMIT record is the commit point; participants then
  apply the redo to devices and volatile state, log APPLIED and ack,
* the transaction is STABLE once every participant's APPLIED is durable.

Updates apply only after commit, so there is nothing to undo; redo
application is idempotent and replaying a WAL prefix is always safe.
In-doubt participants resolve against the coordinator's durable log:
COMMIT present means redo-apply, absent means presumed abort.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .catalog import Catalog
from .errors import EpochClosed, InvalidState, NodeUnavailable
from .ids import EntityId
from .okv import OrderedKV

MASK64 = (1 << 64) - 1

OPEN = "OPEN"
PREPARING = "PREPARING"
COMMITTED = "COMMITTED"
ABORTED = "ABORTED"
STABLE = "STABLE"


def make_txid(epoch: int, counter: int) -> int:
    return ((epoch & MASK64) << 64) | (counter & MASK64)


def txid_epoch(txid: int) -> int:
    return txid >> 64


def txid_counter(txid: int) -> int:
    return txid & MASK64


def txid_str(txid: int) -> str:
    return f"{txid_epoch(txid)}.{txid_counter(txid)}"


@dataclass
class Transaction:
    """Client-side transaction handle."""

    txid: int
    epoch: int
    coordinator: str
    updates: list[dict] = field(default_factory=list)
    state: str = OPEN
    abort_reason: str = ""
    poisoned: str | None = None  # a bound op failed validation: abort-only
    on_decided: list = field(default_factory=list)  # fn(committed: bool, reason: str)
    on_stable: list = field(default_factory=list)   # fn()

    def add_update(self, update: dict):
        if self.state != OPEN:
            raise InvalidState(tx=txid_str(self.txid), state=self.state)
        self.updates.append(update)


def participants_of(updates: list[dict]) -> list[str]:
    return sorted({u["node"] for u in updates})


class DtmEngine:
    """Protocol driver; all per-transaction server state lives in node
    volatile memory and is rebuilt from the WAL on recovery."""

    def __init__(self, cluster):
        self.cluster = cluster
        self.waiters: dict[int, Transaction] = {}  # client runtime, crash-immune
        cluster.handlers.update({
            "dtm.begin": self._h_begin,
            "dtm.prepare": self._h_prepare,
            "dtm.prepare_ack": self._h_prepare_ack,
            "dtm.commit": self._h_commit,
            "dtm.abort": self._h_abort,
            "dtm.stable_ack": self._h_stable_ack,
            "dtm.outcome_query": self._h_outcome_query,
            "dtm.outcome_reply": self._h_outcome_reply,
            "dtm.recovered": self._h_recovered,
        })

    # ------------------------------------------------------------------ utils

    @property
    def coord_id(self) -> str:
        return self.cluster.coordinator_id

    def _coord_node(self):
        return self.cluster.nodes[self.coord_id]

    def _require_coordinator_up(self):
        if not self._coord_node().up:
            raise NodeUnavailable(node=self.coord_id, role="coordinator")

    def current_epoch(self) -> int:
        return self._coord_node().volatile.epochs_closed + 1

    def _vol(self, node_id: str):
        return self.cluster.nodes[node_id].volatile

    def _trace_tx(self, event: str, txid: int, **kv):
        self.cluster.trace.add("tx", self.cluster.now, te=event, tx=txid_str(txid), **kv)

    # ------------------------------------------------------------- client API

    def tx_begin(self, realm: EntityId, epoch: int | None = None) -> Transaction:
        self._require_coordinator_up()
        self.cluster.catalog().check_writable(realm)
        vol = self._coord_node().volatile
        cur = self.current_epoch()
        if epoch is None:
            epoch = cur
        if epoch != cur or vol.tx_meta.get("@closing"):
            raise EpochClosed(epoch=epoch, current=cur)
        counter = vol.tx_meta.get("@counter", 0) + 1
        vol.tx_meta["@counter"] = counter
        return Transaction(txid=make_txid(epoch, counter), epoch=epoch,
                           coordinator=self.coord_id)

    def tx_commit(self, tx: Transaction):
        """Launch the commit protocol; outcome arrives via tx callbacks."""
        if tx.state != OPEN:
            raise InvalidState(tx=txid_str(tx.txid), state=tx.state)
        if tx.poisoned:
            tx.state = ABORTED
            tx.abort_reason = tx.poisoned
            self.cluster.stats.tx_aborted += 1
            self._trace_tx("abort", tx.txid, reason="poisoned")
            for fn in tx.on_decided:
                fn(False, tx.poisoned)
            return
        tx.state = PREPARING
        self.waiters[tx.txid] = tx
        self.cluster.send(None, tx.coordinator, "dtm.begin",
                          {"txid": tx.txid, "epoch": tx.epoch, "updates": tx.updates})

    def tx_abort(self, tx: Transaction):
        """Abort a still-open transaction; nothing was durable yet."""
        if tx.state != OPEN:
            raise InvalidState(tx=txid_str(tx.txid), state=tx.state)
        tx.state = ABORTED
        tx.abort_reason = "client abort"
        self.cluster.stats.tx_aborted += 1
        self._trace_tx("client-abort", tx.txid)

    def epoch_close(self, on_done=None):
        """Barrier: no new transactions in this epoch; completes when every
        transaction of the epoch has settled."""
        self._require_coordinator_up()
        vol = self._coord_node().volatile
        vol.tx_meta["@closing"] = True
        waiters = vol.tx_meta.setdefault("@close_waiters", [])
        if on_done is not None:
            waiters.append(on_done)
        self.cluster.loop.schedule(0, "dtm.epoch_close", self._maybe_finish_epoch_close)

    def _maybe_finish_epoch_close(self):
        node = self._coord_node()
        vol = node.volatile
        if not vol.tx_meta.get("@closing"):
            return
        if any(isinstance(k, int) for k in vol.tx_meta):
            return  # transactions still in flight at the coordinator
        epoch = self.current_epoch()
        for txid, tx in self.waiters.items():
            if tx.state == PREPARING and txid_epoch(txid) == epoch:
                return  # commit launched before the barrier, still draining
        self.cluster.wal_append(self.coord_id, "EPOCH_CLOSE", payload={"epoch": epoch})
        vol.epochs_closed += 1
        vol.tx_meta["@closing"] = False
        waiters = vol.tx_meta.pop("@close_waiters", [])
        self._trace_tx("epoch-close", make_txid(epoch, 0))
        self.cluster.telemetry.emit(self.cluster.now, "dtm", "epoch.close", epoch=epoch)
        for fn in waiters:
            fn(epoch)

    # ----------------------------------------------------- client notification

    def _notify_decided(self, txid: int, committed: bool, reason: str = ""):
        tx = self.waiters.get(txid)
        if tx is None:
            return
        if committed:
            tx.state = COMMITTED
        else:
            tx.state = ABORTED
            tx.abort_reason = reason
            self.waiters.pop(txid, None)
        for fn in tx.on_decided:
            fn(committed, reason)

    def _notify_stable(self, txid: int):
        tx = self.waiters.pop(txid, None)
        if tx is None:
            return
        tx.state = STABLE
        for fn in tx.on_stable:
            fn()

    def fail_waiters_for_coordinator_crash(self):
        """Client ops lose their outcome channel when the coordinator dies;
        the transactions themselves settle during coordinator recovery."""
        for txid in sorted(self.waiters):
            tx = self.waiters[txid]
            if tx.state == PREPARING:
                self._notify_decided(txid, False, "coordinator crashed; outcome unknown")

    # ------------------------------------------------------- coordinator side

    def _h_begin(self, src, dst, payload):
        cluster = self.cluster
        txid, epoch, updates = payload["txid"], payload["epoch"], payload["updates"]
        vol = self._vol(dst)
        if epoch != self.current_epoch():
            # the epoch closed under the handle; already-begun transactions of
            # the *current* epoch are still admitted while it is closing
            self._notify_decided(txid, False, "epoch closed")
            cluster.stats.tx_aborted += 1
            self._maybe_finish_epoch_close()
            return
        floor = vol.tx_meta.get("@counter", 0)
        vol.tx_meta["@counter"] = max(floor, txid_counter(txid))
        parts = participants_of(updates)
        down = [p for p in parts if not cluster.nodes[p].up]
        cluster.wal_append(dst, "TX_BEGIN", txid,
                           {"participants": parts, "epoch": epoch})
        vol.outcomes.setdefault(txid, None)
        if down:
            self._abort_tx(dst, txid, parts, f"participant {down[0]} unavailable", sent=[])
            return
        vol.tx_meta[txid] = {"state": "preparing", "participants": parts,
                             "acks": [], "stable_acks": [], "epoch": epoch}
        self._trace_tx("begin", txid, parts=parts)
        by_node = {p: [u for u in updates if u["node"] == p] for p in parts}
        if not parts:
            self._commit_point(dst, txid)
            return

        def fanout():
            for p in parts:
                cluster.send(dst, p, "dtm.prepare",
                             {"txid": txid, "coordinator": dst, "updates": by_node[p]})
        cluster.after_fsync(dst, "dtm.fanout", fanout)

    def _h_prepare_ack(self, src, dst, payload):
        txid, ok = payload["txid"], payload["ok"]
        vol = self._vol(dst)
        meta = vol.tx_meta.get(txid)
        if meta is None or meta["state"] != "preparing":
            return
        if not ok:
            self._abort_tx(dst, txid, meta["participants"],
                           payload.get("reason", f"prepare rejected by {src}"),
                           sent=meta["participants"])
            return
        if src not in meta["acks"]:
            meta["acks"].append(src)
        if len(meta["acks"]) == len(meta["participants"]):
            self._commit_point(dst, txid)

    def _commit_point(self, dst, txid):
        cluster = self.cluster
        vol = self._vol(dst)
        meta = vol.tx_meta[txid]
        cluster.wal_append(dst, "COMMIT", txid)
        vol.outcomes[txid] = COMMITTED
        meta["state"] = "committed"
        cluster.stats.tx_committed += 1
        self._trace_tx("commit", txid)
        self._notify_decided(txid, True)
        parts = meta["participants"]
        if not parts:
            def stable():
                self._settle(dst, txid)
            cluster.after_fsync(dst, "dtm.stable", stable)
            return

        def fanout():
            for p in parts:
                cluster.send(dst, p, "dtm.commit", {"txid": txid, "coordinator": dst})
        cluster.after_fsync(dst, "dtm.commit_fanout", fanout)

    def _abort_tx(self, dst, txid, parts, reason, sent):
        cluster = self.cluster
        vol = self._vol(dst)
        cluster.wal_append(dst, "ABORT", txid, {"role": "coord"})
        vol.outcomes[txid] = ABORTED
        vol.tx_meta.pop(txid, None)
        cluster.stats.tx_aborted += 1
        self._trace_tx("abort", txid, reason=reason)
        self._notify_decided(txid, False, reason)
        for p in sent:
            if cluster.nodes[p].up:
                cluster.send(dst, p, "dtm.abort", {"txid": txid})
        self._maybe_finish_epoch_close()

    def _h_stable_ack(self, src, dst, payload):
        txid = payload["txid"]
        vol = self._vol(dst)
        meta = vol.tx_meta.get(txid)
        if meta is None or meta["state"] != "committed":
            return
        if src not in meta["stable_acks"]:
            meta["stable_acks"].append(src)
        if set(meta["stable_acks"]) >= set(meta["participants"]):
            self._settle(dst, txid)

    def _settle(self, dst, txid):
        vol = self._vol(dst)
        vol.tx_meta.pop(txid, None)
        self._trace_tx("stable", txid)
        self.cluster.telemetry.emit(self.cluster.now, "dtm", "tx.stable", tx=txid_str(txid))
        self._notify_stable(txid)
        self._maybe_finish_epoch_close()

    def on_node_crash(self, node_id: str):
        """HA notice: abort every in-flight transaction waiting on the node."""
        coord = self._coord_node()
        if node_id == self.coord_id:
            self.fail_waiters_for_coordinator_crash()
            return
        if not coord.up:
            return
        vol = coord.volatile
        for txid in sorted(k for k in vol.tx_meta if isinstance(k, int)):
            meta = vol.tx_meta[txid]
            if meta["state"] == "preparing" and node_id in meta["participants"]:
                others = [p for p in meta["participants"] if p != node_id]
                self._abort_tx(self.coord_id, txid, meta["participants"],
                               f"participant {node_id} crashed", sent=others)

    # ------------------------------------------------------- participant side

    def _h_prepare(self, src, dst, payload):
        cluster = self.cluster
        txid, updates = payload["txid"], payload["updates"]
        vol = self._vol(dst)
        if txid in vol.aborted:
            return
        if txid in vol.applied or txid in vol.prepared:
            cluster.send(dst, src, "dtm.prepare_ack", {"txid": txid, "ok": True})
            return
        err = self._validate_updates(dst, updates)
        if err:
            cluster.send(dst, src, "dtm.prepare_ack",
                         {"txid": txid, "ok": False, "reason": err})
            return
        cluster.wal_append(dst, "PREPARED", txid,
                           {"coordinator": payload["coordinator"], "updates": updates})
        vol.prepared[txid] = {"coordinator": payload["coordinator"], "updates": updates}

        def ack():
            cluster.send(dst, src, "dtm.prepare_ack", {"txid": txid, "ok": True})
        cluster.after_fsync(dst, "dtm.prepare_ack", ack)

    def _validate_updates(self, node_id: str, updates: list[dict]) -> str | None:
        cluster = self.cluster
        for u in updates:
            if u["node"] != node_id:
                return "update routed to wrong node"
            dev_ref = u.get("device")
            if dev_ref is not None:
                dev = cluster.devices.get(tuple(dev_ref))
                if dev is None:
                    return f"unknown device {dev_ref}"
                if dev.status != "ONLINE":
                    return f"device {dev_ref} failed"
                if u["kind"] == "alloc-unit" and dev.free_blocks < u["nblocks"]:
                    return f"device {dev_ref} out of capacity"
        return None

    def _h_commit(self, src, dst, payload):
        cluster = self.cluster
        txid = payload["txid"]
        vol = self._vol(dst)
        if txid in vol.applied:
            cluster.send(dst, src, "dtm.stable_ack", {"txid": txid})
            return
        entry = vol.prepared.get(txid)
        if entry is None:
            # cannot happen if the protocol invariant holds (COMMIT implies a
            # durable PREPARED on every participant); surfaced, not hidden
            cluster.telemetry.emit(cluster.now, "dtm", "anomaly.commit_without_prepare",
                                   tx=txid_str(txid), node=dst)
            return
        self._apply_tx(dst, txid, entry["updates"], reply_to=src)

    def _apply_tx(self, node_id: str, txid: int, updates: list[dict], reply_to: str):
        """Post-commit redo application: state mutates now; APPLIED is logged
        after the billed device I/O completes."""
        cluster = self.cluster
        vol = self._vol(node_id)
        io_bytes: dict[tuple, int] = {}
        for u in updates:
            apply_update(cluster, node_id, u)
            if u["kind"] == "obj-block-write":
                dev = tuple(u["device"])
                io_bytes[dev] = io_bytes.get(dev, 0) + sum(len(b) for _, b in u["writes"])
        pending = {"n": 0}

        def io_done(_ok: bool):
            pending["n"] -= 1
            if pending["n"] == 0:
                finish()

        def finish():
            if not cluster.nodes[node_id].up:
                return
            cluster.wal_append(node_id, "APPLIED", txid)
            vol.applied.add(txid)
            vol.prepared.pop(txid, None)

            def ack():
                cluster.send(node_id, reply_to, "dtm.stable_ack", {"txid": txid})
            cluster.after_fsync(node_id, "dtm.stable_ack", ack)

        for dev, nbytes in sorted(io_bytes.items()):
            if cluster.devices[dev].status == "ONLINE":
                pending["n"] += 1
                cluster.io_submit(dev, "write", nbytes, io_done)
        if pending["n"] == 0:
            finish()

    def _h_abort(self, src, dst, payload):
        cluster = self.cluster
        txid = payload["txid"]
        vol = self._vol(dst)
        if txid in vol.prepared:
            cluster.wal_append(dst, "ABORT", txid, {"role": "part"})
            vol.prepared.pop(txid, None)
            vol.aborted.add(txid)

    # ------------------------------------------------------------- recovery

    def _h_outcome_query(self, src, dst, payload):
        txid = payload["txid"]
        outcome = self._vol(dst).outcomes.get(txid)
        resolved = COMMITTED if outcome == COMMITTED else ABORTED  # presumed abort
        self.cluster.send(dst, src, "dtm.outcome_reply", {"txid": txid, "outcome": resolved})

    def _h_outcome_reply(self, src, dst, payload):
        txid, outcome = payload["txid"], payload["outcome"]
        vol = self._vol(dst)
        entry = vol.prepared.get(txid)
        if entry is None or txid in vol.applied:
            return
        if outcome == COMMITTED:
            self._apply_tx(dst, txid, entry["updates"], reply_to=entry["coordinator"])
        else:
            self.cluster.wal_append(dst, "ABORT", txid, {"role": "part"})
            vol.prepared.pop(txid, None)
            vol.aborted.add(txid)
        report = vol.recovery_report
        if report is not None and txid_str(txid) in report["in_doubt"]:
            report["in_doubt"].remove(txid_str(txid))
            key = "restored" if outcome == COMMITTED else "eliminated"
            report[key].append(txid_str(txid))

    def _h_recovered(self, src, dst, payload):
        """A participant finished recovery: re-drive its unstable commits."""
        vol = self._vol(dst)
        for txid in sorted(k for k in vol.tx_meta if isinstance(k, int)):
            meta = vol.tx_meta[txid]
            if (meta["state"] == "committed" and src in meta["participants"]
                    and src not in meta["stable_acks"]):
                self.cluster.send(dst, src, "dtm.commit", {"txid": txid, "coordinator": dst})

    def recover(self, node_id: str) -> dict:
        """Replay the node's WAL into fresh volatile state and resolve every
        in-doubt transaction. Idempotent: a second run reports nothing new."""
        cluster = self.cluster
        node = cluster.nodes[node_id]
        if node.status == "CRASHED":
            raise NodeUnavailable(node=node_id, reason="restart before recover")
        from .cluster import NodeVolatile
        node.volatile = NodeVolatile()
        vol = node.volatile
        begun: dict[int, list[str]] = {}
        applied_order: list[int] = []
        for rec in node.wal:
            if rec.kind == "CONFIG":
                cluster.apply_config_record(node, rec)
            elif rec.kind == "TX_BEGIN":
                begun[rec.txid] = rec.payload["participants"]
                vol.outcomes.setdefault(rec.txid, None)
                floor = vol.tx_meta.get("@counter", 0)
                vol.tx_meta["@counter"] = max(floor, txid_counter(rec.txid))
            elif rec.kind == "PREPARED":
                vol.prepared[rec.txid] = {"coordinator": rec.payload["coordinator"],
                                          "updates": rec.payload["updates"]}
            elif rec.kind == "COMMIT":
                vol.outcomes[rec.txid] = COMMITTED
            elif rec.kind == "ABORT":
                if rec.payload.get("role") == "part":
                    vol.aborted.add(rec.txid)
                    vol.prepared.pop(rec.txid, None)
                else:
                    vol.outcomes[rec.txid] = ABORTED
            elif rec.kind == "APPLIED":
                vol.applied.add(rec.txid)
                applied_order.append(rec.txid)
            elif rec.kind == "EPOCH_CLOSE":
                vol.epochs_closed += 1
        # re-apply committed redo in WAL order to rebuild volatile state and
        # close any device gaps (idempotent)
        for txid in applied_order:
            entry = vol.prepared.get(txid)
            if entry is not None:
                for u in entry["updates"]:
                    apply_update(cluster, node_id, u)
        for txid in sorted(vol.applied):
            vol.prepared.pop(txid, None)

        report = {"restored": [], "eliminated": [], "in_doubt": []}
        for txid in sorted(vol.prepared):
            entry = vol.prepared[txid]
            coord = entry["coordinator"]
            if coord == node_id:
                outcome = vol.outcomes.get(txid)
                if outcome == COMMITTED:
                    self._apply_tx(node_id, txid, entry["updates"], reply_to=node_id)
                    report["restored"].append(txid_str(txid))
                else:
                    cluster.wal_append(node_id, "ABORT", txid, {"role": "part"})
                    vol.aborted.add(txid)
                    vol.prepared.pop(txid, None)
                    report["eliminated"].append(txid_str(txid))
            elif cluster.nodes[coord].up:
                cluster.send(node_id, coord, "dtm.outcome_query", {"txid": txid})
                report["in_doubt"].append(txid_str(txid))
            else:
                report["in_doubt"].append(txid_str(txid))

        if node_id == self.coord_id:
            self._coordinator_redrive(node_id, begun, vol)
        if node.status == "RECOVERING":
            node.status = "ONLINE"
        vol.recovery_report = report
        cluster.trace.add("recover", cluster.now, node=node_id,
                          restored=len(report["restored"]),
                          eliminated=len(report["eliminated"]),
                          in_doubt=len(report["in_doubt"]))
        cluster.telemetry.emit(cluster.now, "dtm", "recover", node=node_id, **{
            k: len(v) for k, v in report.items()})
        if node_id != self.coord_id and self._coord_node().up:
            cluster.send(node_id, self.coord_id, "dtm.recovered", {"node": node_id})
        return report

    def _coordinator_redrive(self, node_id: str, begun: dict, vol):
        """After coordinator recovery: finalize presumed aborts and re-drive
        committed transactions toward stability."""
        cluster = self.cluster
        for txid in sorted(begun):
            outcome = vol.outcomes.get(txid)
            parts = begun[txid]
            if outcome is None:
                cluster.wal_append(node_id, "ABORT", txid, {"role": "coord"})
                vol.outcomes[txid] = ABORTED
                cluster.stats.tx_aborted += 1
                self._trace_tx("abort", txid, reason="presumed abort at recovery")
                self._notify_decided(txid, False, "presumed abort at recovery")
                for p in parts:
                    if p != node_id and cluster.nodes[p].up:
                        cluster.send(node_id, p, "dtm.abort", {"txid": txid})
            elif outcome == COMMITTED:
                acks = [node_id] if node_id in parts and txid in vol.applied else []
                if set(acks) >= set(parts):
                    self._notify_stable(txid)
                    continue
                vol.tx_meta[txid] = {"state": "committed", "participants": parts,
                                     "acks": list(parts), "stable_acks": acks,
                                     "epoch": txid_epoch(txid)}
                for p in parts:
                    if p == node_id or not cluster.nodes[p].up:
                        continue
                    cluster.send(node_id, p, "dtm.commit", {"txid": txid, "coordinator": node_id})


# ---------------------------------------------------------------- redo apply

def apply_update(cluster, node_id: str, u: dict):
    """Idempotent redo application; shared by commit path and WAL replay."""
    kind = u["kind"]
    vol = cluster.nodes[node_id].volatile
    if kind == "obj-block-write":
        dev = cluster.devices.get(tuple(u["device"]))
        if dev is None or dev.status != "ONLINE":
            return  # device lost; redundancy repair owns this data now
        unit = dev.units.get(tuple(u["unit_key"]))
        if unit is None:
            return
        for block_idx, data in u["writes"]:
            unit.blocks[block_idx] = bytes(data)
    elif kind == "alloc-unit":
        dev = cluster.devices.get(tuple(u["device"]))
        if dev is not None and dev.status == "ONLINE":
            try:
                cluster.alloc_unit(tuple(u["device"]), tuple(u["unit_key"]), u["nblocks"])
            except Exception:
                cluster.telemetry.emit(cluster.now, "dtm", "anomaly.alloc_failed",
                                       node=node_id, device=list(u["device"]))
    elif kind == "free-unit":
        if tuple(u["device"]) in cluster.devices:
            cluster.free_unit(tuple(u["device"]), tuple(u["unit_key"]))
    elif kind == "idx-put":
        idx = vol.indexes.setdefault(EntityId.from_json(u["index"]).value, OrderedKV())
        idx.put(bytes(u["key"]), bytes(u["value"]))
    elif kind == "idx-del":
        idx = vol.indexes.setdefault(EntityId.from_json(u["index"]).value, OrderedKV())
        idx.delete(bytes(u["key"]))
    elif kind == "idx-drop":
        vol.indexes.pop(EntityId.from_json(u["index"]).value, None)
    elif kind == "catalog":
        if vol.catalog is None:
            vol.catalog = Catalog()
        vol.catalog.apply(u["op"], u["payload"])
    elif kind == "config-change":
        pass  # journal only; live config is HA actor state
    else:
        raise ValueError(f"unknown update kind {kind!r}")
