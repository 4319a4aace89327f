"""Wire protocol framing and the op dispatcher shared by the TCP service,
the script runner and the CLI.

Frames are a 4-byte big-endian length followed by UTF-8 JSON
{id, op, params}; responses are {id, status: "ok"|"err", code?, result?}
serialized with sorted keys so same-seed replays are byte-identical.
Binary payloads travel base64-encoded.
"""

from __future__ import annotations

import base64
import json
import struct

from .access import STABLE
from .bootstrap import SageEnv
from .dtm import Transaction
from .errors import BadFrame, BadParams, TxAborted, UnknownOp
from .ids import EntityId, EntityKind

MAX_FRAME = 256 * 1024 * 1024

WIRE_OPS = (
    "CREATE_OBJ", "WRITE", "READ", "FREE",
    "CREATE_IDX", "IDX_PUT", "IDX_GET", "IDX_DEL", "IDX_NEXT",
    "TX_BEGIN", "TX_COMMIT", "TX_ABORT", "EPOCH_CLOSE",
    "FUNC_INVOKE", "FUNC_REGISTER", "HSM_TICK", "HA_STATUS", "STATS",
    "INJECT_FAILURE", "RESTART_NODE",
)


def encode_frame(doc: dict) -> bytes:
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack(">I", len(body)) + body


def decode_frames(buffer: bytearray):
    """Yield parsed frames from the buffer, consuming complete ones."""
    while True:
        if len(buffer) < 4:
            return
        (length,) = struct.unpack(">I", buffer[:4])
        if length > MAX_FRAME:
            raise BadFrame(length=length)
        if len(buffer) < 4 + length:
            return
        body = bytes(buffer[4:4 + length])
        del buffer[:4 + length]
        try:
            doc = json.loads(body.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadFrame(reason=str(exc))
        if not isinstance(doc, dict):
            raise BadFrame(reason="frame is not a JSON object")
        yield doc


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


def _unb64(s: str) -> bytes:
    try:
        return base64.b64decode(s, validate=True)
    except Exception as exc:
        raise BadParams(reason=f"invalid base64: {exc}")


def _eid(params, key: str, kind: EntityKind) -> EntityId:
    ref = params.get(key)
    if not isinstance(ref, dict) or "hi" not in ref or "lo" not in ref:
        raise BadParams(missing=key)
    k = EntityKind(ref["kind"]) if "kind" in ref else kind
    return EntityId(hi=int(ref["hi"]), lo=int(ref["lo"]), kind=k)


def _eid_json(eid: EntityId) -> dict:
    return {"hi": eid.hi, "lo": eid.lo, "kind": eid.kind.value}


class Session:
    """Per-connection (or per-script) state: open transaction handles."""

    def __init__(self):
        self._tx_counter = 0
        self.txs: dict[str, Transaction] = {}

    def new_token(self, tx: Transaction) -> str:
        self._tx_counter += 1
        token = f"tx{self._tx_counter}"
        self.txs[token] = tx
        return token

    def tx_for(self, params) -> Transaction | None:
        token = params.get("tx")
        if token is None:
            return None
        tx = self.txs.get(token)
        if tx is None:
            raise BadParams(reason=f"unknown tx token {token!r}")
        return tx


def _run_mutation(env: SageEnv, session: Session, op_handle, params) -> dict:
    """Execute a mutating op: bound ops report queued once attached,
    auto-wrapped ops wait for STABLE."""
    bound = params.get("tx") is not None
    env.ctx.op_launch([op_handle])
    if bound:
        env.cluster.loop.run(predicate=lambda: op_handle.done or op_handle.txid is not None)
        if op_handle.state == "FAILED":
            raise op_handle.error
        return {"queued": True}
    env.ctx.op_wait(op_handle, STABLE)
    if op_handle.state == "FAILED":
        raise op_handle.error
    return {}


def dispatch(env: SageEnv, session: Session, op: str, params: dict) -> dict:
    """Execute one wire op against the environment; raises SageError."""
    cluster = env.cluster
    ctx = env.ctx
    params = params or {}

    if op == "CREATE_OBJ":
        realm = _eid(params, "realm", EntityKind.REALM) if "realm" in params \
            else cluster.root_realm
        tx = session.tx_for(params)
        handle = ctx.obj_create(realm, int(params["block_size"]),
                                int(params["nblocks"]), params["layout"],
                                attrs=params.get("attrs"), tx=tx)
        out = _run_mutation(env, session, handle, params)
        rec = handle.result
        out["id"] = _eid_json(rec.id) if rec is not None else None
        return out

    if op == "WRITE":
        obj = _eid(params, "obj", EntityKind.OBJECT)
        handle = ctx.obj_write(obj, int(params.get("offset_block", 0)),
                               _unb64(params["data"]), tx=session.tx_for(params))
        return _run_mutation(env, session, handle, params)

    if op == "READ":
        obj = _eid(params, "obj", EntityKind.OBJECT)
        handle = ctx.obj_read(obj, int(params.get("offset_block", 0)),
                              int(params["nblocks"]))
        data = ctx.run(handle)
        return {"data": _b64(data)}

    if op == "FREE":
        obj = _eid(params, "obj", EntityKind.OBJECT)
        handle = ctx.obj_free(obj, tx=session.tx_for(params))
        return _run_mutation(env, session, handle, params)

    if op == "CREATE_IDX":
        realm = _eid(params, "realm", EntityKind.REALM) if "realm" in params \
            else cluster.root_realm
        handle = ctx.idx_create(realm, attrs=params.get("attrs"),
                                tx=session.tx_for(params))
        out = _run_mutation(env, session, handle, params)
        if handle.result is not None:
            out["id"] = _eid_json(handle.result)
        return out

    if op == "IDX_PUT":
        idx = _eid(params, "index", EntityKind.INDEX)
        handle = ctx.idx_put(idx, _unb64(params["key"]), _unb64(params["value"]),
                             tx=session.tx_for(params))
        return _run_mutation(env, session, handle, params)

    if op == "IDX_DEL":
        idx = _eid(params, "index", EntityKind.INDEX)
        handle = ctx.idx_del(idx, _unb64(params["key"]), tx=session.tx_for(params))
        return _run_mutation(env, session, handle, params)

    if op == "IDX_GET":
        idx = _eid(params, "index", EntityKind.INDEX)
        value = ctx.run(ctx.idx_get(idx, _unb64(params["key"])))
        return {"value": _b64(value)}

    if op == "IDX_NEXT":
        idx = _eid(params, "index", EntityKind.INDEX)
        pairs = ctx.run(ctx.idx_next(idx, _unb64(params["key"]), int(params["n"])))
        return {"pairs": [[_b64(k), _b64(v)] for k, v in pairs]}

    if op == "TX_BEGIN":
        realm = _eid(params, "realm", EntityKind.REALM) if "realm" in params \
            else cluster.root_realm
        tx = env.dtm.tx_begin(realm, params.get("epoch"))
        return {"tx": session.new_token(tx), "txid": [tx.txid >> 64, tx.txid & ((1 << 64) - 1)]}

    if op == "TX_COMMIT":
        token = params.get("tx")
        tx = session.txs.pop(token, None)
        if tx is None:
            raise BadParams(reason=f"unknown tx token {token!r}")
        done = {"state": None}
        tx.on_stable.append(lambda: done.update(state="stable"))
        tx.on_decided.append(lambda ok, reason: done.update(state="aborted:" + reason)
                             if not ok else None)
        env.dtm.tx_commit(tx)
        cluster.loop.run(predicate=lambda: done["state"] is not None)
        if done["state"] != "stable":
            raise TxAborted(done["state"].split(":", 1)[1])
        return {"committed": True}

    if op == "TX_ABORT":
        token = params.get("tx")
        tx = session.txs.pop(token, None)
        if tx is None:
            raise BadParams(reason=f"unknown tx token {token!r}")
        env.dtm.tx_abort(tx)
        return {"aborted": True}

    if op == "EPOCH_CLOSE":
        done = {"epoch": None}
        env.dtm.epoch_close(lambda e: done.update(epoch=e))
        cluster.loop.run(predicate=lambda: done["epoch"] is not None)
        return {"closed_epoch": done["epoch"]}

    if op == "FUNC_INVOKE":
        target = _eid(params, "target", EntityKind.OBJECT)
        handle = env.funcs.func_invoke(target, params["name"], params.get("args"))
        result = ctx.run(handle)
        return result

    if op == "FUNC_REGISTER":
        env.funcs.register_scripted(params["name"], params["map"], params["reduce"])
        return {"registered": params["name"]}

    if op == "HSM_TICK":
        plan = env.hsm.tick()
        cluster.run_until(quiescent=True)
        return {"planned": len(plan),
                "migrations": [{"obj": _eid_json(m.obj), "extent": m.extent_index,
                                "from_tier": m.from_tier, "to_tier": m.to_tier,
                                "reason": m.reason} for m in plan]}

    if op == "HA_STATUS":
        return env.ha.status()

    if op == "STATS":
        return cluster.snapshot().to_json()

    if op == "INJECT_FAILURE":
        at = params.get("at_time_us")
        if "node" in params:
            cluster.inject_failure(node=params["node"], at_time=at)
        elif "device" in params:
            t, i = params["device"]
            cluster.inject_failure(device=(int(t), int(i)), at_time=at)
        else:
            raise BadParams(reason="need node or device")
        if at is None:
            cluster.run_until(quiescent=True)
        return {}

    if op == "RESTART_NODE":
        cluster.restart_node(params["node"])
        cluster.run_until(quiescent=True)
        node = cluster.nodes[params["node"]]
        return {"report": node.volatile.recovery_report}

    raise UnknownOp(op=op)
