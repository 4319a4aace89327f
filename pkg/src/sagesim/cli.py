"""sagectl: operator CLI.

Stateful verbs run either against a live service (--connect host:port) or
an embedded cluster built from --config, optionally primed by --script.
"""

from __future__ import annotations

import argparse
import base64
import json
import socket
import struct
import sys

from .bootstrap import SageEnv
from .config import load_topology, make_topology, topology_to_json
from .errors import SageError
from .ids import EntityId, EntityKind
from .scripting import run_script_text
from .service import SageService
from .wire import Session, dispatch


class WireClient:
    """Minimal framed-JSON client used by the CLI's --connect mode."""

    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))
        self._id = 0
        self._buf = bytearray()

    def call(self, op: str, params: dict | None = None) -> dict:
        self._id += 1
        body = json.dumps({"id": self._id, "op": op, "params": params or {}},
                          sort_keys=True, separators=(",", ":")).encode()
        self.sock.sendall(struct.pack(">I", len(body)) + body)
        while True:
            if len(self._buf) >= 4:
                (length,) = struct.unpack(">I", self._buf[:4])
                if len(self._buf) >= 4 + length:
                    doc = json.loads(bytes(self._buf[4:4 + length]).decode())
                    del self._buf[:4 + length]
                    if doc.get("id") != self._id:
                        continue
                    if doc.get("status") != "ok":
                        raise SageError(f"{doc.get('code')}: {doc.get('message', '')}")
                    return doc.get("result", {})
            chunk = self.sock.recv(65536)
            if not chunk:
                raise SageError("connection closed by service")
            self._buf += chunk

    def close(self):
        self.sock.close()


def _embedded_env(args) -> SageEnv:
    if args.config:
        topo = load_topology(args.config, seed_override=args.seed)
    else:
        topo = make_topology(seed=args.seed if args.seed is not None else 0)
    env = SageEnv.boot(topo)
    if getattr(args, "script", None):
        with open(args.script) as fh:
            text = fh.read()
        code, _snap, failures = run_script_text(env, text)
        if code:
            for f in failures:
                print(f, file=sys.stderr)
            raise SageError("priming script failed")
    return env


def _call(args, op: str, params: dict) -> dict:
    if getattr(args, "connect", None):
        host, port = args.connect.rsplit(":", 1)
        client = WireClient(host, int(port))
        try:
            return client.call(op, params)
        finally:
            client.close()
    env = _embedded_env(args)
    return dispatch(env, Session(), op, params)


def _emit(args, doc):
    if getattr(args, "json", False):
        print(json.dumps(doc, sort_keys=True, indent=2))
    else:
        print(json.dumps(doc, sort_keys=True))


def _eid_param(hi: str, lo: str, kind: str) -> dict:
    return {"hi": int(hi), "lo": int(lo), "kind": kind}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sagectl",
                                     description="tiered object store simulator control")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, connectable=True):
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--config", help="topology config JSON")
        p.add_argument("--seed", type=int, default=None, help="override topology seed")
        p.add_argument("--script", help="priming workload script (embedded mode)")
        if connectable:
            p.add_argument("--connect", help="host:port of a running service")

    p = sub.add_parser("serve", help="run the wire-protocol service")
    common(p, connectable=False)
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port (0 = ephemeral)")

    p = sub.add_parser("run", help="execute a workload script and exit")
    common(p, connectable=False)
    p.add_argument("script_path")

    p = sub.add_parser("obj", help="object operations")
    common(p)
    p.add_argument("verb", choices=["create", "write", "read", "free", "layout"])
    p.add_argument("args", nargs="*")
    p.add_argument("--block-size", type=int, default=4096)
    p.add_argument("--nblocks", type=int, default=8)
    p.add_argument("--layout", default='[{"tier":3,"redundancy":{"kind":"replication","n":1}}]')
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--data", help="base64 payload for write")

    p = sub.add_parser("idx", help="index operations")
    common(p)
    p.add_argument("verb", choices=["create", "put", "get", "del", "next"])
    p.add_argument("args", nargs="*")
    p.add_argument("--n", type=int, default=10)

    p = sub.add_parser("tx", help="execute ops atomically in one transaction")
    common(p)
    p.add_argument("--ops-file", required=True,
                   help="JSON-lines of wire ops to run inside one tx")

    p = sub.add_parser("func", help="function shipping")
    common(p)
    p.add_argument("verb", choices=["run", "list", "register"])
    p.add_argument("--name")
    p.add_argument("--obj", help="target hi:lo:KIND")
    p.add_argument("--args", default="{}")
    p.add_argument("--map", help="mapper primitive for register")
    p.add_argument("--reduce", help="reduce expression for register")

    p = sub.add_parser("hsm", help="hierarchical storage management")
    common(p)
    p.add_argument("verb", choices=["tick", "stats"])

    p = sub.add_parser("ha", help="high availability")
    common(p)
    p.add_argument("verb", choices=["status"])

    p = sub.add_parser("catalog", help="metadata catalog")
    common(p, connectable=False)
    p.add_argument("verb", choices=["dump", "query"])
    p.add_argument("--predicate", default="{}")

    p = sub.add_parser("stats", help="stats snapshot or telemetry dump")
    common(p)
    p.add_argument("--telemetry", action="store_true",
                   help="dump telemetry records as JSON-lines (embedded mode)")
    p.add_argument("--subsystem", default="", help="telemetry subsystem prefix filter")
    p.add_argument("--event", default="", help="telemetry event prefix filter")

    p = sub.add_parser("mktopo", help="write a default topology config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=4)
    p.add_argument("--devices-per-tier", type=int, default=4)
    p.add_argument("--capacity", type=int, default=4096)
    p.add_argument("out")

    args = parser.parse_args(argv)
    try:
        return _dispatch_cli(args)
    except SageError as err:
        print(f"error: {getattr(err, 'code', 'ERROR')}: {err}", file=sys.stderr)
        return 2


def _parse_target(spec: str) -> dict:
    hi, lo, kind = spec.split(":")
    return _eid_param(hi, lo, kind)


def _dispatch_cli(args) -> int:
    if args.cmd == "serve":
        env = _embedded_env(args)
        host, port = args.listen.rsplit(":", 1)
        service = SageService(env, host, int(port))
        print(f"LISTENING {service.address[0]}:{service.address[1]}", flush=True)
        service.serve_forever()
        return 0

    if args.cmd == "run":
        if args.config:
            topo = load_topology(args.config, seed_override=args.seed)
        else:
            topo = make_topology(seed=args.seed if args.seed is not None else 0)
        env = SageEnv.boot(topo)
        with open(args.script_path) as fh:
            text = fh.read()
        code, snap, failures = run_script_text(env, text)
        for f in failures:
            print(f"ASSERT FAIL {f}", file=sys.stderr)
        _emit(args, {"exit": code, "trace_sha256": env.cluster.trace_hash(),
                     "stats": snap.to_json()})
        return code

    if args.cmd == "mktopo":
        topo = make_topology(seed=args.seed, nodes=args.nodes,
                             devices_per_tier=args.devices_per_tier,
                             device_capacity=args.capacity)
        with open(args.out, "w") as fh:
            json.dump(topology_to_json(topo), fh, indent=2, sort_keys=True)
        print(f"wrote {args.out}")
        return 0

    if args.cmd == "obj":
        if args.verb == "create":
            result = _call(args, "CREATE_OBJ", {
                "block_size": args.block_size, "nblocks": args.nblocks,
                "layout": json.loads(args.layout)})
        elif args.verb == "write":
            obj = _parse_target(args.args[0])
            data = args.data or base64.b64encode(b"\x00" * args.block_size).decode()
            result = _call(args, "WRITE", {"obj": obj, "offset_block": args.offset,
                                           "data": data})
        elif args.verb == "read":
            obj = _parse_target(args.args[0])
            result = _call(args, "READ", {"obj": obj, "offset_block": args.offset,
                                          "nblocks": args.nblocks})
        elif args.verb == "free":
            result = _call(args, "FREE", {"obj": _parse_target(args.args[0])})
        else:  # layout debug dump: embedded only
            env = _embedded_env(args)
            hi, lo = int(args.args[0]), int(args.args[1])
            eid = EntityId(hi, lo, EntityKind.OBJECT)
            rec = env.cluster.catalog().get_object(eid)
            from .layout import layout_resolve
            units = layout_resolve(rec.layout, eid, 0, rec.nblocks, rec.nblocks)
            result = {"layout": rec.layout.to_json(),
                      "units": [u.to_json() for u in units]}
        _emit(args, result)
        return 0

    if args.cmd == "idx":
        b64 = lambda s: base64.b64encode(s.encode()).decode()
        if args.verb == "create":
            result = _call(args, "CREATE_IDX", {})
        elif args.verb == "put":
            result = _call(args, "IDX_PUT", {"index": _parse_target(args.args[0]),
                                             "key": b64(args.args[1]),
                                             "value": b64(args.args[2])})
        elif args.verb == "get":
            result = _call(args, "IDX_GET", {"index": _parse_target(args.args[0]),
                                             "key": b64(args.args[1])})
        elif args.verb == "del":
            result = _call(args, "IDX_DEL", {"index": _parse_target(args.args[0]),
                                             "key": b64(args.args[1])})
        else:
            start = args.args[1] if len(args.args) > 1 else ""
            result = _call(args, "IDX_NEXT", {"index": _parse_target(args.args[0]),
                                              "key": b64(start), "n": args.n})
        _emit(args, result)
        return 0

    if args.cmd == "tx":
        with open(args.ops_file) as fh:
            ops = [json.loads(line) for line in fh if line.strip()]
        if args.connect:
            host, port = args.connect.rsplit(":", 1)
            client = WireClient(host, int(port))
            try:
                tx = client.call("TX_BEGIN", {})["tx"]
                for entry in ops:
                    params = dict(entry.get("params", {}))
                    params["tx"] = tx
                    client.call(entry["op"], params)
                result = client.call("TX_COMMIT", {"tx": tx})
            finally:
                client.close()
        else:
            env = _embedded_env(args)
            session = Session()
            tx = dispatch(env, session, "TX_BEGIN", {})["tx"]
            for entry in ops:
                params = dict(entry.get("params", {}))
                params["tx"] = tx
                dispatch(env, session, entry["op"], params)
            result = dispatch(env, session, "TX_COMMIT", {"tx": tx})
        _emit(args, result)
        return 0

    if args.cmd == "func":
        if args.verb == "list":
            env = _embedded_env(args)
            _emit(args, {"functions": env.funcs.names()})
            return 0
        if args.verb == "register":
            result = _call(args, "FUNC_REGISTER", {"name": args.name,
                                                   "map": args.map,
                                                   "reduce": args.reduce})
        else:
            result = _call(args, "FUNC_INVOKE", {"target": _parse_target(args.obj),
                                                 "name": args.name,
                                                 "args": json.loads(args.args)})
        _emit(args, result)
        return 0

    if args.cmd == "hsm":
        if args.verb == "tick":
            result = _call(args, "HSM_TICK", {})
        else:
            env = _embedded_env(args)
            result = env.hsm.stats()
        _emit(args, result)
        return 0

    if args.cmd == "ha":
        _emit(args, _call(args, "HA_STATUS", {}))
        return 0

    if args.cmd == "catalog":
        env = _embedded_env(args)
        if args.verb == "dump":
            for line in env.cluster.catalog().dump_lines():
                print(json.dumps(line, sort_keys=True))
        else:
            ids = env.ctx.catalog_query(json.loads(args.predicate))
            _emit(args, {"ids": [[e.hi, e.lo] for e in ids]})
        return 0

    if args.cmd == "stats":
        if args.telemetry:
            env = _embedded_env(args)
            for rec in env.telemetry_dump(args.subsystem, args.event):
                print(json.dumps(rec.to_json(), sort_keys=True))
            return 0
        _emit(args, _call(args, "STATS", {}))
        return 0

    raise SageError(f"unhandled command {args.cmd}")


if __name__ == "__main__":
    sys.exit(main())
