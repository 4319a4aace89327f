"""Canned workloads: the standard scenario script and topology used by the
determinism and audit checks, plus helpers for building layout templates.
"""

from __future__ import annotations

import base64
import random

from .cluster import ClusterTopology
from .config import make_topology


def repl_template(tier: int, n: int, blocks="rest") -> dict:
    return {"tier": tier, "redundancy": {"kind": "replication", "n": n},
            "blocks": blocks}


def striped_template(tier: int, n: int, k: int, unit_size: int = 1, blocks="rest") -> dict:
    return {"tier": tier, "redundancy": {"kind": "striped", "n": n, "k": k},
            "unit_size": unit_size, "blocks": blocks}


def standard_topology(seed: int = 42) -> ClusterTopology:
    return make_topology(seed=seed, nodes=4, devices_per_tier=6,
                         device_capacity=2048)


def standard_scenario(seed: int = 42) -> list[dict]:
    """A deterministic mixed workload touching every subsystem: object and
    index I/O across layouts, an explicit transaction, a device failure with
    repair, a node crash and restart, function shipping and an HSM tick."""
    rng = random.Random(seed)
    bs = 512

    def blocks(n):
        return base64.b64encode(rng.randbytes(n * bs)).decode()

    cmds: list[dict] = []

    def add(op, params=None, save=None, expect_error=None):
        cmd = {"op": op, "params": params or {}}
        if save:
            cmd["save"] = save
        if expect_error:
            cmd["expect_error"] = expect_error
        cmds.append(cmd)

    add("CREATE_OBJ", {"block_size": bs, "nblocks": 16,
                       "layout": [repl_template(3, 2)]}, save="a")
    add("CREATE_OBJ", {"block_size": bs, "nblocks": 24,
                       "layout": [striped_template(2, 4, 1, 1)]}, save="b")
    add("CREATE_OBJ", {"block_size": bs, "nblocks": 32,
                       "layout": [{"tier": 1, "redundancy": {"kind": "replication", "n": 2},
                                   "blocks": 8},
                                  striped_template(3, 3, 2, 2)]}, save="c")
    add("WRITE", {"obj": "$a.id", "offset_block": 0, "data": blocks(16)})
    add("WRITE", {"obj": "$b.id", "offset_block": 4, "data": blocks(12)})
    add("WRITE", {"obj": "$c.id", "offset_block": 0, "data": blocks(32)})
    add("READ", {"obj": "$a.id", "offset_block": 0, "nblocks": 16})
    add("READ", {"obj": "$c.id", "offset_block": 4, "nblocks": 12})

    add("CREATE_IDX", {}, save="idx")
    keys = [f"k{n:03d}" for n in rng.sample(range(1000), 40)]
    for k in keys:
        add("IDX_PUT", {"index": "$idx.id",
                        "key": base64.b64encode(k.encode()).decode(),
                        "value": base64.b64encode(f"v-{k}".encode()).decode()})
    for k in sorted(keys)[:5]:
        add("IDX_DEL", {"index": "$idx.id",
                        "key": base64.b64encode(k.encode()).decode()})
    add("IDX_NEXT", {"index": "$idx.id",
                     "key": base64.b64encode(b"").decode(), "n": 50})

    # explicit transaction grouping two writes
    add("TX_BEGIN", {}, save="t")
    add("WRITE", {"obj": "$a.id", "offset_block": 2, "data": blocks(2), "tx": "$t.tx"})
    add("WRITE", {"obj": "$b.id", "offset_block": 0, "data": blocks(2), "tx": "$t.tx"})
    add("TX_COMMIT", {"tx": "$t.tx"})
    add("EPOCH_CLOSE", {})

    add("FUNC_INVOKE", {"target": "$a.id", "name": "CRC64"})
    add("FUNC_INVOKE", {"target": "$b.id", "name": "MINMAX_F64"})

    # fail one tier-3 device, let repair run, then crash and restart a node
    add("INJECT_FAILURE", {"device": [3, 1]})
    add("RUN_UNTIL", {"quiescent": True})
    add("READ", {"obj": "$a.id", "offset_block": 0, "nblocks": 16})
    add("INJECT_FAILURE", {"node": "node2"})
    add("RUN_UNTIL", {"quiescent": True})
    add("RESTART_NODE", {"node": "node2"})
    add("RUN_UNTIL", {"quiescent": True})

    add("HSM_TICK", {})
    add("STATS", {}, save="final")
    return cmds


def scenario_to_jsonl(cmds: list[dict]) -> str:
    import json
    return "\n".join(json.dumps({k: v for k, v in c.items() if k != "_line"},
                                sort_keys=True) for c in cmds) + "\n"
