#!/usr/bin/env python3
"""Crash-point sweep demo: a 20-transaction workload over 3 nodes, a crash
injected at every WAL-append and message-delivery point, all-or-nothing
verified after recovery. A compact version of the acceptance criterion.
"""

import argparse
import random
import sys
import time

sys.path.insert(0, "src")

from sagesim import SageEnv, make_topology
from sagesim.workloads import repl_template

BS = 512
TOPO = dict(seed=2, nodes=3, devices_per_tier=6, tiers=(3,))


def run_workload(triggers):
    env = SageEnv.boot(make_topology(**TOPO), keep_trace=False)
    ctx = env.ctx
    objs, datas, ops = [], [], []
    for i in range(20):
        rec = ctx.run(ctx.obj_create(env.root, BS, 4, [repl_template(3, 3)]), "STABLE")
        objs.append(rec.id)
        datas.append(bytes([i + 1]) * (4 * BS))
    base_wal = dict(env.cluster._wal_counts)
    base_msg = dict(env.cluster._msg_counts)
    for node, kind, count in triggers:
        base = base_wal[node] if kind == "wal" else base_msg[node]
        env.cluster.arm_crash_trigger(node, kind, base + count)
    for obj, data in zip(objs, datas):
        op = ctx.obj_write(obj, 0, data)
        ctx.op_launch([op])
        ops.append(op)
    env.quiesce()
    return env, objs, datas, ops, base_wal, base_msg


def verify(env, objs, datas, ops):
    env.cluster._crash_triggers.clear()
    for node in sorted(env.cluster.nodes):
        if env.cluster.nodes[node].status == "CRASHED":
            env.cluster.restart_node(node)
            env.quiesce()
    env.quiesce()
    coord = env.cluster.nodes[env.cluster.coordinator_id]
    committed = {r.txid for r in coord.wal if r.kind == "COMMIT"}
    bad = 0
    for op, obj, data in zip(ops, objs, datas):
        expect = data if (op.txid in committed) else b"\x00" * len(data)
        if env.ctx.run(env.ctx.obj_read(obj, 0, 4)) != expect:
            bad += 1
    return bad


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--random-runs", type=int, default=100)
    args = parser.parse_args()

    t0 = time.time()
    env, objs, datas, ops, base_wal, base_msg = run_workload([])
    points = [(n, "wal", c + 1) for n in sorted(base_wal)
              for c in range(env.cluster._wal_counts[n] - base_wal[n])]
    points += [(n, "msg", c + 1) for n in sorted(base_msg)
               for c in range(env.cluster._msg_counts[n] - base_msg[n])]
    print(f"reference run: {len(points)} crash points in the transaction region")

    violations = 0
    for i, point in enumerate(points):
        e, o, d, p, _, _ = run_workload([point])
        violations += verify(e, o, d, p)
        if (i + 1) % 100 == 0:
            print(f"  swept {i + 1}/{len(points)} points, violations={violations}")

    rng = random.Random(1)
    for _ in range(args.random_runs):
        triggers = []
        for _k in range(rng.randint(1, 3)):
            node = rng.choice(sorted(base_wal))
            kind = rng.choice(["wal", "msg"])
            hi = (env.cluster._wal_counts[node] - base_wal[node]) if kind == "wal" \
                else (env.cluster._msg_counts[node] - base_msg[node])
            if hi:
                triggers.append((node, kind, rng.randint(1, hi)))
        e, o, d, p, _, _ = run_workload(triggers)
        violations += verify(e, o, d, p)

    print(f"done in {time.time() - t0:.1f}s: {len(points)} exhaustive + "
          f"{args.random_runs} randomized runs, {violations} violations")
    return 0 if violations == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
