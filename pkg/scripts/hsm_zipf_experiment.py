#!/usr/bin/env python3
"""Zipf-skewed access experiment: 200 objects, 10^4 reads drawn from a
Zipf(1.2) popularity curve, then HSM plan/execute cycles to a fixpoint.
Reports per-tier occupancy and where the hottest extents ended up.
"""

import argparse
import sys

import numpy as np

sys.path.insert(0, "src")

from sagesim import SageEnv, make_topology
from sagesim.hsm import HsmPolicy
from sagesim.workloads import repl_template

BS = 512


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--objects", type=int, default=200)
    parser.add_argument("--accesses", type=int, default=10_000)
    parser.add_argument("--exponent", type=float, default=1.2)
    parser.add_argument("--seed", type=int, default=88)
    args = parser.parse_args()

    env = SageEnv.boot(make_topology(seed=args.seed, nodes=4, devices_per_tier=6,
                                     device_capacity=2048),
                       keep_trace=False, policy=HsmPolicy(promote_threshold=3.0))
    ctx = env.ctx
    rng = np.random.default_rng(args.seed)
    objs = []
    for i in range(args.objects):
        tier = 3 if i % 2 == 0 else 4
        rec = ctx.run(ctx.obj_create(env.root, BS, 4, [repl_template(tier, 1)]),
                      "STABLE")
        ctx.run(ctx.obj_write(rec.id, 0, bytes(rng.integers(0, 256, 4 * BS,
                                                            dtype=np.uint8))),
                "STABLE")
        objs.append(rec.id)

    ranks = np.arange(1, args.objects + 1, dtype=float)
    probs = ranks ** -args.exponent
    probs /= probs.sum()
    picks = rng.choice(args.objects, size=args.accesses, p=probs)
    for pick in picks:
        ctx.run(ctx.obj_read(objs[pick], 0, 4))

    cycles = 0
    migrations = 0
    while True:
        plan = env.hsm.tick()
        env.quiesce()
        cycles += 1
        migrations += len(plan)
        if not plan:
            break

    print(f"{cycles} plan/execute cycles, {migrations} migrations")
    stats = env.hsm.stats()
    for tier, s in stats["tiers"].items():
        print(f"  tier {tier}: occupancy {s['occupancy']:.3f} "
              f"({s['used_blocks']}/{s['capacity_blocks']} blocks)")
    now = env.cluster.now
    temps = sorted(((env.hsm.temperature(o.value, 0, now), o) for o in objs),
                   reverse=True)
    decile = max(1, args.objects // 10)
    hot_tiers = {}
    for _t, obj in temps[:decile]:
        tier = env.cluster.catalog().get_object(obj).layout.extents[0].sub.tier_id
        hot_tiers[tier] = hot_tiers.get(tier, 0) + 1
    print(f"top-decile ({decile} extents) by temperature now on tiers: {hot_tiers}")
    ok = all(t in (1, 2) for t in hot_tiers)
    print("top-decile fully on tiers 1-2:", ok)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
