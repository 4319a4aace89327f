import random

from sagesim import SageEnv
from sagesim.layout import layout_resolve
from sagesim.workloads import repl_template, striped_template


def make_written(env, template, nblocks=8, seed=0):
    data = random.Random(seed).randbytes(nblocks * 512)
    rec = env.ctx.run(env.ctx.obj_create(env.root, 512, nblocks, [template]), "STABLE")
    env.ctx.run(env.ctx.obj_write(rec.id, 0, data), "STABLE")
    return rec.id, data


def resolved_devices(env, obj):
    rec = env.cluster.catalog().get_object(obj)
    return layout_resolve(rec.layout, obj, 0, rec.nblocks, rec.nblocks)


def test_device_fail_empty_device_bumps_version(env):
    v0 = env.ha.version
    env.cluster.fail_device(4, 0)
    env.quiesce()
    assert env.ha.version == v0 + 1
    assert env.ha.status()["repairs_pending"] == 0
    assert env.ha.status()["repairs_done"] == 0


def test_device_fail_enqueues_per_unit(env):
    objs = [make_written(env, repl_template(3, 2), seed=i)[0] for i in range(4)]
    # pick the tier-3 device holding the most units
    counts = {}
    for obj in objs:
        for u in resolved_devices(env, obj):
            counts[u.device] = counts.get(u.device, 0) + 1
    target = max(sorted(counts), key=lambda d: counts[d])
    env.cluster.fail_device(*target)
    env.quiesce()
    st = env.ha.status()
    assert st["repairs_done"] == counts[target]
    assert st["repairs_pending"] == 0
    assert st["lost_units"] == 0


def test_repair_restores_replication(env):
    obj, data = make_written(env, repl_template(3, 2))
    dev = resolved_devices(env, obj)[0].device
    env.cluster.fail_device(*dev)
    env.quiesce()
    units = resolved_devices(env, obj)
    devices = [u.device for u in units]
    assert dev not in devices
    assert len(set(devices)) == len(devices)
    for u in units:
        d = env.cluster.devices[u.device]
        assert d.status == "ONLINE"
        assert u.unit_key() in d.units
    assert env.ctx.run(env.ctx.obj_read(obj, 0, 8)) == data


def test_repair_reconstructs_striped(env):
    obj, data = make_written(env, striped_template(2, 4, 1, 1))
    lost = resolved_devices(env, obj)[0]
    env.cluster.fail_device(*lost.device)
    env.quiesce()
    assert env.ha.status()["lost_units"] == 0
    # every unit back on ONLINE devices, distinct per stripe
    units = resolved_devices(env, obj)
    by_stripe = {}
    for u in units:
        by_stripe.setdefault(u.stripe_index, []).append(u.device)
    for devs in by_stripe.values():
        assert len(set(devs)) == len(devs)
    assert env.ctx.run(env.ctx.obj_read(obj, 0, 8)) == data


def test_repl1_loss_is_lost_not_silent(env):
    obj, _data = make_written(env, repl_template(4, 1))
    dev = resolved_devices(env, obj)[0].device
    env.cluster.fail_device(*dev)
    env.quiesce()
    st = env.ha.status()
    assert st["lost_units"] >= 1
    assert env.cluster.stats.lost_units == st["lost_units"]
    op = env.ctx.obj_read(obj, 0, 8)
    env.ctx.op_launch([op])
    env.quiesce()
    assert op.state == "FAILED"


def test_crash_restart_recovers_to_online(env):
    node = sorted(env.cluster.nodes)[2]
    env.cluster.crash_node(node)
    env.quiesce()
    assert env.cluster.nodes[node].status == "CRASHED"
    env.cluster.restart_node(node)
    env.quiesce()
    assert env.cluster.nodes[node].status == "ONLINE"
    assert env.cluster.nodes[node].volatile.recovery_report is not None
    # node crash never triggers data repair
    assert env.ha.status()["repairs_done"] == 0


def test_repair_spills_to_lower_tier_when_full():
    # two devices per tier: after one dies, the survivor is excluded (distinct
    # devices per group), so the replacement must land on the next tier down
    from sagesim.config import make_topology
    topo = make_topology(seed=5, nodes=2, devices_per_tier=2)
    env = SageEnv.boot(topo)
    data = random.Random(1).randbytes(16 * 512)
    rec = env.ctx.run(env.ctx.obj_create(env.root, 512, 16,
                                         [repl_template(2, 2)]), "STABLE")
    env.ctx.run(env.ctx.obj_write(rec.id, 0, data), "STABLE")
    placements = env.cluster.catalog().get_object(rec.id).layout.extents[0].placements
    dev = (placements[0][3], placements[0][4])
    env.cluster.fail_device(*dev)
    env.quiesce()
    st = env.ha.status()
    assert st["lost_units"] == 0
    assert st["repairs_done"] == 1
    assert st["repairs_degraded"] == 1  # landed a tier down
    units = resolved_devices(env, rec.id)
    tiers = sorted(u.device[0] for u in units)
    assert tiers == [2, 3]
    assert env.ctx.run(env.ctx.obj_read(rec.id, 0, 16)) == data


def test_mixed_population_shadow_equality(env):
    rng = random.Random(7)
    population = []
    templates = [repl_template(3, 2), repl_template(2, 3), repl_template(3, 1),
                 striped_template(2, 4, 1, 1), striped_template(3, 3, 2, 1)]
    for i in range(20):
        t = templates[i % len(templates)]
        nb = rng.choice([4, 8])
        data = rng.randbytes(nb * 512)
        rec = env.ctx.run(env.ctx.obj_create(env.root, 512, nb, [t]), "STABLE")
        env.ctx.run(env.ctx.obj_write(rec.id, 0, data), "STABLE")
        population.append((rec.id, t, data, nb))
    target = (3, 2)
    # predicted LOST: repl(1) objects with a unit on the failed device
    predicted_lost = set()
    for obj, t, _d, nb in population:
        if t["redundancy"] == {"kind": "replication", "n": 1}:
            for u in resolved_devices(env, obj):
                if u.device == target:
                    predicted_lost.add(obj)
    env.cluster.fail_device(*target)
    env.quiesce()
    lost_objs = {l.obj for l in env.ha.lost}
    assert lost_objs == predicted_lost
    for obj, _t, data, nb in population:
        if obj in predicted_lost:
            continue
        assert env.ctx.run(env.ctx.obj_read(obj, 0, nb)) == data
        for u in resolved_devices(env, obj):
            dev = env.cluster.devices[u.device]
            assert dev.status == "ONLINE"


def test_crash_during_repair_completes_without_duplicates(env):
    obj, data = make_written(env, repl_template(3, 2))
    units = resolved_devices(env, obj)
    dev = units[0].device
    holder_nodes = {env.cluster.devices[u.device].node_id for u in units}
    victims = [n for n in sorted(env.cluster.nodes)
               if n not in holder_nodes and n != env.cluster.coordinator_id]
    victim = victims[0]
    # crash the victim at its next WAL append: if the repair lands there it
    # aborts and must be re-planned onto another device
    env.cluster.arm_crash_trigger(victim, "wal", env.cluster._wal_counts[victim] + 1)
    env.cluster.fail_device(*dev)
    env.quiesce()
    env.cluster._crash_triggers.clear()
    if env.cluster.nodes[victim].status == "CRASHED":
        env.cluster.restart_node(victim)
        env.quiesce()
    st = env.ha.status()
    assert st["lost_units"] == 0
    assert st["repairs_pending"] == 0
    # redundancy restored exactly once: two distinct ONLINE devices, no extras
    final = resolved_devices(env, obj)
    assert len(final) == 2
    assert len({u.device for u in final}) == 2
    holders = []
    for (tier, idx), device in sorted(env.cluster.devices.items()):
        for key in device.units:
            if key[0] == obj.hi and key[1] == obj.lo:
                holders.append((tier, idx, key))
    assert len(holders) == 2, f"duplicate or missing units: {holders}"
    assert env.ctx.run(env.ctx.obj_read(obj, 0, 8)) == data


def test_repair_plan_preview(env):
    obj, _ = make_written(env, repl_template(3, 2))
    dev = resolved_devices(env, obj)[0].device
    # stop the queue from draining so the preview sees the pending items
    env.ha._repair_running = True
    env.cluster.fail_device(*dev)
    env.quiesce()
    plan = env.ha.repair_plan()
    assert plan
    assert all(p["action"] in ("copy", "reconstruct", "lost", "skip") for p in plan)
    copies = [p for p in plan if p["action"] == "copy"]
    assert copies and all(tuple(p["new_device"]) != dev for p in copies)
    env.ha._repair_running = False
    env.ha._kick_repair()
    env.quiesce()
    assert env.ha.status()["repairs_pending"] == 0


def test_wal_replay_accessor(env):
    node = env.cluster.coordinator_id
    records = env.cluster.wal_replay(node)
    assert [r.lsn for r in records] == list(range(1, len(records) + 1))
    env.cluster.crash_node(node)
    assert env.cluster.wal_replay(node) == records  # durable across crash


def test_config_causality_in_trace(env):
    make_written(env, repl_template(3, 2), seed=1)
    env.cluster.fail_device(3, 0)
    env.quiesce()
    make_written(env, repl_template(3, 2), seed=2)
    version = 0
    for e in env.cluster.trace.entries:
        if e["k"] == "ha-config":
            version = e["v"]
        elif e["k"] == "placement":
            assert e["cfg"] >= version
