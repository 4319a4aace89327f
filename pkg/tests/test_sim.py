import pytest

from sagesim import SageEnv, make_topology
from sagesim.cluster import ClusterTopology, NetworkSpec, SageCluster, transfer_us
from sagesim.errors import (
    DeviceFailed,
    InvalidTopology,
    LivelockDetected,
    NodeCrashed,
    UnknownTarget,
)
from sagesim.layout import TierSpec
from sagesim.workloads import repl_template, standard_topology


def test_boot_initial_state():
    cluster = SageCluster(make_topology(seed=1))
    assert all(n.status == "ONLINE" for n in cluster.nodes.values())
    assert cluster.now == 0
    snap = cluster.snapshot()
    assert all(s.used_blocks == 0 for s in snap.tiers.values())
    assert len(cluster.devices) == 16


def test_duplicate_device_rejected():
    topo = make_topology(seed=1)
    nodes = list(topo.nodes)
    # attach tier-1 device 0 to two nodes
    first = (nodes[0][0], nodes[0][1] + ((1, 1),))
    bad = ClusterTopology(seed=1, tiers=topo.tiers,
                          nodes=(first,) + tuple(nodes[1:]), network=topo.network)
    with pytest.raises(InvalidTopology):
        bad.validate()


def test_tier_monotonicity_enforced():
    slow_t1 = TierSpec(1, "NVME_NVRAM", 2, 128, latency_us=9000,
                       bandwidth_bps=10**6)
    t2 = TierSpec(2, "SAS_SSD", 2, 128, latency_us=80, bandwidth_bps=10**9)
    topo = ClusterTopology(
        seed=0, tiers=(slow_t1, t2),
        nodes=(("n0", ((1, 0), (1, 1), (2, 0), (2, 1))),),
        network=NetworkSpec(50, 10**9))
    with pytest.raises(InvalidTopology):
        topo.validate()


def test_boot_trace_replay_stable():
    a = SageCluster(make_topology(seed=5)).trace_hash()
    b = SageCluster(make_topology(seed=5)).trace_hash()
    assert a == b


def test_io_completion_timing():
    # pinned defaults: tier 1 is 10us latency, 2 GiB/s bandwidth, so a
    # 4096-byte write lands at t + 10 + ceil(4096e6 / 2^31) = t + 12
    cluster = SageCluster(make_topology(seed=1))
    seen = []
    cluster.io_submit((1, 0), "write", 4096, lambda ok: seen.append(cluster.now))
    cluster.run_until(quiescent=True)
    assert seen == [12]


def test_zero_byte_io_costs_latency_only():
    cluster = SageCluster(make_topology(seed=1))
    seen = []
    cluster.io_submit((3, 0), "read", 0, lambda ok: seen.append(cluster.now))
    cluster.run_until(quiescent=True)
    assert seen == [cluster.tiers[3].latency_us]


def test_transfer_rounds_up():
    assert transfer_us(1, 10**6) == 1
    assert transfer_us(10**6, 10**6) == 10**6 // 1  # 1 second in us
    assert transfer_us(0, 10**6) == 0


def test_io_to_failed_device_rejected():
    cluster = SageCluster(make_topology(seed=1))
    cluster.fail_device(2, 1)
    with pytest.raises(DeviceFailed):
        cluster.io_submit((2, 1), "write", 100, lambda ok: None)


def test_wal_append_gapless_and_durable():
    cluster = SageCluster(make_topology(seed=1))
    node = sorted(cluster.nodes)[1]
    lsns = [cluster.wal_append(node, "CONFIG", payload={"i": i}) for i in range(100)]
    assert lsns == list(range(1, 101))
    cluster.crash_node(node)
    assert [r.lsn for r in cluster.nodes[node].wal] == list(range(1, 101))
    with pytest.raises(NodeCrashed):
        cluster.wal_append(node, "CONFIG")


def test_replay_on_fresh_node_empty():
    cluster = SageCluster(make_topology(seed=1))
    node = sorted(cluster.nodes)[2]
    assert cluster.nodes[node].wal == []


def test_crash_clears_volatile_keeps_devices():
    env = SageEnv.boot(standard_topology(3))
    rec = env.ctx.run(env.ctx.obj_create(env.root, 512, 4,
                                         [repl_template(3, 1)]), "STABLE")
    env.ctx.run(env.ctx.obj_write(rec.id, 0, b"\x42" * 2048), "STABLE")
    placed = env.cluster.catalog().get_object(rec.id).layout.extents[0].placements
    tier, dev = placed[0][3], placed[0][4]
    device = env.cluster.devices[(tier, dev)]
    holder = device.node_id
    blocks_before = {k: dict(u.blocks) for k, u in device.units.items()}
    env.cluster.crash_node(holder)
    env.quiesce()
    assert env.cluster.nodes[holder].volatile.prepared == {}
    assert {k: dict(u.blocks) for k, u in device.units.items()} == blocks_before


def test_device_failure_loses_blocks():
    cluster = SageCluster(make_topology(seed=1))
    cluster.alloc_unit((3, 0), ("u",), 4)
    dev = cluster.devices[(3, 0)]
    assert dev.used == 4
    cluster.fail_device(3, 0)
    assert dev.units == {}
    assert cluster.stats.tiers[3].used_blocks == 0


def test_inject_failure_unknown_target():
    cluster = SageCluster(make_topology(seed=1))
    with pytest.raises(UnknownTarget):
        cluster.inject_failure(node="nope")
    with pytest.raises(UnknownTarget):
        cluster.inject_failure(device=(9, 9))


def test_run_until_idle_returns_immediately():
    cluster = SageCluster(make_topology(seed=1))
    before = cluster.loop.processed
    cluster.run_until(quiescent=True)
    assert cluster.loop.processed == before


def test_livelock_detection():
    cluster = SageCluster(make_topology(seed=1))

    def ping():
        cluster.loop.schedule(1, "ping", ping)

    ping()
    with pytest.raises(LivelockDetected):
        cluster.run_until(predicate=lambda: False, max_events=1000)


def test_clock_monotone_in_trace():
    env = SageEnv.boot(standard_topology(3))
    rec = env.ctx.run(env.ctx.obj_create(env.root, 512, 4,
                                         [repl_template(3, 2)]), "STABLE")
    env.ctx.run(env.ctx.obj_write(rec.id, 0, b"\x01" * 2048), "STABLE")
    env.quiesce()
    times = [e["t"] for e in env.cluster.trace.entries]
    assert times == sorted(times)


def test_wal_trigger_crash_is_deterministic():
    def run():
        env = SageEnv.boot(standard_topology(3))
        victim = sorted(env.cluster.nodes)[1]
        env.cluster.arm_crash_trigger(victim, "wal", 2)
        for _ in range(3):
            op = env.ctx.obj_create(env.root, 512, 4, [repl_template(3, 2)])
            env.ctx.op_launch([op])
            env.quiesce()
        return env.cluster.trace_hash()

    assert run() == run()
