import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sagesim import SageEnv
from sagesim.errors import (
    DataUnavailable,
    EntityNotFound,
    InvalidState,
    KeyNotFound,
    NoEligibleDevice,
    RangeOutOfBounds,
    Timeout,
)
from sagesim.layout import layout_resolve
from sagesim.okv import OrderedKV
from sagesim.workloads import repl_template, standard_topology, striped_template


def make_obj(env, nblocks=8, template=None, bs=512):
    rec = env.ctx.run(env.ctx.obj_create(
        env.root, bs, nblocks, template or [repl_template(3, 2)]), "STABLE")
    return rec.id


# ------------------------------------------------------------ state machine

def test_op_lifecycle_trace_legal(env, ctx):
    obj = make_obj(env)
    ctx.run(ctx.obj_write(obj, 0, b"\x01" * 512), "STABLE")
    ctx.run(ctx.obj_read(obj, 0, 1))
    legal = {("INIT", "LAUNCHED"), ("LAUNCHED", "EXECUTED"),
             ("LAUNCHED", "FAILED"), ("EXECUTED", "STABLE")}
    transitions = [(e["fr"], e["to"]) for e in env.cluster.trace.entries
                   if e["k"] == "op"]
    assert transitions
    assert set(transitions) <= legal


def test_wait_on_unlaunched_rejected(env, ctx):
    op = ctx.obj_read(make_obj(env), 0, 1)
    with pytest.raises(InvalidState):
        ctx.op_wait(op, "EXECUTED")


def test_double_launch_rejected(env, ctx):
    op = ctx.obj_read(make_obj(env), 0, 1)
    ctx.op_launch([op])
    with pytest.raises(InvalidState):
        ctx.op_launch([op])


def test_wait_timeout_zero_nondestructive(env, ctx):
    obj = make_obj(env)
    op = ctx.obj_write(obj, 0, b"\x01" * 512)
    ctx.op_launch([op])
    with pytest.raises(Timeout):
        ctx.op_wait(op, "STABLE", timeout_us=0)
    assert op.state == "LAUNCHED"
    ctx.op_wait(op, "STABLE")
    assert op.state == "STABLE"


def test_completion_order_is_timing_consistent(env, ctx):
    # three writes to tiers of different speed, launched together: STABLE
    # (redo applied to devices) must follow simulated device latency
    objs = {tier: make_obj(env, template=[repl_template(tier, 1)])
            for tier in (1, 3, 4)}
    ops = {tier: ctx.obj_write(objs[tier], 0, bytes([tier]) * 512)
           for tier in (4, 1, 3)}
    ctx.op_launch([ops[4], ops[1], ops[3]])
    for op in ops.values():
        ctx.op_wait(op, "STABLE")
    stable = [e["op"] for e in env.cluster.trace.entries
              if e["k"] == "op" and e["to"] == "STABLE"
              and e["op"] in {o.op_id for o in ops.values()}]
    assert stable == [ops[1].op_id, ops[3].op_id, ops[4].op_id]


# ------------------------------------------------------------------ objects

def test_create_template_instantiation(env, ctx):
    rec = ctx.run(ctx.obj_create(env.root, 512, 8, [repl_template(3, 1)]), "STABLE")
    assert len(rec.layout.extents) == 1
    ext = rec.layout.extents[0]
    assert (ext.start, ext.end, ext.sub.tier_id) == (0, 8, 3)


def test_create_insufficient_devices(env, ctx):
    op = ctx.obj_create(env.root, 512, 8, [striped_template(3, 6, 1)])  # needs 7 of 6
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, NoEligibleDevice)


def test_repl3_on_two_device_tier():
    from sagesim import make_topology
    env = SageEnv.boot(make_topology(seed=1, nodes=2, devices_per_tier=2))
    op = env.ctx.obj_create(env.root, 512, 4, [repl_template(3, 3)])
    env.ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, NoEligibleDevice)


def test_unwritten_blocks_read_zero(env, ctx):
    obj = make_obj(env, nblocks=4)
    assert ctx.run(ctx.obj_read(obj, 0, 4)) == b"\x00" * 2048


def test_write_fanout_counts(env, ctx):
    # 2 blocks to a repl(2) extent -> 4 block writes on devices
    obj = make_obj(env, template=[repl_template(3, 2)])
    before = env.cluster.snapshot().tiers[3].bytes_written
    ctx.run(ctx.obj_write(obj, 0, b"\x05" * 1024), "STABLE")
    after = env.cluster.snapshot().tiers[3].bytes_written
    assert after - before == 4 * 512


def test_write_across_extents_respects_sublayouts(env, ctx):
    obj = make_obj(env, nblocks=12, template=[
        {"tier": 1, "redundancy": {"kind": "replication", "n": 2}, "blocks": 4},
        striped_template(3, 4, 1, 1)])
    rng = random.Random(0)
    data = rng.randbytes(12 * 512)
    ctx.run(ctx.obj_write(obj, 0, data), "STABLE")
    # oracle: resolve-and-count per extent
    rec = env.cluster.catalog().get_object(obj)
    units = layout_resolve(rec.layout, obj, 0, 12, 12)
    t1 = [u for u in units if u.device[0] == 1]
    t3 = [u for u in units if u.device[0] == 3]
    assert {u.role[0] for u in t1} == {"replica"}
    assert {u.role[0] for u in t3} == {"data", "parity"}
    assert ctx.run(ctx.obj_read(obj, 0, 12)) == data
    assert ctx.run(ctx.obj_read(obj, 2, 6)) == data[2 * 512:8 * 512]


def test_partial_block_write_rejected(env, ctx):
    obj = make_obj(env)
    op = ctx.obj_write(obj, 0, b"\x01" * 100)
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, RangeOutOfBounds)


def test_write_out_of_range(env, ctx):
    obj = make_obj(env, nblocks=4)
    op = ctx.obj_write(obj, 3, b"\x01" * 1024)
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, RangeOutOfBounds)


def test_write_to_freed_object(env, ctx):
    obj = make_obj(env)
    ctx.run(ctx.obj_free(obj), "STABLE")
    op = ctx.obj_write(obj, 0, b"\x01" * 512)
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, EntityNotFound)


def test_free_restores_used_blocks(env, ctx):
    base = {t: s.used_blocks for t, s in env.cluster.snapshot().tiers.items()}
    obj = make_obj(env, nblocks=16, template=[striped_template(2, 3, 1, 2)])
    ctx.run(ctx.obj_write(obj, 0, b"\x09" * 16 * 512), "STABLE")
    assert env.cluster.snapshot().tiers[2].used_blocks > base[2]
    ctx.run(ctx.obj_free(obj), "STABLE")
    after = {t: s.used_blocks for t, s in env.cluster.snapshot().tiers.items()}
    assert after == base


def test_double_free(env, ctx):
    obj = make_obj(env)
    ctx.run(ctx.obj_free(obj), "STABLE")
    op = ctx.obj_free(obj)
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, EntityNotFound)


def test_read_after_stable_write(env, ctx):
    obj = make_obj(env, nblocks=6)
    data = random.Random(1).randbytes(6 * 512)
    ctx.run(ctx.obj_write(obj, 0, data), "STABLE")
    assert ctx.run(ctx.obj_read(obj, 0, 6)) == data


def test_replica_failure_transparent(env, ctx):
    obj = make_obj(env, template=[repl_template(2, 2)])
    data = random.Random(2).randbytes(8 * 512)
    ctx.run(ctx.obj_write(obj, 0, data), "STABLE")
    rec = env.cluster.catalog().get_object(obj)
    dev = rec.layout.extents[0].placements[0][3:5]
    env.cluster.fail_device(*dev)
    env.quiesce()
    assert ctx.run(ctx.obj_read(obj, 0, 8)) == data


def test_striped_loss_reconstruction_all_patterns():
    data = random.Random(3).randbytes(8 * 512)
    for loss_role in [("data", 0), ("data", 2), ("parity", 0)]:
        env = SageEnv.boot(standard_topology(13))
        ctx = env.ctx
        obj = make_obj(env, template=[striped_template(2, 4, 1, 1)])
        ctx.run(ctx.obj_write(obj, 0, data), "STABLE")
        rec = env.cluster.catalog().get_object(obj)
        pmap = rec.layout.extents[0].placement_map()
        dev = pmap[(0, loss_role[0], loss_role[1])]
        env.cluster.fail_device(*dev)
        env.quiesce()
        assert ctx.run(ctx.obj_read(obj, 0, 8)) == data, loss_role


def test_losses_beyond_redundancy_unavailable():
    env = SageEnv.boot(standard_topology(11))
    ctx = env.ctx
    obj = make_obj(env, template=[repl_template(4, 1)])
    ctx.run(ctx.obj_write(obj, 0, b"\x0a" * 4096), "STABLE")
    rec = env.cluster.catalog().get_object(obj)
    dev = rec.layout.extents[0].placements[0][3:5]
    env.cluster.fail_device(*dev)
    env.quiesce()
    op = ctx.obj_read(obj, 0, 8)
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, DataUnavailable)
    assert env.cluster.stats.lost_units > 0  # never silent


def test_read_your_stable_writes_with_interleaving(env, ctx):
    objs = [make_obj(env, nblocks=4) for _ in range(3)]
    rng = random.Random(5)
    mine = rng.randbytes(4 * 512)
    w_mine = ctx.obj_write(objs[0], 0, mine)
    w_other1 = ctx.obj_write(objs[1], 0, rng.randbytes(4 * 512))
    w_other2 = ctx.obj_write(objs[2], 0, rng.randbytes(4 * 512))
    ctx.op_launch([w_other1, w_mine, w_other2])
    ctx.op_wait(w_mine, "STABLE")
    assert ctx.run(ctx.obj_read(objs[0], 0, 4)) == mine


# ------------------------------------------------------------------ indices

def test_idx_upsert(env, ctx):
    iid = ctx.run(ctx.idx_create(env.root), "STABLE")
    ctx.run(ctx.idx_put(iid, b"k", b"v1"), "STABLE")
    ctx.run(ctx.idx_put(iid, b"k", b"v2"), "STABLE")
    assert ctx.run(ctx.idx_get(iid, b"k")) == b"v2"


def test_idx_del_absent(env, ctx):
    iid = ctx.run(ctx.idx_create(env.root), "STABLE")
    op = ctx.idx_del(iid, b"nope")
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, KeyNotFound)


def test_idx_next_strict_bound(env, ctx):
    iid = ctx.run(ctx.idx_create(env.root), "STABLE")
    for k in (b"a", b"b", b"c"):
        ctx.run(ctx.idx_put(iid, k, k.upper()), "STABLE")
    assert [k for k, _ in ctx.run(ctx.idx_next(iid, b"", 10))] == [b"a", b"b", b"c"]
    assert [k for k, _ in ctx.run(ctx.idx_next(iid, b"b", 10))] == [b"c"]


def test_idx_put_in_aborted_tx_invisible(env, ctx):
    iid = ctx.run(ctx.idx_create(env.root), "STABLE")
    ctx.run(ctx.idx_put(iid, b"k", b"old"), "STABLE")
    tx = env.dtm.tx_begin(env.root)
    op = ctx.idx_put(iid, b"k", b"new", tx=tx)
    ctx.op_launch([op])
    env.cluster.loop.run(predicate=lambda: op.txid is not None or op.done)
    env.dtm.tx_abort(tx)
    env.quiesce()
    assert ctx.run(ctx.idx_get(iid, b"k")) == b"old"


def test_idx_pagination_oracle(env, ctx):
    iid = ctx.run(ctx.idx_create(env.root), "STABLE")
    rng = random.Random(17)
    oracle = OrderedKV()
    for _ in range(300):
        key = rng.randbytes(rng.randrange(1, 6))
        if rng.random() < 0.25 and oracle.get(key) is not None:
            ctx.run(ctx.idx_del(iid, key), "STABLE")
            oracle.delete(key)
        else:
            val = rng.randbytes(4)
            ctx.run(ctx.idx_put(iid, key, val), "STABLE")
            oracle.put(key, val)
    # paginate
    got, cursor = [], b""
    while True:
        page = ctx.run(ctx.idx_next(iid, cursor, 7))
        if not page:
            break
        got.extend(page)
        cursor = page[-1][0]
    assert got == oracle.items()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.binary(min_size=1, max_size=4),
                          st.binary(max_size=4), st.booleans()),
                max_size=30))
def test_okv_matches_dict_oracle(ops):
    kv = OrderedKV()
    shadow = {}
    for key, val, delete in ops:
        if delete:
            kv.delete(key)
            shadow.pop(key, None)
        else:
            kv.put(key, val)
            shadow[key] = val
    assert kv.items() == sorted(shadow.items())
    for key, _, _ in ops:
        assert kv.get(key) == shadow.get(key)
