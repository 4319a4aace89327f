import json

from sagesim.catalog import READ_ONLY
from sagesim.errors import EntityNotFound, RealmNotFound, RealmReadOnly
from sagesim.ids import EntityId, EntityKind
from sagesim.workloads import repl_template


def test_container_create_empty(env, ctx):
    cid = ctx.run(ctx.container_create(env.root, "hdf5-sim-output"), "STABLE")
    rec = env.cluster.catalog().get_container(cid)
    assert rec.label == "hdf5-sim-output"
    assert rec.members == set()


def test_container_labels_non_unique(env, ctx):
    a = ctx.run(ctx.container_create(env.root, "same", {"pc": "hot"}), "STABLE")
    b = ctx.run(ctx.container_create(env.root, "same", {"pc": "hot"}), "STABLE")
    assert a != b
    assert set(ctx.catalog_query({"pc": "hot"})) == {a, b}


def test_create_in_readonly_realm_rejected(env, ctx):
    ro = ctx.run(ctx.realm_create(env.root, READ_ONLY), "STABLE")
    op = ctx.container_create(ro, "x")
    ctx.op_launch([op])
    env.quiesce()
    assert op.state == "FAILED"
    assert isinstance(op.error, RealmReadOnly)


def test_realm_not_found(env, ctx):
    ghost = EntityId(0, 999, EntityKind.REALM)
    op = ctx.container_create(ghost, "x")
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, RealmNotFound)


def test_readonly_mutation_leaves_catalog_identical(env, ctx):
    ro = ctx.run(ctx.realm_create(env.root, READ_ONLY), "STABLE")
    before = json.dumps(env.cluster.catalog().dump_lines(), sort_keys=True)
    op = ctx.obj_create(ro, 512, 4, [repl_template(3, 1)])
    ctx.op_launch([op])
    env.quiesce()
    assert op.state == "FAILED"
    after = json.dumps(env.cluster.catalog().dump_lines(), sort_keys=True)
    assert before == after


def test_container_update_set_semantics(env, ctx):
    cid = ctx.run(ctx.container_create(env.root, "c"), "STABLE")
    o1 = ctx.run(ctx.obj_create(env.root, 512, 2, [repl_template(3, 1)]), "STABLE").id
    o2 = ctx.run(ctx.obj_create(env.root, 512, 2, [repl_template(3, 1)]), "STABLE").id
    ctx.run(ctx.container_update(cid, add={o1, o2}), "STABLE")
    ctx.run(ctx.container_update(cid, remove={o1}), "STABLE")
    assert env.cluster.catalog().get_container(cid).members == {o2}
    # idempotent add
    ctx.run(ctx.container_update(cid, add={o2}), "STABLE")
    assert env.cluster.catalog().get_container(cid).members == {o2}


def test_container_update_unknown_member_atomic(env, ctx):
    cid = ctx.run(ctx.container_create(env.root, "c"), "STABLE")
    ghost = EntityId(0, 404, EntityKind.OBJECT)
    op = ctx.container_update(cid, add={ghost})
    ctx.op_launch([op])
    env.quiesce()
    assert isinstance(op.error, EntityNotFound)
    assert env.cluster.catalog().get_container(cid).members == set()


def test_catalog_query_against_shadow(env, ctx):
    # shadow list oracle: naive filter over everything we created
    shadow = []
    for i in range(5):
        attrs = {"format": "hdf5"} if i < 2 else {"format": "raw"}
        rec = ctx.run(ctx.obj_create(env.root, 512, 2, [repl_template(3, 1)],
                                     attrs=attrs), "STABLE")
        shadow.append((rec.id, attrs))
    for predicate in ({}, {"format": "hdf5"}, {"format": "raw"}, {"nope": "x"}):
        got = ctx.catalog_query(predicate)
        want = sorted(eid for eid, attrs in shadow
                      if all(attrs.get(k) == v for k, v in predicate.items()))
        if predicate:
            assert got == want
        else:
            assert set(want) <= set(got)  # vacuous predicate returns everything


def test_vacuous_predicate_sorted(env, ctx):
    ids = ctx.catalog_query({})
    assert ids == sorted(ids)


def test_referential_integrity_after_free(env, ctx):
    cid = ctx.run(ctx.container_create(env.root, "c"), "STABLE")
    rec = ctx.run(ctx.obj_create(env.root, 512, 2, [repl_template(3, 1)]), "STABLE")
    ctx.run(ctx.container_update(cid, add={rec.id}), "STABLE")
    ctx.run(ctx.obj_free(rec.id), "STABLE")
    cat = env.cluster.catalog()
    assert rec.id not in cat.get_container(cid).members
    # every remaining member resolves
    for ent in cat.entities.values():
        for m in getattr(ent, "members", ()):
            cat.get(m)


def test_entity_attrs_merge(env, ctx):
    rec = ctx.run(ctx.obj_create(env.root, 512, 2, [repl_template(3, 1)]), "STABLE")
    ctx.run(ctx.entity_set_attrs(rec.id, {"stage": "raw"}), "STABLE")
    ctx.run(ctx.entity_set_attrs(rec.id, {"owner": "sim"}), "STABLE")
    attrs = env.cluster.catalog().get_object(rec.id).attrs
    assert attrs == {"stage": "raw", "owner": "sim"}


def test_catalog_dump_schema(env, ctx):
    cid = ctx.run(ctx.container_create(env.root, "c", {"k": "v"}), "STABLE")
    lines = env.cluster.catalog().dump_lines()
    by_kind = {}
    for line in lines:
        assert set(line) >= {"id_hi", "id_lo", "kind", "attrs"}
        by_kind.setdefault(line["kind"], []).append(line)
    assert "REALM" in by_kind
    assert any("members" in l for l in by_kind["CONTAINER"])
