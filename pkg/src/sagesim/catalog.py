"""Storage entities and the shared metadata catalog.

The catalog is pure state: object/index/container/realm records keyed by
EntityId. It owns no I/O and is mutated exclusively through ``apply``
with redo payloads, so replaying a node's WAL rebuilds it exactly. All
mutation payloads are idempotent (absolute values, set semantics).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import EntityNotFound, RealmNotFound, RealmReadOnly
from .ids import EntityId
from .layout import Layout

READ_WRITE = "READ_WRITE"
READ_ONLY = "READ_ONLY"


@dataclass
class RealmRecord:
    id: EntityId
    parent: EntityId | None
    access: str = READ_WRITE

    def to_json(self):
        return {"kind": "REALM", "id": self.id.to_json(),
                "parent": self.parent.to_json() if self.parent else None,
                "access": self.access}

    @classmethod
    def from_json(cls, d):
        return cls(id=EntityId.from_json(d["id"]),
                   parent=EntityId.from_json(d["parent"]) if d.get("parent") else None,
                   access=d.get("access", READ_WRITE))


@dataclass
class ObjectRecord:
    id: EntityId
    realm: EntityId
    block_size: int
    nblocks: int
    layout: Layout
    checksums: dict[int, int] = field(default_factory=dict)
    attrs: dict[str, str] = field(default_factory=dict)

    def to_json(self):
        return {"kind": "OBJECT", "id": self.id.to_json(), "realm": self.realm.to_json(),
                "block_size": self.block_size, "nblocks": self.nblocks,
                "layout": self.layout.to_json(),
                "checksums": {str(k): v for k, v in self.checksums.items()},
                "attrs": dict(self.attrs)}

    @classmethod
    def from_json(cls, d):
        return cls(id=EntityId.from_json(d["id"]), realm=EntityId.from_json(d["realm"]),
                   block_size=int(d["block_size"]), nblocks=int(d["nblocks"]),
                   layout=Layout.from_json(d["layout"]),
                   checksums={int(k): int(v) for k, v in d.get("checksums", {}).items()},
                   attrs=dict(d.get("attrs", {})))


@dataclass
class IndexRecord:
    id: EntityId
    realm: EntityId
    home_node: str
    attrs: dict[str, str] = field(default_factory=dict)

    def to_json(self):
        return {"kind": "INDEX", "id": self.id.to_json(), "realm": self.realm.to_json(),
                "home_node": self.home_node, "attrs": dict(self.attrs)}

    @classmethod
    def from_json(cls, d):
        return cls(id=EntityId.from_json(d["id"]), realm=EntityId.from_json(d["realm"]),
                   home_node=d["home_node"], attrs=dict(d.get("attrs", {})))


@dataclass
class ContainerRecord:
    id: EntityId
    realm: EntityId
    label: str
    members: set[EntityId] = field(default_factory=set)
    attrs: dict[str, str] = field(default_factory=dict)

    def to_json(self):
        return {"kind": "CONTAINER", "id": self.id.to_json(), "realm": self.realm.to_json(),
                "label": self.label,
                "members": [m.to_json() for m in sorted(self.members)],
                "attrs": dict(self.attrs)}

    @classmethod
    def from_json(cls, d):
        return cls(id=EntityId.from_json(d["id"]), realm=EntityId.from_json(d["realm"]),
                   label=d.get("label", ""),
                   members={EntityId.from_json(m) for m in d.get("members", [])},
                   attrs=dict(d.get("attrs", {})))


_RECORD_TYPES = {"REALM": RealmRecord, "OBJECT": ObjectRecord,
                 "INDEX": IndexRecord, "CONTAINER": ContainerRecord}

Record = RealmRecord | ObjectRecord | IndexRecord | ContainerRecord


def record_from_json(d: dict) -> Record:
    return _RECORD_TYPES[d["kind"]].from_json(d)


class Catalog:
    """In-memory entity catalog; every mutation is an idempotent redo apply."""

    def __init__(self):
        self.entities: dict[EntityId, Record] = {}

    # -- redo application (the only mutation path) --------------------------

    def apply(self, op: str, payload: dict):
        if op == "ent-put":
            rec = record_from_json(payload["record"])
            self.entities[rec.id] = rec
        elif op == "ent-del":
            self.entities.pop(EntityId.from_json(payload["id"]), None)
        elif op == "obj-merge":
            rec = self.entities.get(EntityId.from_json(payload["id"]))
            if isinstance(rec, ObjectRecord):
                for k, v in payload.get("checksums", {}).items():
                    rec.checksums[int(k)] = int(v)
                for k in payload.get("checksums_del", []):
                    rec.checksums.pop(int(k), None)
                if "layout" in payload:
                    rec.layout = Layout.from_json(payload["layout"])
        elif op == "cont-update":
            rec = self.entities.get(EntityId.from_json(payload["id"]))
            if isinstance(rec, ContainerRecord):
                for m in payload.get("add", []):
                    rec.members.add(EntityId.from_json(m))
                for m in payload.get("remove", []):
                    rec.members.discard(EntityId.from_json(m))
        elif op == "attrs-merge":
            rec = self.entities.get(EntityId.from_json(payload["id"]))
            if rec is not None:
                rec.attrs.update({str(k): str(v) for k, v in payload.get("attrs", {}).items()})
        elif op == "member-gc":
            # drop a freed entity from every container that held it
            gone = EntityId.from_json(payload["id"])
            for rec in self.entities.values():
                if isinstance(rec, ContainerRecord):
                    rec.members.discard(gone)
        else:
            raise ValueError(f"unknown catalog op {op!r}")

    # -- lookups -------------------------------------------------------------

    def get(self, eid: EntityId) -> Record:
        rec = self.entities.get(eid)
        if rec is None:
            raise EntityNotFound(entity=eid.short())
        return rec

    def get_object(self, eid: EntityId) -> ObjectRecord:
        rec = self.get(eid)
        if not isinstance(rec, ObjectRecord):
            raise EntityNotFound(entity=eid.short(), expected="OBJECT")
        return rec

    def get_index(self, eid: EntityId) -> IndexRecord:
        rec = self.get(eid)
        if not isinstance(rec, IndexRecord):
            raise EntityNotFound(entity=eid.short(), expected="INDEX")
        return rec

    def get_container(self, eid: EntityId) -> ContainerRecord:
        rec = self.get(eid)
        if not isinstance(rec, ContainerRecord):
            raise EntityNotFound(entity=eid.short(), expected="CONTAINER")
        return rec

    def realm(self, eid: EntityId) -> RealmRecord:
        rec = self.entities.get(eid)
        if not isinstance(rec, RealmRecord):
            raise RealmNotFound(realm=eid.short() if eid else None)
        return rec

    def check_writable(self, realm_id: EntityId):
        if self.realm(realm_id).access != READ_WRITE:
            raise RealmReadOnly(realm=realm_id.short())

    def query(self, predicate: dict[str, str]) -> list[EntityId]:
        """Entities whose attrs satisfy every (key, value) pair, sorted by id."""
        out = []
        for eid, rec in self.entities.items():
            attrs = getattr(rec, "attrs", None)
            if attrs is None:
                if predicate:
                    continue
                attrs = {}
            if all(attrs.get(k) == v for k, v in predicate.items()):
                out.append(eid)
        return sorted(out)

    def containers_holding(self, eid: EntityId) -> list[EntityId]:
        return sorted(c.id for c in self.entities.values()
                      if isinstance(c, ContainerRecord) and eid in c.members)

    def dump_lines(self) -> list[dict]:
        """One JSON object per entity (catalog dump wire/CLI format)."""
        lines = []
        for eid in sorted(self.entities):
            rec = self.entities[eid]
            line = {"id_hi": eid.hi, "id_lo": eid.lo, "kind": eid.kind.value,
                    "attrs": dict(getattr(rec, "attrs", {}) or {})}
            if isinstance(rec, ContainerRecord):
                line["members"] = [[m.hi, m.lo] for m in sorted(rec.members)]
            lines.append(line)
        return lines
