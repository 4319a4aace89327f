"""128-bit entity identifiers and the cluster-wide allocator."""

from __future__ import annotations

import enum
from dataclasses import dataclass

MASK64 = (1 << 64) - 1


class EntityKind(enum.Enum):
    OBJECT = "OBJECT"
    INDEX = "INDEX"
    CONTAINER = "CONTAINER"
    REALM = "REALM"


@dataclass(frozen=True, order=True)
class EntityId:
    hi: int
    lo: int
    kind: EntityKind

    def __post_init__(self):
        if not (0 <= self.hi <= MASK64 and 0 <= self.lo <= MASK64):
            raise ValueError("id halves must fit in 64 bits")

    @property
    def value(self) -> int:
        return (self.hi << 64) | self.lo

    def is_nil(self) -> bool:
        return self.hi == 0 and self.lo == 0

    def short(self) -> str:
        return f"{self.kind.value[0]}:{self.hi:x}:{self.lo:x}"

    def to_json(self) -> dict:
        return {"hi": self.hi, "lo": self.lo, "kind": self.kind.value}

    @classmethod
    def from_json(cls, d: dict) -> "EntityId":
        return cls(hi=int(d["hi"]), lo=int(d["lo"]), kind=EntityKind(d["kind"]))


def nil_id(kind: EntityKind = EntityKind.REALM) -> EntityId:
    """(0, 0) is reserved and never allocated."""
    return EntityId(0, 0, kind)


class IdAllocator:
    """Monotone 128-bit counter; (0,0) is nil so the first id is (0,1).

    Issued ids are never reused, including across simulated node crashes:
    issuance is client-runtime state, outside any crashable node.
    """

    def __init__(self):
        self._next = 1

    def generate(self, kind: EntityKind) -> EntityId:
        v = self._next
        self._next += 1
        return EntityId(hi=(v >> 64) & MASK64, lo=v & MASK64, kind=kind)

    @property
    def issued(self) -> int:
        return self._next - 1
