"""Layout engine: maps object block extents to tiers, devices and
redundancy units.

A layout is an ordered list of extents exactly tiling [0, nblocks); each
extent carries its own sub-layout (replication or N+K striping) plus the
concrete device placements chosen via rendezvous hashing when the extent
was instantiated. Layouts are immutable values: swapping an extent's
sub-layout returns a new layout and leaves the old one untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import CoverageViolation, ExtentNotFound, InvalidTopology, NoEligibleDevice, RangeOutOfBounds
from .ids import EntityId
from .placement import place_unit

MEDIA_CLASSES = ("NVME_NVRAM", "SAS_SSD", "PERF_DISK", "ARCHIVE_DISK")

MIN_BLOCK_SIZE = 512
MAX_BLOCK_SIZE = 1 << 20


@dataclass(frozen=True)
class TierSpec:
    tier_id: int
    media: str
    device_count: int
    device_capacity: int  # blocks
    latency_us: int
    bandwidth_bps: int

    def validate(self):
        if not 1 <= self.tier_id <= 4:
            raise InvalidTopology(f"tier_id {self.tier_id} outside 1..4")
        if self.media not in MEDIA_CLASSES:
            raise InvalidTopology(f"unknown media class {self.media!r}")
        if self.device_count < 1 or self.device_capacity < 1:
            raise InvalidTopology(f"tier {self.tier_id} needs devices and capacity")
        if self.latency_us < 0 or self.bandwidth_bps <= 0:
            raise InvalidTopology(f"tier {self.tier_id} latency/bandwidth invalid")


@dataclass(frozen=True)
class Replication:
    n: int

    def validate(self):
        if not 1 <= self.n <= 4:
            raise CoverageViolation(f"replication factor {self.n} outside 1..4")

    def to_json(self):
        return {"kind": "replication", "n": self.n}


@dataclass(frozen=True)
class Striped:
    n: int  # data units per stripe
    k: int  # parity units per stripe

    def validate(self):
        if self.n < 2:
            raise CoverageViolation(f"striping needs >= 2 data units, got {self.n}")
        if self.k not in (0, 1, 2):
            raise CoverageViolation(f"parity count {self.k} outside 0..2")

    def to_json(self):
        return {"kind": "striped", "n": self.n, "k": self.k}


def scheme_from_json(d: dict):
    if d["kind"] == "replication":
        return Replication(n=int(d["n"]))
    if d["kind"] == "striped":
        return Striped(n=int(d["n"]), k=int(d.get("k", 0)))
    raise ValueError(f"unknown redundancy kind {d['kind']!r}")


@dataclass(frozen=True)
class SubLayout:
    tier_id: int
    scheme: Replication | Striped
    unit_size: int = 1  # blocks per stripe unit

    def validate(self):
        self.scheme.validate()
        if self.unit_size < 1:
            raise CoverageViolation("unit_size must be >= 1")

    @property
    def group_width(self) -> int:
        """Devices needed for one stripe / replica group."""
        if isinstance(self.scheme, Replication):
            return self.scheme.n
        return self.scheme.n + self.scheme.k

    def to_json(self):
        return {"tier": self.tier_id, "scheme": self.scheme.to_json(), "unit_size": self.unit_size}

    @classmethod
    def from_json(cls, d: dict) -> "SubLayout":
        return cls(tier_id=int(d["tier"]), scheme=scheme_from_json(d["scheme"]),
                   unit_size=int(d.get("unit_size", 1)))


Role = tuple[str, int]  # ("data", i) | ("parity", j) | ("replica", i)
UnitGeom = tuple[int, Role, int, int, int]  # stripe, role, nblocks, rel_start, rel_end


def extent_units(length: int, sub: SubLayout) -> list[UnitGeom]:
    """Enumerate the stripe units of an extent of ``length`` blocks.

    For data/replica roles (rel_start, rel_end) is the extent-relative block
    range the unit stores; parity units cover the stripe's data span.
    """
    units: list[UnitGeom] = []
    if isinstance(sub.scheme, Replication):
        for i in range(sub.scheme.n):
            units.append((0, ("replica", i), length, 0, length))
        return units
    n, k, u = sub.scheme.n, sub.scheme.k, sub.unit_size
    span = n * u
    nstripes = (length + span - 1) // span
    for s in range(nstripes):
        base = s * span
        width0 = min(u, length - base)
        for i in range(n):
            lo = base + i * u
            hi = min(lo + u, length)
            if hi > lo:
                units.append((s, ("data", i), hi - lo, lo, hi))
        for j in range(k):
            units.append((s, ("parity", j), width0, base, min(base + span, length)))
    return units


PlacementKey = tuple[int, str, int]  # (stripe, role_tag, role_idx)


def make_unit_key(obj: EntityId, extent_index: int, gen: int, stripe: int, role: Role) -> tuple:
    """Identity of one placement unit inside a device's unit store."""
    return (obj.hi, obj.lo, extent_index, gen, stripe, role[0], role[1])


@dataclass(frozen=True)
class Extent:
    start: int
    end: int
    sub: SubLayout
    gen: int = 0  # bumped on every swap so device unit keys never collide
    config_version: int = 0
    placements: tuple = ()  # ((stripe, tag, idx, tier, dev), ...)

    def placement_map(self) -> dict[PlacementKey, tuple[int, int]]:
        return {(s, t, i): (tier, dev) for (s, t, i, tier, dev) in self.placements}

    @property
    def length(self) -> int:
        return self.end - self.start

    def footprint_blocks(self) -> int:
        return sum(g[2] for g in extent_units(self.length, self.sub))

    def to_json(self):
        return {
            "start": self.start,
            "end": self.end,
            "sub": self.sub.to_json(),
            "gen": self.gen,
            "config_version": self.config_version,
            "placements": [list(p) for p in self.placements],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Extent":
        return cls(
            start=int(d["start"]),
            end=int(d["end"]),
            sub=SubLayout.from_json(d["sub"]),
            gen=int(d.get("gen", 0)),
            config_version=int(d.get("config_version", 0)),
            placements=tuple(tuple(p) for p in d.get("placements", [])),
        )


@dataclass(frozen=True)
class Layout:
    extents: tuple[Extent, ...]

    def validate(self, nblocks: int):
        validate_coverage([(e.start, e.end) for e in self.extents], nblocks)
        for e in self.extents:
            e.sub.validate()

    def extent_at(self, block: int) -> tuple[int, Extent]:
        for i, e in enumerate(self.extents):
            if e.start <= block < e.end:
                return i, e
        raise RangeOutOfBounds(block=block)

    def to_json(self):
        return {"extents": [e.to_json() for e in self.extents]}

    @classmethod
    def from_json(cls, d: dict) -> "Layout":
        return cls(extents=tuple(Extent.from_json(e) for e in d["extents"]))


def validate_coverage(ranges: list[tuple[int, int]], nblocks: int):
    pos = 0
    for start, end in ranges:
        if start != pos or end <= start:
            raise CoverageViolation(f"extents must tile [0,{nblocks}) exactly; gap at block {pos}")
        pos = end
    if pos != nblocks:
        raise CoverageViolation(f"extents cover [0,{pos}) but object has {nblocks} blocks")


@dataclass(frozen=True)
class PlacementUnit:
    obj: EntityId
    extent_index: int
    stripe_index: int
    role: Role
    device: tuple[int, int]  # (tier_id, device_index)
    nblocks: int
    rel_start: int  # extent-relative object block range this unit serves
    rel_end: int
    gen: int

    def unit_key(self) -> tuple:
        return make_unit_key(self.obj, self.extent_index, self.gen,
                             self.stripe_index, self.role)

    def to_json(self):
        return {
            "extent": self.extent_index,
            "stripe": self.stripe_index,
            "role": [self.role[0], self.role[1]],
            "tier": self.device[0],
            "device": self.device[1],
            "nblocks": self.nblocks,
            "blocks": [self.rel_start, self.rel_end],
        }


class DeviceDirectory:
    """What placement assignment needs to know about the cluster."""

    def online_devices(self, tier_id: int) -> list[int]:
        raise NotImplementedError

    def free_blocks(self, tier_id: int, device_index: int) -> int:
        raise NotImplementedError

    def device_count(self, tier_id: int) -> int:
        raise NotImplementedError


def assign_placements(
    seed: int,
    obj: EntityId,
    extent_index: int,
    start: int,
    end: int,
    sub: SubLayout,
    directory: DeviceDirectory,
    config_version: int,
    gen: int = 0,
) -> Extent:
    """Instantiate an extent: pick a device for every stripe unit.

    Units of one stripe group always land on pairwise-distinct devices;
    devices without room for a unit are excluded up front. Raises
    NoEligibleDevice when the tier cannot satisfy the group width.
    """
    sub.validate()
    length = end - start
    if directory.device_count(sub.tier_id) < sub.group_width:
        raise NoEligibleDevice(tier=sub.tier_id, need=sub.group_width,
                               have=directory.device_count(sub.tier_id))
    online = sorted(directory.online_devices(sub.tier_id))
    planned: dict[int, int] = {}
    placements = []
    by_stripe: dict[int, set[int]] = {}
    for stripe, role, nblocks, _lo, _hi in extent_units(length, sub):
        used = by_stripe.setdefault(stripe, set())
        exclude = set(used)
        for dev in online:
            if directory.free_blocks(sub.tier_id, dev) - planned.get(dev, 0) < nblocks:
                exclude.add(dev)
        dev = place_unit(seed, obj, extent_index, stripe, role, sub.tier_id,
                         online, exclude)
        used.add(dev)
        planned[dev] = planned.get(dev, 0) + nblocks
        placements.append((stripe, role[0], role[1], sub.tier_id, dev))
    return Extent(start=start, end=end, sub=sub, gen=gen,
                  config_version=config_version, placements=tuple(placements))


def layout_resolve(layout: Layout, obj: EntityId, start: int, end: int,
                   nblocks: int) -> list[PlacementUnit]:
    """Every unit needed to read [start, end): all units of touched stripes."""
    if start < 0 or end > nblocks or start > end:
        raise RangeOutOfBounds(start=start, end=end, nblocks=nblocks)
    out: list[PlacementUnit] = []
    if start == end:
        return out
    for eidx, ext in enumerate(layout.extents):
        lo = max(start, ext.start)
        hi = min(end, ext.end)
        if lo >= hi:
            continue
        pmap = ext.placement_map()
        touched: set[int] = set()
        if isinstance(ext.sub.scheme, Striped):
            span = ext.sub.scheme.n * ext.sub.unit_size
            first = (lo - ext.start) // span
            last = (hi - 1 - ext.start) // span
            touched = set(range(first, last + 1))
        else:
            touched = {0}
        for stripe, role, ublocks, rel_lo, rel_hi in extent_units(ext.length, ext.sub):
            if stripe not in touched:
                continue
            device = pmap[(stripe, role[0], role[1])]
            out.append(PlacementUnit(
                obj=obj, extent_index=eidx, stripe_index=stripe, role=role,
                device=device, nblocks=ublocks,
                rel_start=rel_lo, rel_end=rel_hi, gen=ext.gen))
    return out


def layout_swap(layout: Layout, extent_index: int, new_extent: Extent, nblocks: int) -> Layout:
    """Replace one extent; value semantics, coverage re-validated."""
    if not 0 <= extent_index < len(layout.extents):
        raise ExtentNotFound(extent=extent_index)
    extents = list(layout.extents)
    old = extents[extent_index]
    if (new_extent.start, new_extent.end) != (old.start, old.end):
        raise CoverageViolation(
            f"swap must preserve extent range [{old.start},{old.end})")
    extents[extent_index] = new_extent
    new = Layout(extents=tuple(extents))
    new.validate(nblocks)
    return new


# -- layout templates ------------------------------------------------------

def instantiate_template(template: list[dict], nblocks: int) -> list[tuple[int, int, SubLayout]]:
    """Expand a template into concrete (start, end, SubLayout) extents.

    Template entries carry {"tier", "redundancy", "unit_size"?, "blocks"?};
    "blocks" is a count or "rest" (default) for the remaining blocks.
    """
    out = []
    pos = 0
    for i, entry in enumerate(template):
        sub = SubLayout(
            tier_id=int(entry["tier"]),
            scheme=scheme_from_json(entry["redundancy"]),
            unit_size=int(entry.get("unit_size", 1)),
        )
        sub.validate()
        blocks = entry.get("blocks", "rest")
        if blocks == "rest":
            if i != len(template) - 1:
                raise CoverageViolation('"rest" extent must be last in the template')
            end = nblocks
        else:
            end = pos + int(blocks)
        if end > nblocks:
            raise CoverageViolation(f"template extends past object end ({end} > {nblocks})")
        if end > pos:
            out.append((pos, end, sub))
        pos = end
    if pos != nblocks:
        raise CoverageViolation(f"template covers [0,{pos}) of [0,{nblocks})")
    return out
