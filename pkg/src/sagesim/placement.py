"""Rendezvous (highest-random-weight) device selection.

Every placement decision hashes (object id, extent, stripe, role, device)
with a splitmix64-style mixer and picks the eligible device with the top
score. The choice is a pure function of its inputs, so placement is stable
under replay and only units on a failed device move when the online set
changes.
"""

from __future__ import annotations

from .errors import NoEligibleDevice
from .ids import EntityId

MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    x &= MASK64
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & MASK64
    return x ^ (x >> 31)


def hash_fields(seed: int, *fields: int) -> int:
    h = mix64(seed ^ 0x9E3779B97F4A7C15)
    for f in fields:
        h = mix64(h ^ (f & MASK64))
    return h


def stable_str_hash(s: str) -> int:
    """Process-independent 64-bit hash of a string (no PYTHONHASHSEED)."""
    h = 0x9E3779B97F4A7C15
    for b in s.encode():
        h = mix64(h ^ b)
    return h


def pick_node(seed: int, eid: EntityId, node_ids: list[str]) -> str:
    """Rendezvous choice of a home node for an entity."""
    if not node_ids:
        raise NoEligibleDevice(reason="no nodes up")
    return max(node_ids,
               key=lambda n: (hash_fields(seed, eid.hi, eid.lo, stable_str_hash(n)), n))


ROLE_TAGS = {"data": 1, "parity": 2, "replica": 3}


def placement_score(
    seed: int,
    obj: EntityId,
    extent_index: int,
    stripe_index: int,
    role: tuple[str, int],
    tier_id: int,
    device_index: int,
) -> int:
    return hash_fields(
        seed,
        obj.hi,
        obj.lo,
        extent_index,
        stripe_index,
        ROLE_TAGS[role[0]],
        role[1],
        tier_id,
        device_index,
    )


def place_unit(
    seed: int,
    obj: EntityId,
    extent_index: int,
    stripe_index: int,
    role: tuple[str, int],
    tier_id: int,
    online_devices: list[int],
    exclude: set[int] = frozenset(),
) -> int:
    """Pick the eligible device index with the highest rendezvous score.

    ``online_devices`` are the ONLINE device indices of the target tier.
    Ties (astronomically unlikely) break toward the lower device index so
    the result never depends on candidate iteration order.
    """
    best = None
    best_score = -1
    for dev in online_devices:
        if dev in exclude:
            continue
        score = placement_score(seed, obj, extent_index, stripe_index, role, tier_id, dev)
        if score > best_score or (score == best_score and dev < best):
            best, best_score = dev, score
    if best is None:
        raise NoEligibleDevice(tier=tier_id, excluded=len(exclude))
    return best
