import pytest

from sagesim.errors import NoEligibleDevice
from sagesim.ids import EntityId, EntityKind
from sagesim.placement import hash_fields, mix64, pick_node, place_unit, placement_score

OBJ = EntityId(0, 42, EntityKind.OBJECT)


def test_single_candidate():
    assert place_unit(1, OBJ, 0, 0, ("replica", 0), 3, [5]) == 5


def test_pure_function():
    args = (9, OBJ, 1, 2, ("data", 1), 2, list(range(8)))
    assert place_unit(*args) == place_unit(*args)


def test_exclusion_matches_bruteforce_runner_up():
    devices = list(range(10))
    first = place_unit(7, OBJ, 0, 0, ("data", 0), 1, devices)
    second = place_unit(7, OBJ, 0, 0, ("data", 0), 1, devices, exclude={first})
    # brute force: order all candidates by score, take the runner-up
    scored = sorted(devices,
                    key=lambda d: placement_score(7, OBJ, 0, 0, ("data", 0), 1, d),
                    reverse=True)
    assert first == scored[0]
    assert second == scored[1]


def test_no_eligible_device():
    with pytest.raises(NoEligibleDevice):
        place_unit(1, OBJ, 0, 0, ("replica", 0), 3, [4], exclude={4})
    with pytest.raises(NoEligibleDevice):
        place_unit(1, OBJ, 0, 0, ("replica", 0), 3, [])


def test_order_independence():
    devices = list(range(12))
    a = place_unit(3, OBJ, 5, 2, ("parity", 1), 4, devices)
    b = place_unit(3, OBJ, 5, 2, ("parity", 1), 4, list(reversed(devices)))
    assert a == b


def test_spread_across_roles():
    # different roles of the same stripe tend to different devices; with
    # exclusion they must be pairwise distinct
    devices = list(range(6))
    chosen = []
    for role in [("data", 0), ("data", 1), ("data", 2), ("parity", 0)]:
        d = place_unit(11, OBJ, 0, 0, role, 2, devices, exclude=set(chosen))
        chosen.append(d)
    assert len(set(chosen)) == 4


def test_mix64_avalanche():
    a = mix64(1)
    b = mix64(2)
    assert a != b
    assert bin(a ^ b).count("1") > 8


def test_hash_fields_sensitivity():
    base = hash_fields(1, 2, 3)
    assert hash_fields(1, 2, 4) != base
    assert hash_fields(2, 2, 3) != base


def test_pick_node_deterministic():
    nodes = ["n0", "n1", "n2"]
    iid = EntityId(0, 9, EntityKind.INDEX)
    assert pick_node(5, iid, nodes) == pick_node(5, iid, list(reversed(nodes)))
