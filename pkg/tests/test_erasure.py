import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sagesim.erasure import gf_inv, gf_mul, parity_encode, parity_reconstruct
from sagesim.errors import TooManyLosses, UnequalUnitLengths


def test_xor_identity():
    assert parity_encode([b"\x0f" * 8, b"\xf0" * 8], 1) == [b"\xff" * 8]


def test_single_unit_xor_is_unit():
    assert parity_encode([b"\xab\xcd"], 1) == [b"\xab\xcd"]


def test_k0_is_empty():
    assert parity_encode([b"xy", b"zt"], 0) == []


def test_unequal_lengths_rejected():
    with pytest.raises(UnequalUnitLengths):
        parity_encode([b"ab", b"abc"], 1)


def test_too_many_losses():
    units = [bytes([i]) * 4 for i in range(3)]
    parity = parity_encode(units, 1)
    full = {("data", i): units[i] for i in range(3)}
    full[("parity", 0)] = parity[0]
    avail = {k: v for k, v in full.items() if k not in {("data", 0), ("data", 1)}}
    with pytest.raises(TooManyLosses):
        parity_reconstruct(avail, {("data", 0), ("data", 1)}, 3, 1)


def test_gf_field_basics():
    for a in range(1, 256):
        assert gf_mul(a, gf_inv(a)) == 1
    assert gf_mul(0, 123) == 0


@pytest.mark.parametrize("n", range(2, 7))
@pytest.mark.parametrize("k", [0, 1, 2])
def test_all_loss_patterns(n, k):
    rng = random.Random(n * 10 + k)
    for size in (1, 7, 4096):
        units = [rng.randbytes(size) for _ in range(n)]
        parities = parity_encode(units, k)
        full = {("data", i): units[i] for i in range(n)}
        full.update({("parity", j): parities[j] for j in range(k)})
        roles = sorted(full)
        for nloss in range(k + 1):
            for lost in itertools.combinations(roles, nloss):
                avail = {r: v for r, v in full.items() if r not in lost}
                rec = parity_reconstruct(avail, set(lost), n, k)
                for r in lost:
                    assert rec[r] == full[r], (n, k, size, lost)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2), st.integers(1, 64), st.randoms())
def test_erasure_soundness_property(n, k, size, pyrng):
    units = [bytes(pyrng.randrange(256) for _ in range(size)) for _ in range(n)]
    parities = parity_encode(units, k)
    full = {("data", i): units[i] for i in range(n)}
    full.update({("parity", j): parities[j] for j in range(k)})
    roles = sorted(full)
    nloss = pyrng.randint(0, k)
    lost = set(pyrng.sample(roles, nloss))
    avail = {r: v for r, v in full.items() if r not in lost}
    rec = parity_reconstruct(avail, lost, n, k)
    assert all(rec[r] == full[r] for r in lost)
