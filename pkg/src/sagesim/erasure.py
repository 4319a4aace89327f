"""Parity encode/reconstruct for striped sub-layouts.

K=1 is plain bytewise XOR. K=2 is Reed-Solomon over GF(2^8) with primitive
polynomial 0x11D; parity j is the Vandermonde row j+1, i.e.
``P_r = sum_i alpha^(r*i) * d_i`` for r in {1, 2}. Any combination of up to
two lost units (data or parity) is recoverable.

Roles are ("data", i) / ("parity", j) tuples at this layer; the layout
engine maps its richer unit descriptions onto them.
"""

from __future__ import annotations

import numpy as np

from .errors import TooManyLosses, UnequalUnitLengths

_POLY = 0x11D

# exp/log tables for GF(2^8); exp is doubled so exp[log a + log b] works.
GF_EXP = [0] * 512
GF_LOG = [0] * 256
_x = 1
for _i in range(255):
    GF_EXP[_i] = _x
    GF_LOG[_x] = _i
    _x <<= 1
    if _x & 0x100:
        _x ^= _POLY
for _i in range(255, 512):
    GF_EXP[_i] = GF_EXP[_i - 255]

# full 256x256 multiplication table; row c is the map "multiply by c"
_MUL = np.zeros((256, 256), dtype=np.uint8)
for _a in range(1, 256):
    _row = _MUL[_a]
    _la = GF_LOG[_a]
    for _b in range(1, 256):
        _row[_b] = GF_EXP[_la + GF_LOG[_b]]


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return GF_EXP[GF_LOG[a] + GF_LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("gf_inv(0)")
    return GF_EXP[255 - GF_LOG[a]]


def _mul_vec(c: int, arr: np.ndarray) -> np.ndarray:
    if c == 0:
        return np.zeros_like(arr)
    if c == 1:
        return arr.copy()
    return _MUL[c][arr]


def _coeff(parity_index: int, data_index: int, k: int) -> int:
    """Generator coefficient for parity row ``parity_index`` (given K)."""
    row = 0 if k == 1 else parity_index + 1
    return GF_EXP[(row * data_index) % 255]


def parity_encode(data_units: list[bytes], k: int) -> list[bytes]:
    """Compute the K parity blocks for equal-length data units."""
    if k == 0:
        return []
    if k not in (1, 2):
        raise ValueError(f"k must be 0, 1 or 2, got {k}")
    if not data_units:
        return [b""] * k
    length = len(data_units[0])
    if any(len(u) != length for u in data_units):
        raise UnequalUnitLengths(sizes=sorted({len(u) for u in data_units}))
    if length == 0:
        return [b""] * k
    arrays = [np.frombuffer(u, dtype=np.uint8) for u in data_units]
    out = []
    for j in range(k):
        acc = np.zeros(length, dtype=np.uint8)
        for i, arr in enumerate(arrays):
            acc ^= _mul_vec(_coeff(j, i, k), arr)
        out.append(acc.tobytes())
    return out


def parity_reconstruct(
    available: dict[tuple[str, int], bytes],
    missing: set[tuple[str, int]],
    n: int,
    k: int,
) -> dict[tuple[str, int], bytes]:
    """Recover the missing units byte-identically from the survivors."""
    if not missing:
        return {}
    if len(missing) > k:
        raise TooManyLosses(missing=len(missing), k=k)
    all_roles = {("data", i) for i in range(n)} | {("parity", j) for j in range(k)}
    if set(available) | set(missing) != all_roles or set(available) & set(missing):
        raise ValueError("available and missing must partition the stripe roles")

    lengths = {len(b) for b in available.values()}
    if len(lengths) != 1:
        raise UnequalUnitLengths(sizes=sorted(lengths))
    length = lengths.pop()
    if length == 0:
        return {r: b"" for r in missing}

    data = {
        i: np.frombuffer(available[("data", i)], dtype=np.uint8)
        for i in range(n)
        if ("data", i) in available
    }
    missing_data = sorted(i for (r, i) in missing if r == "data")
    avail_parity = sorted(j for j in range(k) if ("parity", j) in available)

    if missing_data:
        if len(missing_data) > len(avail_parity):
            raise TooManyLosses(missing=len(missing), k=k)
        rows = avail_parity[: len(missing_data)]
        # rhs_r = parity_r XOR sum over known data of coeff * d_i
        rhs = []
        for j in rows:
            acc = np.frombuffer(available[("parity", j)], dtype=np.uint8).copy()
            for i, arr in data.items():
                acc ^= _mul_vec(_coeff(j, i, k), arr)
            rhs.append(acc)
        mat = [[_coeff(j, i, k) for i in missing_data] for j in rows]
        solved = _solve(mat, rhs)
        for idx, i in enumerate(missing_data):
            data[i] = solved[idx]

    out: dict[tuple[str, int], bytes] = {}
    for i in missing_data:
        out[("data", i)] = data[i].tobytes()
    for role in missing:
        if role[0] == "parity":
            j = role[1]
            acc = np.zeros(length, dtype=np.uint8)
            for i in range(n):
                acc ^= _mul_vec(_coeff(j, i, k), data[i])
            out[role] = acc.tobytes()
    return out


def _solve(mat: list[list[int]], rhs: list[np.ndarray]) -> list[np.ndarray]:
    """Solve an m x m GF(256) system (m <= 2) for byte-array unknowns."""
    m = len(mat)
    if m == 1:
        inv = gf_inv(mat[0][0])
        return [_mul_vec(inv, rhs[0])]
    a, b = mat[0]
    c, d = mat[1]
    det = gf_mul(a, d) ^ gf_mul(b, c)
    det_inv = gf_inv(det)
    # inverse = det_inv * [[d, b], [c, a]] (subtraction is xor in GF(2^8))
    x0 = _mul_vec(gf_mul(det_inv, d), rhs[0]) ^ _mul_vec(gf_mul(det_inv, b), rhs[1])
    x1 = _mul_vec(gf_mul(det_inv, c), rhs[0]) ^ _mul_vec(gf_mul(det_inv, a), rhs[1])
    return [x0, x1]
