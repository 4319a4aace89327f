"""Ordered byte-string key-value map with strict range iteration.

Backs every index: a sorted list maintained with bisect. Keys compare as
unsigned byte strings, which is exactly Python's bytes ordering.
"""

from __future__ import annotations

import bisect


class OrderedKV:
    def __init__(self):
        self._keys: list[bytes] = []
        self._vals: list[bytes] = []

    def __len__(self) -> int:
        return len(self._keys)

    def put(self, key: bytes, value: bytes):
        i = bisect.bisect_left(self._keys, key)
        if i < len(self._keys) and self._keys[i] == key:
            self._vals[i] = value
        else:
            self._keys.insert(i, key)
            self._vals.insert(i, value)

    def delete(self, key: bytes) -> bool:
        i = bisect.bisect_left(self._keys, key)
        if i < len(self._keys) and self._keys[i] == key:
            del self._keys[i]
            del self._vals[i]
            return True
        return False

    def get(self, key: bytes) -> bytes | None:
        i = bisect.bisect_left(self._keys, key)
        if i < len(self._keys) and self._keys[i] == key:
            return self._vals[i]
        return None

    def next_after(self, key: bytes, n: int) -> list[tuple[bytes, bytes]]:
        """Up to n pairs with keys strictly greater than ``key``, ascending."""
        i = bisect.bisect_right(self._keys, key)
        return list(zip(self._keys[i:i + n], self._vals[i:i + n]))

    def items(self) -> list[tuple[bytes, bytes]]:
        return list(zip(self._keys, self._vals))
