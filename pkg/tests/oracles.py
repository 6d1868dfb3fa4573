"""Reference models used as independent oracles by the test suite."""
from __future__ import annotations

import numpy as np


class LinearScanAllocator:
    """Plain boolean-array allocator: scan for the first free flag."""

    def __init__(self, pages: int = 1024):
        self.free = np.ones(pages, dtype=bool)
        self.free[0] = False

    def alloc(self) -> int | None:
        for i in range(1, len(self.free)):
            if self.free[i]:
                self.free[i] = False
                return i
        return None

    def release(self, i: int) -> bool:
        if i <= 0 or i >= len(self.free) or self.free[i]:
            return False
        self.free[i] = True
        return True

    def l2_int(self) -> int:
        out = 0
        for i in np.flatnonzero(self.free):
            out |= 1 << int(i)
        return out


class StreamDigest:
    """Rolling digest of a byte stream, fed in arbitrary chunk sizes."""

    def __init__(self):
        import hashlib

        self._h = hashlib.sha256()
        self.length = 0

    def update(self, chunk: bytes) -> None:
        self._h.update(chunk)
        self.length += len(chunk)

    def digest(self) -> tuple[int, bytes]:
        return self.length, self._h.digest()


class FlaggedSet:
    """Bitmap oracle: just the set of flagged client indices."""

    def __init__(self):
        self.flagged: set[int] = set()

    def set(self, c: int) -> None:
        self.flagged.add(c)

    def collect(self) -> list[int]:
        out = sorted(self.flagged)
        self.flagged.clear()
        return out
