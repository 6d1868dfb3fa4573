"""Two-layer notification bitmap: which clients have unserviced SQ entries."""
from __future__ import annotations

import threading


def _bits(word: int):
    while word:
        low = word & -word
        yield low.bit_length() - 1
        word ^= low


class NotificationBitmap:
    """L2 bit c is set while client c has pending submissions; L1 bit k is set
    iff L2 word k is non-zero.  4096 clients fit under a single L1 word."""

    def __init__(self, clients: int = 4096):
        self.clients = clients
        self.l2 = [0] * ((clients + 63) // 64)
        self.l1 = [0] * ((len(self.l2) + 63) // 64)
        self._lock = threading.Lock()
        self.l1_reads = 0
        self.l2_reads = 0
        self.scans = 0

    def set(self, client: int) -> None:
        if not 0 <= client < self.clients:
            raise IndexError(client)
        k = client >> 6
        with self._lock:
            self.l2[k] |= 1 << (client & 63)
            self.l1[k >> 6] |= 1 << (k & 63)

    def any(self) -> bool:
        return any(self.l1)

    def collect(self) -> list[int]:
        """Return and clear every flagged client, lowest index first."""
        found = []
        with self._lock:
            self.scans += 1
            for j, top in enumerate(self.l1):
                self.l1_reads += 1
                if not top:
                    continue
                for k in _bits(top):
                    k += j << 6
                    word = self.l2[k]
                    self.l2_reads += 1
                    found.extend((k << 6) + c for c in _bits(word))
                    self.l2[k] = 0
                self.l1[j] = 0
        return found

    def check_coherent(self) -> None:
        for k, word in enumerate(self.l2):
            assert bool((self.l1[k >> 6] >> (k & 63)) & 1) == (word != 0), f"L1 disagrees with L2 word {k}"
