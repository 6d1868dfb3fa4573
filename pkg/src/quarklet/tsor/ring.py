"""Single-producer / single-consumer byte ring."""
from __future__ import annotations


class RingBuffer:
    """Bounded FIFO byte stream over a power-of-two buffer.

    ``head`` and ``tail`` are free-running byte counters; only the producer
    moves ``tail`` and only the consumer moves ``head``.  Storage is allocated
    on first use so idle channels cost nothing.
    """

    __slots__ = ("capacity", "_mask", "_buf", "head", "tail")

    def __init__(self, capacity: int = 65536):
        if capacity <= 0 or capacity & (capacity - 1):
            raise ValueError(f"ring capacity must be a power of two, got {capacity}")
        self.capacity = capacity
        self._mask = capacity - 1
        self._buf: bytearray | None = None
        self.head = 0
        self.tail = 0

    @property
    def used(self) -> int:
        return self.tail - self.head

    @property
    def free(self) -> int:
        return self.capacity - (self.tail - self.head)

    def __len__(self) -> int:
        return self.tail - self.head

    def _storage(self) -> bytearray:
        if self._buf is None:
            self._buf = bytearray(self.capacity)
        return self._buf

    def write(self, data) -> int:
        """Copy as much of ``data`` as fits; return the byte count."""
        n = min(len(data), self.capacity - (self.tail - self.head))
        if n <= 0:
            return 0
        view = memoryview(data)
        buf = self._storage()
        start = self.tail & self._mask
        first = min(n, self.capacity - start)
        buf[start:start + first] = view[:first]
        if n > first:
            buf[:n - first] = view[first:n]
        self.tail += n
        return n

    def read(self, max_bytes: int) -> bytes:
        n = min(max_bytes, self.tail - self.head)
        if n <= 0:
            return b""
        buf = self._buf
        start = self.head & self._mask
        first = min(n, self.capacity - start)
        if n > first:
            out = bytes(buf[start:]) + bytes(buf[:n - first])
        else:
            out = bytes(buf[start:start + n])
        self.head += n
        return out

    def discard(self) -> int:
        n = self.tail - self.head
        self.head = self.tail
        return n
