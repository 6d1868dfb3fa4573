"""Batched asynchronous file I/O ring for the data path.

Files must first be opened through an ``OpenFile`` qcall (the control path,
where the permission check lives); the ring only moves bytes.  Descriptors
are executed in submission order by a single consumer, which gives per-file
read-after-write ordering.
"""
from __future__ import annotations

import errno
import itertools
import os
import threading
from collections import deque
from dataclasses import dataclass, field

from .errors import ShutdownInProgress, UnopenedFile
from .qcall import HostContext


@dataclass
class IoDescriptor:
    op: str
    fd: int
    offset: int
    length: int = 0
    buffer: bytes = b""
    desc_id: int = -1

    @classmethod
    def read(cls, fd: int, offset: int, length: int) -> "IoDescriptor":
        return cls("read", fd, offset, length)

    @classmethod
    def write(cls, fd: int, offset: int, data: bytes) -> "IoDescriptor":
        return cls("write", fd, offset, len(data), bytes(data))


@dataclass(frozen=True)
class IoCompletion:
    descriptor_id: int
    result: int | bytes
    """Bytes read, bytes written, or a negative errno."""


@dataclass
class _Batch:
    ids: list[int]
    done: list[IoCompletion] = field(default_factory=list)


class IoRing:
    """Single-producer / single-consumer submission and completion rings.

    With ``threaded=True`` a background consumer plays the host kernel;
    otherwise call :meth:`poll` to consume submissions inline.
    """

    def __init__(self, host: HostContext, depth: int = 256, threaded: bool = True):
        self.host = host
        self.depth = depth
        self._sq: deque[tuple[int, IoDescriptor]] = deque()
        self._batches: dict[int, _Batch] = {}
        self._ids = itertools.count()
        self._tickets = itertools.count(1)
        self._cond = threading.Condition()
        self._closed = False
        self.submitted = 0
        self.completed = 0
        self._thread = None
        if threaded:
            self._thread = threading.Thread(target=self._consume_loop, name="io-ring", daemon=True)
            self._thread.start()

    def submit(self, batch: list[IoDescriptor]) -> int:
        if self._closed:
            raise ShutdownInProgress("ring closed")
        for desc in batch:
            if desc.op not in ("read", "write"):
                raise ValueError(f"unknown op {desc.op!r}")
            if desc.fd not in self.host.files:
                raise UnopenedFile(f"fd {desc.fd} was not opened through the control path")
        ticket = next(self._tickets)
        with self._cond:
            ids = []
            for desc in batch:
                desc.desc_id = next(self._ids)
                ids.append(desc.desc_id)
                self._sq.append((ticket, desc))
            self._batches[ticket] = _Batch(ids)
            self.submitted += len(batch)
            self._cond.notify_all()
        return ticket

    def reap(self, ticket: int, timeout: float | None = 30.0) -> list[IoCompletion]:
        with self._cond:
            batch = self._batches[ticket]
            if self._thread is None:
                self._consume_ready()
            ok = self._cond.wait_for(lambda: len(batch.done) == len(batch.ids), timeout)
            if not ok:
                raise TimeoutError(f"ticket {ticket} incomplete after {timeout}s")
            del self._batches[ticket]
            return list(batch.done)

    def poll(self) -> int:
        with self._cond:
            return self._consume_ready()

    def _consume_ready(self) -> int:
        n = 0
        while self._sq:
            ticket, desc = self._sq.popleft()
            self._batches[ticket].done.append(IoCompletion(desc.desc_id, self._execute(desc)))
            n += 1
        self.completed += n
        self._cond.notify_all()
        return n

    def _execute(self, desc: IoDescriptor) -> int | bytes:
        entry = self.host.files.get(desc.fd)
        if entry is None:
            return -errno.EBADF
        try:
            if desc.op == "read":
                return os.pread(desc.fd, desc.length, desc.offset)
            if entry.mode == "r":
                return -errno.EBADF
            return os.pwrite(desc.fd, desc.buffer, desc.offset)
        except OSError as exc:
            return -(exc.errno or errno.EIO)

    def _consume_loop(self) -> None:
        with self._cond:
            while not self._closed:
                if not self._sq:
                    self._cond.wait()
                    continue
                self._consume_ready()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(5.0)


def io_submit(ring: IoRing, batch: list[IoDescriptor]) -> int:
    return ring.submit(batch)


def io_reap(ring: IoRing, ticket: int, timeout: float | None = 30.0) -> list[IoCompletion]:
    return ring.reap(ticket, timeout)
