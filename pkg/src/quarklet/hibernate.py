"""Five-state sandbox lifecycle with swap-out snapshots and lazy swap-in.

Hibernation deflates a warm sandbox: workers are paused at a loop boundary,
every present page is written to the swap file and marked not-present, and
the freed frames are handed back to the host through the allocator's
reclaim pass.  Waking up only resumes the workers; pages come back one at a
time when they are touched.
"""
from __future__ import annotations

import enum
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SwapIoError, UnmappedPage, WrongState
from .pagealloc import PAGE_SIZE, PageArena, PageRef
from .swapfile import SwapFile


class SandboxState(enum.Enum):
    INIT = "Init"
    WARM = "Warm"
    RUNNING = "Running"
    HIBERNATED = "Hibernated"
    WAKEUP = "WakeUp"


S = SandboxState
TRANSITIONS = {
    (S.INIT, S.WARM),
    (S.WARM, S.RUNNING),
    (S.RUNNING, S.WARM),
    (S.WARM, S.HIBERNATED),
    (S.HIBERNATED, S.WAKEUP),
    (S.WAKEUP, S.RUNNING),
}
ACCESSIBLE = {S.WARM, S.RUNNING, S.WAKEUP}


@dataclass
class PageTableEntry:
    present: bool = True
    frame: PageRef | None = None
    swap_slot: int | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


@dataclass(frozen=True)
class SnapshotStats:
    pages_swapped: int
    bytes_written: int


class _SharedExclusiveLock:
    """Many page accesses, or one lifecycle transition."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def shared(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def exclusive(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class PauseGate:
    """Cooperative pause point checked by workers between loop iterations."""

    def __init__(self):
        self._cond = threading.Condition()
        self._open = True
        self._inside = 0

    @property
    def is_open(self) -> bool:
        return self._open

    def enter(self, stop: threading.Event) -> bool:
        with self._cond:
            while not self._open and not stop.is_set():
                self._cond.wait(0.05)
            if stop.is_set():
                return False
            self._inside += 1
            return True

    def leave(self) -> None:
        with self._cond:
            self._inside -= 1
            self._cond.notify_all()

    def close(self, timeout: float | None = None) -> bool:
        """Stop admitting workers and wait until none is mid-iteration."""
        with self._cond:
            self._open = False
            return self._cond.wait_for(lambda: self._inside == 0, timeout)

    def open(self) -> None:
        with self._cond:
            self._open = True
            self._cond.notify_all()


class Worker:
    """An application thread that runs ``body(sandbox)`` in a loop."""

    def __init__(self, sandbox: "Sandbox", body: Callable[["Sandbox"], None], name: str = ""):
        self.sandbox = sandbox
        self.body = body
        self.iterations = 0
        self.error: BaseException | None = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name=name or "sandbox-worker", daemon=True)

    def start(self) -> "Worker":
        self._thread.start()
        return self

    def _loop(self) -> None:
        gate = self.sandbox.gate
        while gate.enter(self._stop):
            try:
                self.body(self.sandbox)
                self.iterations += 1
            except BaseException as exc:  # surfaced through .error
                self.error = exc
                self._stop.set()
            finally:
                gate.leave()

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        self._thread.join(timeout)


class Sandbox:
    """A sandbox's guest memory, page table, workers and lifecycle state."""

    def __init__(self, swap_path: str | os.PathLike, arena: PageArena | None = None):
        self.state = S.INIT
        self.arena = arena if arena is not None else PageArena()
        self.swap = SwapFile(swap_path, PAGE_SIZE)
        self.page_table: dict[int, PageTableEntry] = {}
        self.workers: list[Worker] = []
        self.gate = PauseGate()
        self.resident_pages = 0
        self.swapped_pages = 0
        self.swapin_count = 0
        self.swap_reads = 0
        self.settled_pages = 0
        self._woken = False
        self._lifecycle = _SharedExclusiveLock()
        self._alloc_lock = threading.Lock()
        self._stats_lock = threading.Lock()

    # -- lifecycle ------------------------------------------------------
    def _transition(self, target: SandboxState) -> None:
        if (self.state, target) not in TRANSITIONS:
            raise WrongState(f"{self.state.value} -> {target.value} is not allowed")
        self.state = target

    def boot(self) -> None:
        """Init -> Warm: the runtime is up and the app may map memory."""
        with self._lifecycle.exclusive():
            self._transition(S.WARM)

    def begin_request(self) -> None:
        with self._lifecycle.exclusive():
            self._transition(S.RUNNING)

    def end_request(self) -> None:
        """Running -> Warm.  Pages still on disk after a wake-up are pulled in
        here so that a warm sandbox never has swapped pages."""
        with self._lifecycle.exclusive():
            if self.state is not S.RUNNING:
                raise WrongState(f"{self.state.value} -> Warm is not allowed")
            if self._woken:
                for vpn in sorted(self.page_table):
                    entry = self.page_table[vpn]
                    if not entry.present:
                        self._swap_in(vpn, entry, count=False)
                        self.settled_pages += 1
                self._woken = False
            self._transition(S.WARM)

    def hibernate(self) -> SnapshotStats:
        with self._lifecycle.exclusive():
            if self.state is not S.WARM:
                raise WrongState(f"hibernate needs Warm, sandbox is {self.state.value}")
        # workers may be waiting on the lifecycle lock, so park them first
        self.gate.close()
        with self._lifecycle.exclusive():
            if self.state is not S.WARM:
                self.gate.open()
                raise WrongState(f"hibernate needs Warm, sandbox is {self.state.value}")
            self.swap.begin_epoch()
            swapped: list[int] = []
            try:
                for vpn in sorted(self.page_table):
                    entry = self.page_table[vpn]
                    if not entry.present:
                        continue
                    image = self.arena.page(entry.frame).tobytes()
                    slot = self.swap.write_slot(vpn, image)
                    frame = entry.frame
                    entry.present, entry.frame, entry.swap_slot = False, None, slot
                    self.arena.free(frame)
                    self.resident_pages -= 1
                    self.swapped_pages += 1
                    swapped.append(vpn)
            except SwapIoError:
                for vpn in swapped:
                    self._swap_in(vpn, self.page_table[vpn], count=False)
                self.gate.open()
                raise
            self.arena.reclaim_free_pages()
            self._transition(S.HIBERNATED)
            return SnapshotStats(len(swapped), len(swapped) * PAGE_SIZE)

    def wakeup(self) -> None:
        with self._lifecycle.exclusive():
            self._transition(S.WAKEUP)
            self._woken = True
            self.gate.open()

    # -- memory -----------------------------------------------------------
    def map_page(self, vpn: int, data: bytes | np.ndarray | None = None) -> None:
        """Back ``vpn`` with a fresh zeroed frame, optionally filled with ``data``."""
        with self._lifecycle.shared():
            if self.state not in ACCESSIBLE:
                raise WrongState(f"cannot map pages while {self.state.value}")
            if vpn in self.page_table:
                raise ValueError(f"vpn {vpn} already mapped")
            with self._alloc_lock:
                frame = self.arena.alloc()
            if data is not None:
                self._fill(self.arena.page(frame), 0, data)
            self.page_table[vpn] = PageTableEntry(True, frame)
            with self._stats_lock:
                self.resident_pages += 1

    def access_page(self, vpn: int, mode: str = "read", data: bytes | None = None,
                    offset: int = 0):
        """Read a whole page (returns ``bytes``) or write ``data`` at ``offset``
        (returns the byte count).  A not-present page is faulted in first."""
        if mode not in ("read", "write"):
            raise ValueError(f"mode must be 'read' or 'write', not {mode!r}")
        with self._lifecycle.shared():
            if self.state not in ACCESSIBLE:
                raise WrongState(f"page access while {self.state.value}")
            entry = self.page_table.get(vpn)
            if entry is None:
                raise UnmappedPage(f"vpn {vpn} is not mapped")
            with entry.lock:
                if not entry.present:
                    self._swap_in(vpn, entry)
                page = self.arena.page(entry.frame)
                if mode == "read":
                    return page.tobytes()
                return self._fill(page, offset, data)

    def page_view(self, vpn: int) -> np.ndarray:
        """Direct view of a present page; bypasses fault handling."""
        entry = self.page_table[vpn]
        if not entry.present:
            raise UnmappedPage(f"vpn {vpn} is not present")
        return self.arena.page(entry.frame)

    def _swap_in(self, vpn: int, entry: PageTableEntry, count: bool = True) -> None:
        data = self.swap.read_slot(entry.swap_slot)
        with self._stats_lock:
            self.swap_reads += 1
        with self._alloc_lock:
            frame = self.arena.alloc()
        self.arena.page(frame)[:] = np.frombuffer(data, dtype=np.uint8)
        self.swap.release(entry.swap_slot)
        entry.present, entry.frame, entry.swap_slot = True, frame, None
        with self._stats_lock:
            self.resident_pages += 1
            self.swapped_pages -= 1
            if count:
                self.swapin_count += 1

    @staticmethod
    def _fill(page: np.ndarray, offset: int, data) -> int:
        buf = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
        if offset < 0 or offset + len(buf) > PAGE_SIZE:
            raise ValueError("write runs past the end of the page")
        page[offset:offset + len(buf)] = buf
        return len(buf)

    # -- workers & accounting ---------------------------------------------
    def spawn_worker(self, body: Callable[["Sandbox"], None], name: str = "") -> Worker:
        worker = Worker(self, body, name).start()
        self.workers.append(worker)
        return worker

    def resident_bytes(self) -> int:
        return self.resident_pages * PAGE_SIZE

    def close(self) -> None:
        for worker in self.workers:
            worker.stop()
        self.gate.open()
        self.swap.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def hibernate(sandbox: Sandbox) -> SnapshotStats:
    return sandbox.hibernate()


def wakeup(sandbox: Sandbox) -> None:
    sandbox.wakeup()


def access_page(sandbox: Sandbox, vpn: int, mode: str = "read", data: bytes | None = None,
                offset: int = 0):
    return sandbox.access_page(vpn, mode, data, offset)


def resident_bytes(sandbox: Sandbox) -> int:
    return sandbox.resident_bytes()
