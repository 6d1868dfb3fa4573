"""Asynchronous privileged calls (QCall) and the trapping baseline.

Virtual threads are generators.  A thread asks for a privileged operation by
yielding a :class:`QcallJob` and receives the :class:`JobResult` back as the
value of the ``yield``::

    def body():
        res = yield QcallJob.open_file("data.bin", "rw")
        res = yield QcallJob.sleep(50)
        return res.code

In ``qcall`` mode the job goes onto a bounded shared queue, the thread blocks
and the vCPU immediately switches to the next ready thread.  Handler threads
drain the queue, run the job and put the submitter straight back on its
vCPU's run queue.  In ``sync`` mode the vCPU traps instead: it is held for the
trap cost, runs the job inline and pays the trap cost again on return.
"""
from __future__ import annotations

import enum
import fnmatch
import hashlib
import heapq
import itertools
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Generator, Iterable

from .errors import QueueFull, ShutdownInProgress

DEFAULT_TRAP_COST_US = 2.0  # measured sys_read hypercall overhead
DEFAULT_QUEUE_CAPACITY = 4096
DEFAULT_BATCH = 32

_job_ids = itertools.count(1)


class JobKind(enum.Enum):
    OPEN_FILE = "OpenFile"
    SLEEP = "Sleep"
    HOST_OP = "HostOp"


class JobStatus(enum.IntEnum):
    QUEUED = 0
    EXECUTING = 1
    DONE = 2


@dataclass(frozen=True)
class JobResult:
    code: str
    payload: bytes = b""
    handle: int | None = field(default=None, compare=False)

    @property
    def ok(self) -> bool:
        return self.code == "ok"


@dataclass(eq=False)
class QcallJob:
    kind: JobKind
    payload: bytes = b""
    op: str = ""
    latency_us: float = 0.0
    job_id: int = field(default_factory=lambda: next(_job_ids))
    status: JobStatus = JobStatus.QUEUED
    result: JobResult | None = None
    submitter: "VThread | None" = field(default=None, repr=False)

    @classmethod
    def open_file(cls, path: str, mode: str = "r") -> "QcallJob":
        return cls(JobKind.OPEN_FILE, path.encode(), mode)

    @classmethod
    def sleep(cls, us: float) -> "QcallJob":
        return cls(JobKind.SLEEP, latency_us=us)

    @classmethod
    def host_op(cls, name: str, data: bytes = b"", latency_us: float = 0.0) -> "QcallJob":
        return cls(JobKind.HOST_OP, data, name, latency_us)

    def clone(self) -> "QcallJob":
        return QcallJob(self.kind, self.payload, self.op, self.latency_us)

    def advance(self, status: JobStatus) -> None:
        if status <= self.status:
            raise RuntimeError(f"job {self.job_id}: {self.status.name} -> {status.name}")
        self.status = status


HOST_OPS: dict[str, Callable[[bytes], bytes]] = {
    "echo": lambda b: b,
    "upper": bytes.upper,
    "reverse": lambda b: b[::-1],
    "sha256": lambda b: hashlib.sha256(b).digest(),
    "len": lambda b: len(b).to_bytes(8, "little"),
}


class FilePolicy:
    """Which scratch-relative paths a sandbox may open, and how."""

    def __init__(self, scratch: str | os.PathLike, deny: Iterable[str] = (), read_only: Iterable[str] = ()):
        self.scratch = Path(scratch).resolve()
        self.deny = list(deny)
        self.read_only = list(read_only)

    def check(self, path: str, mode: str) -> str | None:
        """Return an error code, or None when the open is allowed."""
        if mode not in ("r", "w", "rw"):
            return "EINVAL"
        target = (self.scratch / path).resolve()
        if self.scratch not in target.parents:
            return "EACCES"
        if any(fnmatch.fnmatch(path, pat) for pat in self.deny):
            return "EACCES"
        if "w" in mode and any(fnmatch.fnmatch(path, pat) for pat in self.read_only):
            return "EACCES"
        return None


@dataclass
class OpenFile:
    fd: int
    path: str
    mode: str


class HostContext:
    """Host side of the runtime: file policy plus the table of opened files."""

    def __init__(self, policy: FilePolicy):
        self.policy = policy
        self.files: dict[int, OpenFile] = {}
        self._by_key: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def execute(self, job: QcallJob) -> JobResult:
        if job.kind is JobKind.SLEEP:
            return JobResult("ok")
        if job.kind is JobKind.HOST_OP:
            fn = HOST_OPS.get(job.op)
            if fn is None:
                return JobResult("ENOSYS", job.op.encode())
            return JobResult("ok", fn(job.payload))
        return self._open(job.payload.decode(), job.op or "r")

    def _open(self, path: str, mode: str) -> JobResult:
        denied = self.policy.check(path, mode)
        if denied:
            return JobResult(denied, path.encode())
        with self._lock:
            fd = self._by_key.get((path, mode))
            if fd is None:
                target = self.policy.scratch / path
                target.parent.mkdir(parents=True, exist_ok=True)
                flags = os.O_RDONLY if mode == "r" else os.O_RDWR | os.O_CREAT
                try:
                    fd = os.open(target, flags, 0o600)
                except OSError as exc:
                    return JobResult("ENOENT" if exc.errno == 2 else "EIO", path.encode())
                self.files[fd] = OpenFile(fd, path, mode)
                self._by_key[(path, mode)] = fd
        return JobResult("ok", path.encode(), handle=fd)

    def close(self) -> None:
        with self._lock:
            for fd in self.files:
                os.close(fd)
            self.files.clear()
            self._by_key.clear()


def execute_sequential(jobs: Iterable[QcallJob], ctx: HostContext) -> list[JobResult]:
    """Direct execution with no threads, vCPUs or queues (the reference)."""
    return [ctx.execute(job) for job in jobs]


class ThreadState(enum.Enum):
    RUNNING = "Running"
    READY = "Ready"
    BLOCKED = "Blocked"
    FINISHED = "Finished"


class VThread:
    def __init__(self, thread_id: int, body: Generator, vcpu: "VCpu"):
        self.thread_id = thread_id
        self.body = body
        self.vcpu = vcpu
        self.state = ThreadState.READY
        self.pending_job: int | None = None
        self.inbox: JobResult | None = None
        self.retry: QcallJob | None = None
        self.off_cpu = False
        self.wakeups = 0
        self.return_value = None
        self.error: BaseException | None = None

    def __repr__(self):
        return f"VThread({self.thread_id}, {self.state.value})"


class JobQueue:
    """Bounded multi-producer / multi-consumer FIFO."""

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY):
        self.capacity = capacity
        self._items: deque[QcallJob] = deque()
        self._lock = threading.Lock()
        self.max_depth = 0

    def put(self, job: QcallJob) -> None:
        with self._lock:
            if len(self._items) >= self.capacity:
                raise QueueFull(f"job queue at capacity {self.capacity}")
            self._items.append(job)
            self.max_depth = max(self.max_depth, len(self._items))

    def take(self, n: int) -> list[QcallJob]:
        with self._lock:
            return [self._items.popleft() for _ in range(min(n, len(self._items)))]

    def __len__(self):
        return len(self._items)


def _spin(us: float) -> None:
    if us <= 0:
        return
    end = time.perf_counter() + us * 1e-6
    while time.perf_counter() < end:
        pass


def _host_delay(us: float) -> None:
    if us >= 500:
        time.sleep(us * 1e-6)
    else:
        _spin(us)


class VCpu:
    def __init__(self, engine: "QcallEngine", cpu_id: int):
        self.engine = engine
        self.cpu_id = cpu_id
        self.run_queue: deque[VThread] = deque()
        self.current: VThread | None = None
        self.threads: list[VThread] = []
        self.context_switches = 0
        self.idle_polls = 0
        self.dispatches = 0
        self.hypercalls = 0
        self.stalls = 0
        self.trace: list[tuple[str, int]] = []
        self.cond = threading.Condition()

    @property
    def live_threads(self) -> int:
        return sum(t.state is not ThreadState.FINISHED for t in self.threads)

    def make_ready(self, thread: VThread) -> None:
        with self.cond:
            thread.state = ThreadState.READY
            self.run_queue.append(thread)
            self.cond.notify()

    def step(self) -> bool:
        """Dispatch one ready thread and run it until it blocks, yields or ends."""
        with self.cond:
            if not self.run_queue:
                return False
            thread = self.run_queue.popleft()
            if thread.off_cpu:
                self.context_switches += 1
                thread.off_cpu = False
            thread.state = ThreadState.RUNNING
            self.current = thread
            self.dispatches += 1
        if self.engine.record_trace:
            self.trace.append(("run", thread.thread_id))
        if thread.retry is not None:
            job, thread.retry = thread.retry, None
            self._dispatch_job(thread, job)
            if thread.state is not ThreadState.RUNNING:
                return True
        while True:
            value, thread.inbox = thread.inbox, None
            try:
                request = thread.body.send(value)
            except StopIteration as stop:
                thread.return_value = stop.value
                self._finish(thread)
                return True
            except BaseException as exc:
                thread.error = exc
                self._finish(thread)
                return True
            if not isinstance(request, QcallJob):
                thread.error = TypeError(f"virtual threads may only yield QcallJob, got {request!r}")
                self._finish(thread)
                return True
            self._dispatch_job(thread, request)
            if thread.state is not ThreadState.RUNNING:
                return True

    def _dispatch_job(self, thread: VThread, job: QcallJob) -> None:
        if self.engine.mode == "sync":
            thread.inbox = sync_hypercall(self, thread, job, self.engine.trap_cost_us)
            return
        try:
            qcall_submit(self, thread, job)
        except QueueFull:
            self.engine.queue_full_retries += 1
            thread.retry = job
            with self.cond:
                thread.off_cpu = True
                self.context_switches += 1
                self.current = None
                thread.state = ThreadState.READY
                self.run_queue.append(thread)
        except ShutdownInProgress as exc:
            thread.error = exc
            self._finish(thread)

    def _finish(self, thread: VThread) -> None:
        with self.cond:
            thread.state = ThreadState.FINISHED
            self.current = None
            self.cond.notify_all()
        self.engine._thread_finished()

    def run(self, stop: threading.Event) -> None:
        """Worker loop: never spins; sleeps on the run-queue condition when idle."""
        while True:
            with self.cond:
                while not self.run_queue and self.live_threads and not stop.is_set():
                    self.idle_polls += 1
                    if self.engine.record_trace:
                        self.trace.append(("idle", len(self.run_queue)))
                    self.cond.wait()
                if stop.is_set() or (not self.run_queue and not self.live_threads):
                    return
            self.step()


def qcall_submit(vcpu: VCpu, thread: VThread, job: QcallJob) -> None:
    """Enqueue ``job`` for ``thread`` and switch it off the vCPU.

    The result reaches the thread when a handler wakes it; the vCPU never
    waits for a particular job.
    """
    engine = vcpu.engine
    if engine.shutting_down:
        raise ShutdownInProgress("engine is shutting down")
    if vcpu.current is not thread:
        raise RuntimeError(f"{thread} is not running on vCPU {vcpu.cpu_id}")
    job.submitter = thread
    with vcpu.cond:
        thread.state = ThreadState.BLOCKED
        thread.pending_job = job.job_id
        try:
            engine.queue.put(job)
        except QueueFull:
            thread.state = ThreadState.RUNNING
            thread.pending_job = None
            raise
        thread.off_cpu = True
        vcpu.context_switches += 1
        vcpu.current = None
    engine.submitted += 1
    engine._signal_work()


def sync_hypercall(vcpu: VCpu, thread: VThread, job: QcallJob,
                   trap_cost_us: float = DEFAULT_TRAP_COST_US) -> JobResult:
    """Baseline: trap, execute inline while holding the vCPU, trap back."""
    _spin(trap_cost_us)
    job.advance(JobStatus.EXECUTING)
    result = vcpu.engine.host.execute(job)
    _host_delay(job.latency_us)
    job.result = result
    job.advance(JobStatus.DONE)
    _spin(trap_cost_us)
    vcpu.context_switches += 2
    vcpu.hypercalls += 1
    vcpu.stalls += 1
    vcpu.engine.submitted += 1
    vcpu.engine.completed += 1
    return result


def handler_step(engine: "QcallEngine", batch: int | None = None) -> int:
    """Run up to ``batch`` queued jobs and complete any whose host latency has
    elapsed.  Returns how many jobs were dequeued and executed."""
    engine._complete_due()
    jobs = engine.queue.take(batch or engine.batch)
    for job in jobs:
        job.advance(JobStatus.EXECUTING)
        if engine.record_trace:
            engine.start_order.append(job.job_id)
        job.result = engine.host.execute(job)
        if job.latency_us > 0:
            engine._defer(job)
        else:
            engine._complete(job)
    return len(jobs)


class QcallEngine:
    """vCPUs, the shared job queue and handler threads.

    ``mode`` is ``"qcall"`` (asynchronous) or ``"sync"`` (trap per call).
    Use :meth:`run` for threaded execution, or drive :meth:`VCpu.step` and
    :func:`handler_step` by hand for deterministic tests.
    """

    def __init__(self, host: HostContext, mode: str = "qcall", vcpus: int = 1, handlers: int = 1,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY, batch: int = DEFAULT_BATCH,
                 trap_cost_us: float = DEFAULT_TRAP_COST_US, record_trace: bool = False):
        if mode not in ("qcall", "sync"):
            raise ValueError(f"unknown mode {mode!r}")
        self.host = host
        self.mode = mode
        self.vcpus = [VCpu(self, i) for i in range(vcpus)]
        self.n_handlers = handlers
        self.queue = JobQueue(queue_capacity)
        self.batch = batch
        self.trap_cost_us = trap_cost_us
        self.record_trace = record_trace
        self.start_order: list[int] = []
        self.threads: list[VThread] = []
        self.shutting_down = False
        self.submitted = 0
        self.completed = 0
        self.queue_full_retries = 0
        self._timers: list[tuple[float, int, QcallJob]] = []
        self._timer_lock = threading.Lock()
        self._work = threading.Condition()
        self._live = 0
        self._all_done = threading.Event()
        self._all_done.set()

    # -- threads ----------------------------------------------------------
    def spawn(self, body: Generator | Callable[[], Generator], vcpu: int | None = None) -> VThread:
        gen = body() if callable(body) else body
        cpu = self.vcpus[len(self.threads) % len(self.vcpus) if vcpu is None else vcpu]
        thread = VThread(len(self.threads), gen, cpu)
        self.threads.append(thread)
        cpu.threads.append(thread)
        with self._work:
            self._live += 1
            self._all_done.clear()
        cpu.make_ready(thread)
        return thread

    def _thread_finished(self) -> None:
        with self._work:
            self._live -= 1
            if self._live == 0:
                self._all_done.set()
            self._work.notify_all()

    # -- completion path -----------------------------------------------------
    def _complete(self, job: QcallJob) -> None:
        thread = job.submitter
        vcpu = thread.vcpu
        with vcpu.cond:
            if thread.state is not ThreadState.BLOCKED or thread.pending_job != job.job_id:
                raise RuntimeError(f"lost or duplicate wake for job {job.job_id} ({thread})")
            job.advance(JobStatus.DONE)
            thread.pending_job = None
            thread.inbox = job.result
            thread.wakeups += 1
            thread.state = ThreadState.READY
            vcpu.run_queue.append(thread)
            vcpu.cond.notify()
        with self._work:
            self.completed += 1

    def _defer(self, job: QcallJob) -> None:
        with self._timer_lock:
            heapq.heappush(self._timers, (time.perf_counter() + job.latency_us * 1e-6, job.job_id, job))

    def _complete_due(self) -> int:
        now = time.perf_counter()
        due = []
        with self._timer_lock:
            while self._timers and self._timers[0][0] <= now:
                due.append(heapq.heappop(self._timers)[2])
        for job in due:
            self._complete(job)
        return len(due)

    def _next_deadline(self) -> float | None:
        with self._timer_lock:
            return self._timers[0][0] if self._timers else None

    @property
    def pending_timers(self) -> int:
        return len(self._timers)

    def _signal_work(self) -> None:
        with self._work:
            self._work.notify()

    def _handler_loop(self, stop: threading.Event) -> None:
        while not stop.is_set():
            if handler_step(self) or self._complete_due():
                continue
            with self._work:
                if len(self.queue) or stop.is_set():
                    continue
                deadline = self._next_deadline()
                timeout = None if deadline is None else max(0.0, deadline - time.perf_counter())
                self._work.wait(timeout if timeout is not None else 0.05)

    # -- driver ---------------------------------------------------------------
    def run(self, bodies: Iterable = (), timeout: float = 60.0) -> list:
        """Spawn ``bodies`` and run everything on real threads until all
        virtual threads finish.  Returns their return values in spawn order."""
        for body in bodies:
            self.spawn(body)
        stop = threading.Event()
        workers = [threading.Thread(target=v.run, args=(stop,), name=f"vcpu-{v.cpu_id}", daemon=True)
                   for v in self.vcpus]
        if self.mode == "qcall":
            workers += [threading.Thread(target=self._handler_loop, args=(stop,), name=f"qcall-handler-{i}",
                                         daemon=True) for i in range(self.n_handlers)]
        for w in workers:
            w.start()
        finished = self._all_done.wait(timeout)
        stop.set()
        for v in self.vcpus:
            with v.cond:
                v.cond.notify_all()
        with self._work:
            self._work.notify_all()
        for w in workers:
            w.join(5.0)
        if not finished:
            raise TimeoutError(f"virtual threads still live after {timeout}s")
        for t in self.threads:
            if t.error is not None:
                raise t.error
        return [t.return_value for t in self.threads]

    def shutdown(self) -> None:
        self.shutting_down = True

    # -- stats ----------------------------------------------------------------
    @property
    def context_switches(self) -> int:
        return sum(v.context_switches for v in self.vcpus)

    @property
    def idle_polls(self) -> int:
        return sum(v.idle_polls for v in self.vcpus)

    @property
    def hypercalls(self) -> int:
        return sum(v.hypercalls for v in self.vcpus)

    @property
    def idle_transitions(self) -> int:
        """Times a vCPU could not run any thread: idle sleeps plus trap stalls."""
        return sum(v.idle_polls + v.stalls for v in self.vcpus)
