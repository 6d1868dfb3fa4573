"""Experiment harness: five scenarios wired from the engines, and
deterministic CSV / markdown reports.

Every counter in a report is read from engine instrumentation (channel,
fabric, vCPU and sandbox counters); the harness only measures wall-clock
time around the calls.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import random
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .apps import APPS, make_app
from .errors import InvalidConfig, QuarkletError, ScenarioFailure, WouldBlock
from .hibernate import Sandbox
from .qcall import FilePolicy, HostContext, QcallEngine, QcallJob
from .transport import LatencyModel, PodAddr
from .tsor import Cluster

SCENARIOS = ("echo", "stream", "connect", "qcall", "startup")
STARTUP_MODES = ("cold", "warm", "hibernate", "wakeup")
# Columns whose values depend on the wall clock; excluded from determinism checks.
TIMING_SUFFIXES = ("_us", "_s", "_mbps", "_rps")
# Counts that follow OS thread scheduling rather than the seed (vCPU idle
# waits while handler threads run); also excluded from determinism checks.
SCHEDULE_DEPENDENT = frozenset({"idle_transitions"})
KEY_COLUMNS = ("app", "mode", "message_size", "run")

# Published hardware numbers, printed for context only.  They come from RDMA
# NICs and KVM, so nothing here is expected to reach them.
REFERENCES = {
    "echo": [("TSoR round-trip latency (RDMA)", "8.97 us"), ("kernel TCP/IP CNI latency", "64.09 us")],
    "stream": [("TSoR throughput (RDMA)", "37.4 Gbps"), ("kernel TCP/IP CNI throughput", "17.1 Gbps")],
    "connect": [("cross-node messages per connect (two-way handshake)", "2")],
    "qcall": [("hypercall overhead, sys_read", "2.0 us/req"), ("Redis PING with hypercall", "11.0 us/req"),
              ("Redis PING with QCall", "5.0 us/req")],
    "startup": [("cold start, float-op", "563 ms"), ("keep warm, float-op", "1.4 ms, 40.82 MB idle"),
                ("hibernation resume, float-op", "19.9 ms"), ("hibernated vs warm idle memory", "81.3% less")],
}


@dataclass
class BenchConfig:
    scenario: str = "echo"
    seed: int = 0
    backend: str = "inproc"
    node_count: int = 2
    ring_capacity: int = 65536
    sq_capacity: int = 256
    cq_capacity: int = 256
    lane_latency_us: float = 0.0
    lane_jitter_us: float = 0.0
    message_size: int = 64
    message_sizes: tuple = (64, 1024, 16384, 65536)
    requests: int = 1000
    total_bytes: int = 4 * 1024 * 1024
    connects: int = 100
    trap_cost_us: float = 2.0
    host_latency_us: float = 50.0
    threads: int = 8
    vcpus: int = 1
    handlers: int = 1
    jobs_per_thread: int = 100
    runs: int = 1
    app: str = "all"
    mode: str = "all"
    app_pages: int = 1024
    touch_fraction: float = 0.1

    def validate(self) -> "BenchConfig":
        problems = []
        if self.scenario not in SCENARIOS:
            problems.append(f"scenario must be one of {SCENARIOS}")
        if self.backend not in ("inproc", "loopback"):
            problems.append("backend must be inproc or loopback")
        if self.node_count < 2 and self.scenario in ("echo", "stream", "connect"):
            problems.append("network scenarios need node_count >= 2")
        if self.ring_capacity <= 0 or self.ring_capacity & (self.ring_capacity - 1):
            problems.append("ring_capacity must be a power of two")
        for name in ("sq_capacity", "cq_capacity", "message_size", "requests", "total_bytes", "connects",
                     "threads", "vcpus", "handlers", "jobs_per_thread", "runs", "app_pages"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if not self.message_sizes or any(s <= 0 for s in self.message_sizes):
            problems.append("message_sizes must be positive")
        if min(self.lane_latency_us, self.lane_jitter_us, self.trap_cost_us, self.host_latency_us) < 0:
            problems.append("latencies must be non-negative")
        if not 0 < self.touch_fraction <= 1:
            problems.append("touch_fraction must be in (0, 1]")
        if self.app != "all" and self.app not in APPS:
            problems.append(f"app must be 'all' or one of {sorted(APPS)}")
        if self.mode != "all" and self.mode not in STARTUP_MODES:
            problems.append(f"mode must be 'all' or one of {STARTUP_MODES}")
        if problems:
            raise InvalidConfig("; ".join(problems))
        return self

    @classmethod
    def from_mapping(cls, data: dict) -> "BenchConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, raw in data.items():
            default = known[key].default
            try:
                values[key] = _coerce(raw, default)
            except (TypeError, ValueError) as exc:
                raise InvalidConfig(f"{key}: cannot use {raw!r} ({exc})") from None
        return cls(**values)

    @classmethod
    def from_text(cls, text: str) -> "BenchConfig":
        """Flat ``key = value`` lines (``#`` comments allowed) or a JSON object."""
        stripped = text.strip()
        if stripped.startswith("{"):
            try:
                data = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"bad JSON config: {exc}") from None
            if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
                raise InvalidConfig("JSON config must be one flat object")
            return cls.from_mapping(data)
        data = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InvalidConfig(f"line {n}: expected key=value")
            data[key.strip()] = value.strip()
        return cls.from_mapping(data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BenchConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from None


def _coerce(raw, default):
    if isinstance(default, bool):
        if isinstance(raw, str):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError("not a boolean")
        return bool(raw)
    if isinstance(default, tuple):
        items = raw.split(",") if isinstance(raw, str) else list(raw)
        return tuple(int(str(v).strip()) for v in items if str(v).strip())
    if isinstance(default, int):
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError("not an integer")
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


@dataclass
class BenchReport:
    scenario: str
    rows: list[dict] = field(default_factory=list)
    environment: dict = field(default_factory=dict)

    def columns(self) -> list[str]:
        names = {k for row in self.rows for k in row}
        head = [k for k in KEY_COLUMNS if k in names]
        return head + sorted(names - set(head))

    def counters(self) -> list[dict]:
        """Rows without wall-clock columns: what must repeat under a fixed seed."""
        return [{k: v for k, v in row.items() if not k.endswith(TIMING_SUFFIXES) and k not in SCHEDULE_DEPENDENT}
                for row in self.rows]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        cols = self.columns()
        writer.writerow(cols if cols else ["scenario"])
        for row in self.rows:
            writer.writerow([_fmt(row.get(c, "")) for c in cols])
        return out.getvalue()

    def to_markdown(self) -> str:
        cols = self.columns()
        lines = [f"# quarklet bench: {self.scenario}", ""]
        for key in sorted(self.environment):
            lines.append(f"- {key}: {self.environment[key]}")
        lines.append("")
        if cols:
            lines.append("| " + " | ".join(cols) + " |")
            lines.append("|" + "---|" * len(cols))
            for row in self.rows:
                lines.append("| " + " | ".join(_fmt(row.get(c, "")) for c in cols) + " |")
        else:
            lines.append("(no rows)")
        refs = REFERENCES.get(self.scenario)
        if refs:
            lines += ["", "Published hardware figures (RDMA NICs and KVM), for context only; not targets:", ""]
            lines += [f"- {label}: {value}" for label, value in refs]
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike, fmt: str | None = None) -> None:
        path = Path(path)
        fmt = fmt or ("markdown" if path.suffix.lower() in (".md", ".markdown") else "csv")
        if fmt not in ("csv", "markdown"):
            raise InvalidConfig(f"unknown report format {fmt!r}")
        text = self.to_csv() if fmt == "csv" else self.to_markdown()
        path.write_text(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def percentiles(samples_us: list[float]) -> dict:
    if not samples_us:
        return {"p50_us": 0.0, "p95_us": 0.0, "p99_us": 0.0}
    p50, p95, p99 = np.percentile(np.asarray(samples_us), [50, 95, 99])
    return {"p50_us": float(p50), "p95_us": float(p95), "p99_us": float(p99)}


def environment_stamp(config: BenchConfig) -> dict:
    from . import __version__

    return {
        "quarklet": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": f"{platform.system()} {platform.machine()}",
        "cpus": os.cpu_count(),
        "backend": config.backend,
        "seed": config.seed,
    }


# -- network scenarios ---------------------------------------------------------------
def _cluster(config: BenchConfig) -> Cluster:
    latency = LatencyModel(config.lane_latency_us, config.lane_jitter_us)
    return Cluster(config.node_count, backend=config.backend, seed=config.seed, latency=latency,
                   ring_capacity=config.ring_capacity, sq_capacity=config.sq_capacity,
                   cq_capacity=config.cq_capacity)


def _pods(cluster: Cluster):
    nodes = list(cluster.services)
    client = cluster.add_pod(nodes[0], "10.0.0.1")
    server = cluster.add_pod(nodes[-1], "10.0.1.1")
    return client, server, PodAddr("10.0.1.1", 7000)


def _channel_counters(*pairs) -> dict:
    """Sum engine counters over (client, handle) pairs."""
    out = {"write_reqs": 0, "read_readies": 0, "data_writes": 0, "space_updates": 0}
    for client, handle in pairs:
        ch = client.channels.get(handle)
        if ch is None:
            continue
        for k in out:
            out[k] += getattr(ch, k)
    return out


def run_echo(config: BenchConfig) -> list[dict]:
    cluster = _cluster(config)
    client, server, addr = _pods(cluster)
    threaded = config.backend != "inproc"
    rng = random.Random(config.seed)
    n = config.message_size
    payloads = [rng.randbytes(n) for _ in range(min(config.requests, 64))]
    try:
        server.sys_listen(addr.port)
        if threaded:
            cluster.start()
        h = client.sys_connect(addr)
        s = server.sys_accept(addr.port)
        base_msgs = cluster.cross_node_messages
        lat = []
        errors = []

        def serve():
            try:
                for _ in range(config.requests):
                    server.sys_write_all(s, server.sys_read_exact(s, n))
            except QuarkletError as exc:  # surfaced after join
                errors.append(exc)

        if threaded:
            worker = threading.Thread(target=serve, name="echo-server")
            worker.start()
        for i in range(config.requests):
            msg = payloads[i % len(payloads)]
            t0 = time.perf_counter()
            client.sys_write_all(h, msg)
            if not threaded:
                # server side: nonblocking polls until the whole request is in
                got = bytearray()
                while len(got) < n:
                    try:
                        got += server.sys_read(s, n - len(got), blocking=False)
                    except WouldBlock:
                        cluster.step()
                server.sys_write_all(s, got)
            reply = client.sys_read_exact(h, n)
            lat.append((time.perf_counter() - t0) * 1e6)
            if reply != msg:
                raise ScenarioFailure(f"echo reply {i} differs from request")
        if threaded:
            worker.join(60)
            if errors:
                raise ScenarioFailure(f"echo server failed: {errors[0]!r}")
        row = {"message_size": n, "requests": config.requests,
               "cross_node_messages": cluster.cross_node_messages - base_msgs,
               "throughput_rps": config.requests / (sum(lat) * 1e-6) if lat else 0.0}
        row.update(percentiles(lat))
        row.update(_channel_counters((client, h), (server, s)))
        client.sys_close(h)
        server.sys_close(s)
        return [row]
    finally:
        cluster.stop()


def _transfer(cluster: Cluster, src, h, dst, s, data: bytes, chunk: int, threaded: bool) -> bytes:
    got = bytearray()
    if threaded:
        t = threading.Thread(target=lambda: [src.sys_write_all(h, data[i:i + chunk])
                                             for i in range(0, len(data), chunk)])
        t.start()
        while len(got) < len(data):
            part = dst.sys_read(s, 1 << 20)
            if not part:
                break
            got += part
        t.join()
        return bytes(got)
    sent = 0
    while len(got) < len(data):
        while sent < len(data):
            k = src.sys_write(h, data[sent:sent + min(chunk, len(data) - sent)])
            if k == 0:
                break
            sent += k
        cluster.step()
        while True:
            try:
                part = dst.sys_read(s, 1 << 20, blocking=False)
            except WouldBlock:
                break
            if not part:
                break
            got += part
    return bytes(got)


def run_stream(config: BenchConfig) -> list[dict]:
    cluster = _cluster(config)
    client, server, addr = _pods(cluster)
    threaded = config.backend != "inproc"
    data = random.Random(config.seed).randbytes(config.total_bytes)
    want = hashlib.sha256(data).hexdigest()
    rows = []
    try:
        server.sys_listen(addr.port)
        if threaded:
            cluster.start()
        for size in config.message_sizes:
            h = client.sys_connect(addr)
            s = server.sys_accept(addr.port)
            base = cluster.cross_node_messages
            t0 = time.perf_counter()
            got = _transfer(cluster, client, h, server, s, data, size, threaded)
            elapsed = time.perf_counter() - t0
            if hashlib.sha256(got).hexdigest() != want:
                raise ScenarioFailure(f"stream with {size}-byte writes lost integrity ({len(got)} bytes received)")
            row = {"message_size": size, "bytes": len(data), "integrity_ok": True,
                   "cross_node_messages": cluster.cross_node_messages - base,
                   "elapsed_s": elapsed, "throughput_mbps": len(data) * 8 / elapsed / 1e6}
            row.update(_channel_counters((client, h), (server, s)))
            rows.append(row)
            client.sys_close(h)
            server.sys_close(s)
        return rows
    finally:
        cluster.stop()


def run_connect(config: BenchConfig) -> list[dict]:
    cluster = _cluster(config)
    client, server, addr = _pods(cluster)
    try:
        server.sys_listen(addr.port)
        if config.backend != "inproc":
            cluster.start()
        msgs, created = cluster.cross_node_messages, cluster.connection_creations
        lat, handles = [], []
        for _ in range(config.connects):
            t0 = time.perf_counter()
            handles.append(client.sys_connect(addr))
            lat.append((time.perf_counter() - t0) * 1e6)
        handshake = cluster.cross_node_messages - msgs
        row = {"connects": config.connects, "handshake_messages": handshake,
               "handshake_messages_per_conn": handshake / config.connects,
               "connection_creations_on_connect_path": cluster.connection_creations - created,
               "node_connections": len(cluster.fabric.connections),
               "established_channels": len(set(handles))}
        row.update(percentiles(lat))
        for _ in handles:
            server.sys_close(server.sys_accept(addr.port))
        for h in handles:
            client.sys_close(h)
        return [row]
    finally:
        cluster.stop()


# -- qcall -----------------------------------------------------------------------------
def qcall_workload(config: BenchConfig) -> list[list[QcallJob]]:
    rng = random.Random(config.seed)
    return [[QcallJob.host_op("echo", rng.randbytes(32), latency_us=config.host_latency_us)
             for _ in range(config.jobs_per_thread)] for _ in range(config.threads)]


def run_qcall_once(config: BenchConfig, mode: str, scratch: str | os.PathLike) -> dict:
    host = HostContext(FilePolicy(scratch))
    try:
        engine = QcallEngine(host, mode=mode, vcpus=config.vcpus, handlers=config.handlers,
                             trap_cost_us=config.trap_cost_us)

        def body(jobs):
            def gen():
                for job in jobs:
                    res = yield job
                    if res.payload != job.payload:
                        raise ScenarioFailure(f"job {job.job_id} returned the wrong payload")
                return len(jobs)
            return gen

        t0 = time.perf_counter()
        engine.run([body(j) for j in qcall_workload(config)])
        wall = time.perf_counter() - t0
    finally:
        host.close()
    calls = config.threads * config.jobs_per_thread
    return {"mode": mode, "calls": calls, "threads": config.threads, "wall_s": wall,
            "per_call_us": wall * 1e6 / calls, "context_switches": engine.context_switches,
            "hypercalls": engine.hypercalls, "idle_transitions": engine.idle_transitions,
            "completed": engine.completed}


def run_qcall(config: BenchConfig) -> list[dict]:
    rows = []
    with tempfile.TemporaryDirectory(prefix="quarklet-qcall-") as scratch:
        for run in range(config.runs):
            for mode in ("sync", "qcall"):
                row = run_qcall_once(config, mode, scratch)
                row["run"] = run
                rows.append(row)
    return rows


# -- startup -----------------------------------------------------------------------------
def startup_app(name: str, config: BenchConfig, workdir: str | os.PathLike) -> list[dict]:
    """Serve one request per startup mode and record latency and footprint."""
    app = make_app(name, config.app_pages, config.touch_fraction, config.seed)
    workdir = Path(workdir)
    rows = {}

    t0 = time.perf_counter()
    with Sandbox(workdir / f"{name}-cold.swap") as sb:
        sb.boot()
        app.init(sb)
        sb.begin_request()
        answer = app.request(sb)
        sb.end_request()
    rows["cold"] = {"latency_us": (time.perf_counter() - t0) * 1e6, "idle_resident_bytes": 0,
                    "active_resident_bytes": app.pages * 4096, "swapin_count": 0, "answer_ok": True}

    sb = Sandbox(workdir / f"{name}.swap")
    try:
        sb.boot()
        app.init(sb)
        sb.begin_request()
        app.request(sb)  # first request after init warms the app
        sb.end_request()
        t0 = time.perf_counter()
        sb.begin_request()
        warm_answer = app.request(sb)
        sb.end_request()
        rows["warm"] = {"latency_us": (time.perf_counter() - t0) * 1e6, "idle_resident_bytes": sb.resident_bytes(),
                        "active_resident_bytes": sb.resident_bytes(), "swapin_count": 0,
                        "answer_ok": warm_answer == answer}

        sb.hibernate()
        idle = sb.resident_bytes()
        t0 = time.perf_counter()
        sb.wakeup()
        sb.begin_request()
        hib_answer = app.request(sb)
        hib_latency = (time.perf_counter() - t0) * 1e6
        active = sb.resident_bytes()
        rows["hibernate"] = {"latency_us": hib_latency, "idle_resident_bytes": idle,
                             "active_resident_bytes": active, "swapin_count": sb.swapin_count,
                             "answer_ok": hib_answer == answer}

        # a second request while still woken: the touched set is resident now
        t0 = time.perf_counter()
        wake_answer = app.request(sb)
        rows["wakeup"] = {"latency_us": (time.perf_counter() - t0) * 1e6, "idle_resident_bytes": sb.resident_bytes(),
                          "active_resident_bytes": sb.resident_bytes(), "swapin_count": sb.swapin_count,
                          "answer_ok": wake_answer == answer}
        sb.end_request()
    finally:
        sb.close()
    out = []
    for mode in STARTUP_MODES:
        if config.mode in ("all", mode):
            out.append({"app": name, "mode": mode, "pages": app.pages, **rows[mode]})
    return out


def run_startup(config: BenchConfig) -> list[dict]:
    names = sorted(APPS) if config.app == "all" else [config.app]
    rows = []
    with tempfile.TemporaryDirectory(prefix="quarklet-startup-") as workdir:
        for name in names:
            rows += startup_app(name, config, workdir)
    return rows


RUNNERS = {"echo": run_echo, "stream": run_stream, "connect": run_connect, "qcall": run_qcall,
           "startup": run_startup}


def run(scenario: str, config: BenchConfig | None = None) -> BenchReport:
    config = dataclasses.replace(config or BenchConfig(), scenario=scenario).validate()
    try:
        rows = RUNNERS[scenario](config)
    except (ScenarioFailure, InvalidConfig):
        raise
    except (QuarkletError, OSError, TimeoutError) as exc:
        raise ScenarioFailure(f"{scenario} failed: {exc!r}") from exc
    return BenchReport(scenario, rows, environment_stamp(config))


def report(bench: BenchReport, fmt: str, path: str | os.PathLike) -> None:
    bench.write(path, fmt)
