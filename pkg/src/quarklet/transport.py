"""Emulated reliable-connection fabric between nodes.

Every pair of nodes gets exactly one long-lived :class:`NodeConnection` when
the second node joins; nothing on the application connect path may create
one.  A connection carries one control lane plus a data lane per channel.
Delivery is reliable and FIFO per lane; lanes are independent of each other.

Two backends share the contract:

* :class:`InProcFabric` keeps messages in a seeded, virtual-time event queue.
  Call :meth:`InProcFabric.pump` to deliver, or :meth:`InProcFabric.start` to
  hand delivery to one dispatcher thread per connection.
* :class:`LoopbackFabric` pushes frames through a TCP loopback socket per
  node pair with a dispatcher thread per direction.

Loopback frame (little-endian): ``len:u32 lane_kind:u8 channel_id:u64 payload``
where ``len`` counts the bytes after itself.
"""
from __future__ import annotations

import enum
import heapq
import itertools
import random
import socket
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Union

from .errors import ConnectionClosed, DuplicateNode, PolicyDenied, UnknownPod

NodeId = str


@dataclass(frozen=True, order=True)
class PodAddr:
    virtual_ip: str
    port: int = 0

    def pack(self) -> int:
        a, b, c, d = (int(x) for x in self.virtual_ip.split("."))
        return (((a << 24) | (b << 16) | (c << 8) | d) << 16) | self.port

    @classmethod
    def unpack(cls, value: int) -> "PodAddr":
        ip = value >> 16
        return cls(".".join(str((ip >> s) & 0xFF) for s in (24, 16, 8, 0)), value & 0xFFFF)

    def with_port(self, port: int) -> "PodAddr":
        return PodAddr(self.virtual_ip, port)

    def __str__(self):
        return f"{self.virtual_ip}:{self.port}"


# -- messages ------------------------------------------------------------------
class LaneKind(enum.IntEnum):
    CONTROL = 0
    DATA = 1


@dataclass(frozen=True)
class DataWrite:
    channel_id: int
    data: bytes


@dataclass(frozen=True)
class ConnectReq:
    channel_id: int
    dst: PodAddr
    src: PodAddr
    read_capacity: int


@dataclass(frozen=True)
class ConnectResp:
    channel_id: int
    responder_channel_id: int
    read_capacity: int
    verdict: str


@dataclass(frozen=True)
class SpaceUpdate:
    channel_id: int
    free_bytes: int


@dataclass(frozen=True)
class ChannelClose:
    channel_id: int


TransportMsg = Union[DataWrite, ConnectReq, ConnectResp, SpaceUpdate, ChannelClose]

VERDICTS = ("ok", "no_listener", "denied", "closed")

_MSG_CODES = {DataWrite: 1, ConnectReq: 2, ConnectResp: 3, SpaceUpdate: 4, ChannelClose: 5}
FRAME_HEAD = struct.Struct("<IBQ")


def lane_of(msg: TransportMsg) -> tuple[LaneKind, int]:
    """Data and close share the channel's data lane so a close can never
    overtake the bytes written before it."""
    if isinstance(msg, (DataWrite, ChannelClose)):
        return LaneKind.DATA, msg.channel_id
    return LaneKind.CONTROL, 0


def encode_payload(msg: TransportMsg) -> bytes:
    code = _MSG_CODES[type(msg)]
    if isinstance(msg, DataWrite):
        return bytes([code]) + msg.data
    if isinstance(msg, ConnectReq):
        return struct.pack("<BQQQ", code, msg.dst.pack(), msg.src.pack(), msg.read_capacity)
    if isinstance(msg, ConnectResp):
        return struct.pack("<BQQB", code, msg.responder_channel_id, msg.read_capacity,
                           VERDICTS.index(msg.verdict))
    if isinstance(msg, SpaceUpdate):
        return struct.pack("<BQ", code, msg.free_bytes)
    return bytes([code])


def encode_frame(msg: TransportMsg) -> bytes:
    kind, _ = lane_of(msg)
    payload = encode_payload(msg)
    return FRAME_HEAD.pack(FRAME_HEAD.size - 4 + len(payload), kind, msg.channel_id) + payload


def decode_frame(body: bytes) -> TransportMsg:
    """Decode one frame without its leading length field."""
    _, channel_id = struct.unpack_from("<BQ", body)
    payload = memoryview(body)[9:]
    code = payload[0]
    if code == 1:
        return DataWrite(channel_id, bytes(payload[1:]))
    if code == 2:
        _, dst, src, cap = struct.unpack("<BQQQ", payload)
        return ConnectReq(channel_id, PodAddr.unpack(dst), PodAddr.unpack(src), cap)
    if code == 3:
        _, rid, cap, verdict = struct.unpack("<BQQB", payload)
        return ConnectResp(channel_id, rid, cap, VERDICTS[verdict])
    if code == 4:
        return SpaceUpdate(channel_id, struct.unpack("<BQ", payload)[1])
    if code == 5:
        return ChannelClose(channel_id)
    raise ValueError(f"unknown message code {code}")


def message_size(msg: TransportMsg) -> int:
    return len(msg.data) if isinstance(msg, DataWrite) else 0


# -- registry ------------------------------------------------------------------
@dataclass
class PolicyRule:
    src: PodAddr | str | None
    dst: PodAddr | str | None
    allow: bool

    def matches(self, src: PodAddr, dst: PodAddr) -> bool:
        return _match(self.src, src) and _match(self.dst, dst)


def _match(pattern, addr: PodAddr) -> bool:
    if pattern is None:
        return True
    if isinstance(pattern, str):  # bare IP: any port on that pod
        return pattern == addr.virtual_ip
    return pattern == addr


class Registry:
    """Control-plane view: nodes, pod placement and connection policy."""

    def __init__(self, default_allow: bool = True):
        self.nodes: list[NodeId] = []
        self.pods: dict[str, NodeId] = {}
        self.rules: list[PolicyRule] = []
        self.default_allow = default_allow

    def add_pod(self, addr: PodAddr | str, node: NodeId) -> None:
        ip = addr.virtual_ip if isinstance(addr, PodAddr) else addr
        if node not in self.nodes:
            raise UnknownPod(f"node {node} has not joined")
        self.pods[ip] = node

    def allow(self, src=None, dst=None) -> None:
        self.rules.append(PolicyRule(src, dst, True))

    def deny(self, src=None, dst=None) -> None:
        self.rules.append(PolicyRule(src, dst, False))

    def node_of(self, addr: PodAddr) -> NodeId:
        try:
            return self.pods[addr.virtual_ip]
        except KeyError:
            raise UnknownPod(f"no pod at {addr.virtual_ip}") from None

    def lookup_and_authorize(self, src: PodAddr, dst: PodAddr) -> NodeId:
        node = self.node_of(dst)
        for rule in self.rules:
            if rule.matches(src, dst):
                if not rule.allow:
                    raise PolicyDenied(f"{src} -> {dst} denied by policy")
                return node
        if not self.default_allow:
            raise PolicyDenied(f"{src} -> {dst} denied by default policy")
        return node


def lookup_and_authorize(registry: Registry, src: PodAddr, dst: PodAddr) -> NodeId:
    return registry.lookup_and_authorize(src, dst)


# -- connections ---------------------------------------------------------------
class ConnState(enum.Enum):
    PRE_ESTABLISHED = "PreEstablished"
    CLOSED = "Closed"


@dataclass
class LatencyModel:
    fixed_us: float = 0.0
    jitter_us: float = 0.0

    def sample(self, rng: random.Random) -> float:
        return self.fixed_us + (rng.uniform(0.0, self.jitter_us) if self.jitter_us else 0.0)


@dataclass
class NodeConnection:
    a: NodeId
    b: NodeId
    state: ConnState = ConnState.PRE_ESTABLISHED
    messages: int = 0
    bytes: int = 0
    lanes_used: set = field(default_factory=set)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def key(self) -> frozenset:
        return frozenset((self.a, self.b))

    def peer_of(self, node: NodeId) -> NodeId:
        return self.b if node == self.a else self.a


DeliverHook = Callable[[NodeId, TransportMsg], None]
PeerLostHook = Callable[[NodeId], None]


class Fabric:
    """Backend-independent bookkeeping: membership, connections, counters."""

    backend = "abstract"

    def __init__(self, registry: Registry | None = None, latency: LatencyModel | None = None, seed: int = 0):
        self.registry = registry if registry is not None else Registry()
        self.latency = latency or LatencyModel()
        self.rng = random.Random(seed)
        self.connections: dict[frozenset, NodeConnection] = {}
        self.hooks: dict[NodeId, tuple[DeliverHook, PeerLostHook | None]] = {}
        self.creations = Counter()
        self.sent = Counter()
        self.delivered = Counter()
        self._lock = threading.Lock()

    def join_node(self, node: NodeId, deliver: DeliverHook, peer_lost: PeerLostHook | None = None
                  ) -> list[NodeConnection]:
        """Register ``node`` and pre-establish a connection to every member."""
        with self._lock:
            if node in self.hooks:
                raise DuplicateNode(f"node {node} already joined")
            created = []
            for peer in self.registry.nodes:
                conn = NodeConnection(peer, node)
                self.connections[conn.key] = conn
                self._open(conn)
                self.creations["join"] += 1
                created.append(conn)
            self.registry.nodes.append(node)
            self.hooks[node] = (deliver, peer_lost)
            return created

    def leave_node(self, node: NodeId) -> None:
        with self._lock:
            self.registry.nodes.remove(node)
            self.hooks.pop(node)
            dead = [c for c in self.connections.values() if node in (c.a, c.b)]
            for conn in dead:
                conn.state = ConnState.CLOSED
                del self.connections[conn.key]
                self._close(conn)
        for conn in dead:
            survivor = conn.peer_of(node)
            lost = self.hooks.get(survivor, (None, None))[1]
            if lost is not None:
                lost(node)

    def connection(self, a: NodeId, b: NodeId) -> NodeConnection:
        conn = self.connections.get(frozenset((a, b)))
        if conn is None or conn.state is not ConnState.PRE_ESTABLISHED:
            raise ConnectionClosed(f"no connection between {a} and {b}")
        return conn

    def send(self, src: NodeId, dst: NodeId, msg: TransportMsg) -> None:
        conn = self.connection(src, dst)
        lane = lane_of(msg)
        with conn.lock:
            conn.messages += 1
            conn.bytes += message_size(msg)
            conn.lanes_used.add(lane)
            self.sent[type(msg).__name__] += 1
            self._transmit(conn, src, dst, lane, msg)

    def _deliver(self, src: NodeId, dst: NodeId, msg: TransportMsg) -> None:
        hook = self.hooks.get(dst)
        if hook is None:
            return
        self.delivered[type(msg).__name__] += 1
        hook[0](src, msg)

    # backend hooks
    def _open(self, conn: NodeConnection) -> None:
        pass

    def _close(self, conn: NodeConnection) -> None:
        pass

    def _transmit(self, conn, src, dst, lane, msg) -> None:
        raise NotImplementedError

    def start(self) -> None:
        pass

    def stop(self) -> None:
        pass

    def pump(self, max_messages: int | None = None) -> int:
        return 0

    @property
    def pending(self) -> int:
        return 0

    @property
    def cross_node_messages(self) -> int:
        return sum(self.sent.values())


class InProcFabric(Fabric):
    backend = "inproc"

    def __init__(self, registry: Registry | None = None, latency: LatencyModel | None = None, seed: int = 0):
        super().__init__(registry, latency, seed)
        self.clock_us = 0.0
        self._seq = itertools.count()
        self._events: list[tuple[float, int, NodeId, NodeId, tuple, TransportMsg]] = []
        self._lane_tail: dict[tuple, float] = {}
        self._threads: dict[frozenset, threading.Thread] = {}
        self._per_conn: dict[frozenset, list] = {}
        self._cond = threading.Condition()
        self._running = False

    def _now(self) -> float:
        return time.perf_counter() * 1e6 if self._running else self.clock_us

    def _transmit(self, conn, src, dst, lane, msg) -> None:
        with self._cond:
            key = (conn.key, src, lane)
            at = max(self._now() + self.latency.sample(self.rng), self._lane_tail.get(key, 0.0))
            self._lane_tail[key] = at
            event = (at, next(self._seq), src, dst, lane, msg)
            if self._running:
                heapq.heappush(self._per_conn[conn.key], event)
            else:
                heapq.heappush(self._events, event)
            self._cond.notify_all()

    def pump(self, max_messages: int | None = None) -> int:
        """Deliver queued messages in virtual-time order."""
        n = 0
        while self._events and (max_messages is None or n < max_messages):
            at, _, src, dst, _, msg = heapq.heappop(self._events)
            self.clock_us = max(self.clock_us, at)
            self._deliver(src, dst, msg)
            n += 1
        return n

    @property
    def pending(self) -> int:
        return len(self._events) + sum(len(q) for q in self._per_conn.values())

    def start(self) -> None:
        """Switch to wall-clock delivery on one dispatcher thread per connection."""
        with self._cond:
            if self._running:
                return
            self._running = True
            backlog, self._events = self._events, []
            for conn in self.connections.values():
                self._per_conn.setdefault(conn.key, [])
            for event in backlog:
                heapq.heappush(self._per_conn[frozenset((event[2], event[3]))], event)
            for conn in list(self.connections.values()):
                self._spawn(conn)

    def _open(self, conn: NodeConnection) -> None:
        if self._running:
            with self._cond:
                self._per_conn[conn.key] = []
            self._spawn(conn)

    def _spawn(self, conn: NodeConnection) -> None:
        t = threading.Thread(target=self._dispatch, args=(conn,), daemon=True,
                             name=f"dispatch-{conn.a}-{conn.b}")
        self._threads[conn.key] = t
        t.start()

    def _dispatch(self, conn: NodeConnection) -> None:
        queue = self._per_conn[conn.key]
        while True:
            with self._cond:
                while self._running and conn.state is ConnState.PRE_ESTABLISHED:
                    if queue:
                        wait = (queue[0][0] - self._now()) * 1e-6
                        if wait <= 0:
                            break
                        self._cond.wait(wait)
                    else:
                        self._cond.wait(0.1)
                if not self._running or conn.state is not ConnState.PRE_ESTABLISHED:
                    return
                _, _, src, dst, _, msg = heapq.heappop(queue)
            self._deliver(src, dst, msg)

    def _close(self, conn: NodeConnection) -> None:
        with self._cond:
            self._events = [e for e in self._events if frozenset((e[2], e[3])) != conn.key]
            heapq.heapify(self._events)
            self._cond.notify_all()

    def stop(self) -> None:
        with self._cond:
            self._running = False
            self._cond.notify_all()
        for t in self._threads.values():
            t.join(2.0)
        self._threads.clear()


class LoopbackFabric(Fabric):
    backend = "loopback"

    def __init__(self, registry: Registry | None = None, latency: LatencyModel | None = None, seed: int = 0):
        super().__init__(registry, latency, seed)
        self._socks: dict[tuple[NodeId, NodeId], socket.socket] = {}
        self._send_locks: dict[tuple[NodeId, NodeId], threading.Lock] = {}
        self._readers: list[threading.Thread] = []
        self._lat_lock = threading.Lock()

    def _open(self, conn: NodeConnection) -> None:
        server = socket.create_server(("127.0.0.1", 0))
        client = socket.create_connection(server.getsockname())
        accepted, _ = server.accept()
        server.close()
        for s in (client, accepted):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks[(conn.a, conn.b)] = client
        self._socks[(conn.b, conn.a)] = accepted
        for pair in ((conn.a, conn.b), (conn.b, conn.a)):
            self._send_locks[pair] = threading.Lock()
        for sock, src, dst in ((accepted, conn.a, conn.b), (client, conn.b, conn.a)):
            t = threading.Thread(target=self._reader, args=(sock, src, dst, conn), daemon=True,
                                 name=f"loopback-{src}->{dst}")
            self._readers.append(t)
            t.start()

    def _transmit(self, conn, src, dst, lane, msg) -> None:
        frame = encode_frame(msg)
        with self._send_locks[(src, dst)]:
            self._socks[(src, dst)].sendall(frame)

    def _reader(self, sock: socket.socket, src: NodeId, dst: NodeId, conn: NodeConnection) -> None:
        buf = bytearray()
        while True:
            try:
                chunk = sock.recv(1 << 20)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while len(buf) >= 4:
                (length,) = struct.unpack_from("<I", buf)
                if len(buf) < 4 + length:
                    break
                body = bytes(buf[4:4 + length])
                del buf[:4 + length]
                if self.latency.fixed_us or self.latency.jitter_us:
                    with self._lat_lock:
                        delay = self.latency.sample(self.rng)
                    time.sleep(delay * 1e-6)
                self._deliver(src, dst, decode_frame(body))

    def _close(self, conn: NodeConnection) -> None:
        for pair in ((conn.a, conn.b), (conn.b, conn.a)):
            sock = self._socks.pop(pair, None)
            if sock is not None:
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                sock.close()

    def stop(self) -> None:
        for conn in list(self.connections.values()):
            self._close(conn)
        for t in self._readers:
            t.join(2.0)


def make_fabric(backend: str = "inproc", registry: Registry | None = None,
                latency: LatencyModel | None = None, seed: int = 0) -> Fabric:
    if backend == "inproc":
        return InProcFabric(registry, latency, seed)
    if backend == "loopback":
        return LoopbackFabric(registry, latency, seed)
    raise ValueError(f"unknown backend {backend!r}")


def join_node(fabric: Fabric, node: NodeId, deliver: DeliverHook, peer_lost: PeerLostHook | None = None
              ) -> list[NodeConnection]:
    return fabric.join_node(node, deliver, peer_lost)
