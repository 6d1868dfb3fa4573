"""Socket-call surface of a pod.  Every call talks to the node's service
only through the shared region: requests go into the SQ, results come back
through the CQ, and payload bytes move through per-channel rings."""
from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from typing import TYPE_CHECKING, Callable

from ..errors import (
    ChannelClosed, ConnectTimeout, ListenerClosed, NoListener, PolicyDenied, PortInUse, QuarkletError, QueueFull,
    UnknownPod, WouldBlock,
)
from ..transport import PodAddr
from .channel import Channel, ChannelState
from .region import ClientKind, ErrorCode, Msg, ServiceKind, SharedRegion

if TYPE_CHECKING:
    from .service import TsorService

SQ_SPIN_LIMIT = 100_000

_ERRORS: dict[int, type[QuarkletError]] = {
    ErrorCode.POLICY_DENIED: PolicyDenied,
    ErrorCode.NO_LISTENER: NoListener,
    ErrorCode.PORT_IN_USE: PortInUse,
    ErrorCode.UNKNOWN_POD: UnknownPod,
    ErrorCode.TIMEOUT: ConnectTimeout,
    ErrorCode.TOO_MANY_CHANNELS: QueueFull,
    ErrorCode.PEER_LOST: ChannelClosed,
    ErrorCode.LISTENER_CLOSED: ListenerClosed,
}


class TsorClient:
    def __init__(self, service: "TsorService", index: int, addr: PodAddr):
        self.service = service
        self.index = index
        self.addr = addr
        self.region = SharedRegion(index, service.sq_capacity, service.cq_capacity, service.max_channels)
        self.channels: dict[int, Channel] = {}
        self.cq_backlog: deque[Msg] = deque()
        self.cq_event = threading.Event()
        # Set by a deterministic harness: advances the whole cluster one step.
        self.driver: Callable[[], bool] | None = None
        self.wait_timeout = 30.0
        self._tokens = itertools.count(1)
        self._results: dict[int, Msg] = {}
        self._listening: dict[int, deque[int]] = {}
        self._closed_ports: set[int] = set()
        self._sq_lock = threading.Lock()
        self._cq_lock = threading.Lock()
        self.sq_full_spins = 0

    def __repr__(self):
        return f"TsorClient({self.addr}, index={self.index})"

    # -- service side of the CQ ---------------------------------------------------
    def deliver(self, msg: Msg) -> bool:
        """Called by the service.  False means the CQ was full and the message
        now waits in the backlog."""
        if self.cq_backlog or not self.region.cq.push(msg):
            self.cq_backlog.append(msg)
            return False
        self.cq_event.set()
        return True

    def flush_backlog(self) -> bool:
        moved = False
        while self.cq_backlog and self.region.cq.push(self.cq_backlog[0]):
            self.cq_backlog.popleft()
            moved = True
        if moved:
            self.cq_event.set()
        return moved

    def attach(self, ch: Channel) -> None:
        self.channels[ch.channel_id] = ch

    def detach(self, ch: Channel) -> None:
        self.channels.pop(ch.channel_id, None)

    # -- plumbing -------------------------------------------------------------------
    def _submit(self, msg: Msg) -> None:
        spins = 0
        while True:
            with self._sq_lock:
                if self.region.sq.push(msg):
                    break
            # SQ full: make sure the service is awake, then yield
            self.service.notify(self.index)
            self.sq_full_spins += 1
            spins += 1
            if spins > SQ_SPIN_LIMIT:
                raise QueueFull(f"SQ of {self} stayed full")
            if self.driver is not None:
                self.driver()
            else:
                time.sleep(0)
        self.service.notify(self.index)

    def poll_cq(self) -> int:
        n = 0
        with self._cq_lock:
            while (msg := self.region.cq.pop()) is not None:
                self._dispatch(msg)
                n += 1
        return n

    def _dispatch(self, msg: Msg) -> None:
        kind = msg.kind
        if kind in (ServiceKind.CONNECT_DONE, ServiceKind.LISTEN_DONE, ServiceKind.ERROR):
            self._results[msg.b] = msg
        elif kind == ServiceKind.ACCEPT_INCOMING:
            backlog = self._listening.get(msg.b)
            if backlog is not None:
                backlog.append(msg.a)
            else:  # listener already closed locally
                self._submit(Msg(ClientKind.CLOSE_REQ, msg.a))
        # READ_READY and CLOSED only need to wake the reader; the channel
        # state itself is read directly.

    def _wait(self, ready: Callable[[], bool], timeout: float | None = None) -> None:
        deadline = time.monotonic() + (timeout if timeout is not None else self.wait_timeout)
        stuck = 0
        while True:
            self.poll_cq()
            if ready():
                return
            if self.driver is not None:
                stuck = 0 if self.driver() else stuck + 1
                if stuck > 3 and not self.service.connecting:
                    raise WouldBlock(f"{self}: nothing left to make progress")
            else:
                self.cq_event.clear()
                if len(self.region.cq):
                    continue
                if ready():
                    return
                self.cq_event.wait(min(0.05, max(0.0, deadline - time.monotonic())))
            if time.monotonic() > deadline:
                raise TimeoutError(f"{self}: wait timed out")

    def _await_token(self, token: int) -> Msg:
        self._wait(lambda: token in self._results)
        return self._results.pop(token)

    def _channel(self, handle: int) -> Channel:
        ch = self.channels.get(handle)
        if ch is None:
            raise ChannelClosed(f"channel {handle} is not open")
        return ch

    # -- socket calls -------------------------------------------------------------
    def sys_connect(self, dst: PodAddr) -> int:
        return self.connect_wait(self.connect_start(dst))

    def connect_start(self, dst: PodAddr) -> int:
        """Submit a connect without waiting; returns a token for :meth:`connect_wait`."""
        token = next(self._tokens)
        self._submit(Msg(ClientKind.CONNECT_REQ, token, dst.pack()))
        return token

    def connect_wait(self, token: int) -> int:
        msg = self._await_token(token)
        if msg.kind == ServiceKind.ERROR:
            raise _ERRORS[msg.a](f"connect from {self.addr}: {ErrorCode(msg.a).name}")
        return msg.a

    def sys_listen(self, port: int) -> None:
        token = next(self._tokens)
        self._submit(Msg(ClientKind.LISTEN_REQ, token, port))
        msg = self._await_token(token)
        if msg.kind == ServiceKind.ERROR:
            raise _ERRORS[msg.a](f"listen {self.addr.virtual_ip}:{port}: {ErrorCode(msg.a).name}")
        self._listening[port] = deque()
        self._closed_ports.discard(port)

    def sys_accept(self, port: int | None = None, blocking: bool = True) -> int:
        if port is None:
            if len(self._listening) != 1:
                raise ValueError("port is required when not exactly one listener is open")
            port = next(iter(self._listening))
        if port not in self._listening:
            if port in self._closed_ports:
                raise ListenerClosed(f"listener on port {port} was closed")
            raise ListenerClosed(f"no listener on port {port}")
        backlog = self._listening[port]
        if blocking:
            self._wait(lambda: bool(backlog) or port not in self._listening)
        else:
            self.poll_cq()
        if port not in self._listening:
            raise ListenerClosed(f"listener on port {port} was closed")
        if not backlog:
            raise WouldBlock("no pending connection")
        return backlog.popleft()

    def close_listener(self, port: int) -> None:
        if self._listening.pop(port, None) is None:
            return
        self._closed_ports.add(port)
        self._submit(Msg(ClientKind.CLOSE_REQ, port, 1))

    def sys_write(self, handle: int, data) -> int:
        """Non-blocking: copies what fits and returns the count (0 when full)."""
        ch = self._channel(handle)
        if ch.local_closed or ch.peer_closed or ch.state is not ChannelState.ESTABLISHED:
            raise ChannelClosed(f"channel {handle} is closed for writing")
        n = ch.write.write(data)
        if n == 0:
            return 0
        with ch.lock:
            signal = not ch.tx_armed
            ch.tx_armed = True
        if signal:
            ch.write_reqs += 1
            self._submit(Msg(ClientKind.WRITE_REQ, handle))
        return n

    def sys_write_all(self, handle: int, data) -> int:
        view = memoryview(data)
        sent = 0
        while sent < len(view):
            n = self.sys_write(handle, view[sent:])
            if n == 0:
                ch = self._channel(handle)
                self._wait(lambda: ch.write.free > 0 or ch.peer_closed)
                if ch.peer_closed:
                    raise ChannelClosed(f"channel {handle}: peer closed")
            sent += n
        return sent

    def sys_read(self, handle: int, max_bytes: int = 65536, blocking: bool = True) -> bytes:
        """Returns b"" at end of stream."""
        ch = self._channel(handle)
        if ch.read.used == 0:
            if ch.peer_closed or ch.state is ChannelState.CLOSED:
                return b""
            if not blocking:
                self.poll_cq()
                if ch.read.used == 0:
                    if ch.peer_closed:
                        return b""
                    raise WouldBlock(f"channel {handle} has no data")
            else:
                self._wait(lambda: ch.read.used > 0 or ch.peer_closed or ch.state is ChannelState.CLOSED)
                if ch.read.used == 0:
                    return b""
        data = ch.read.read(max_bytes)
        if ch.read.used == 0:
            with ch.lock:
                if ch.read.used == 0:
                    ch.rx_armed = False
        if not ch.consume_signalled and ch.unannounced * 2 > ch.read.capacity:
            ch.consume_signalled = True
            self._submit(Msg(ClientKind.READ_CONSUMED, handle, ch.unannounced))
        return data

    def sys_read_exact(self, handle: int, n: int) -> bytes:
        parts, got = [], 0
        while got < n:
            chunk = self.sys_read(handle, n - got)
            if not chunk:
                raise ChannelClosed(f"channel {handle}: end of stream after {got} of {n} bytes")
            parts.append(chunk)
            got += len(chunk)
        return b"".join(parts)

    def sys_close(self, handle: int) -> None:
        ch = self.channels.get(handle)
        if ch is None or ch.local_closed:
            return
        ch.local_closed = True
        self._submit(Msg(ClientKind.CLOSE_REQ, handle))


def sys_connect(client: TsorClient, dst: PodAddr) -> int:
    return client.sys_connect(dst)


def sys_listen(client: TsorClient, port: int) -> None:
    client.sys_listen(port)


def sys_accept(client: TsorClient, port: int | None = None) -> int:
    return client.sys_accept(port)


def sys_write(client: TsorClient, handle: int, data) -> int:
    return client.sys_write(handle, data)


def sys_read(client: TsorClient, handle: int, max_bytes: int = 65536) -> bytes:
    return client.sys_read(handle, max_bytes)


def sys_close(client: TsorClient, handle: int) -> None:
    client.sys_close(handle)
