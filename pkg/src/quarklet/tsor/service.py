"""Per-node TSoR service engine.

One loop per node serves every local client: it finds clients with pending
submissions through the notification bitmap, moves write-ring bytes to peers
as long as credit allows, deposits arriving bytes into read rings, and tells
peers about freed read space once more than half a ring has been consumed.
"""
from __future__ import annotations

import itertools
import threading
import time
from collections import Counter, deque

from ..errors import ConnectionClosed, FlowControlViolation, PolicyDenied, UnknownPod
from ..transport import (
    ChannelClose, ConnectReq, ConnectResp, DataWrite, Fabric, NodeId, PodAddr, SpaceUpdate, TransportMsg,
)
from .bitmap import NotificationBitmap
from .channel import Channel, ChannelState
from .region import ClientKind, ErrorCode, Msg, ServiceKind
from .ring import RingBuffer

DEFAULT_RING = 65536
DEFAULT_QUEUE = 256


class TsorService:
    def __init__(self, node: NodeId, fabric: Fabric, ring_capacity: int = DEFAULT_RING,
                 sq_capacity: int = DEFAULT_QUEUE, cq_capacity: int = DEFAULT_QUEUE,
                 max_clients: int = 4096, max_channels: int = 1024, idle_spin_budget: int = 64,
                 connect_timeout: float = 5.0, max_transfer: int | None = None):
        self.node = node
        self.fabric = fabric
        self.registry = fabric.registry
        self.ring_capacity = ring_capacity
        self.sq_capacity = sq_capacity
        self.cq_capacity = cq_capacity
        self.max_channels = max_channels
        self.idle_spin_budget = idle_spin_budget
        self.connect_timeout = connect_timeout
        self.max_transfer = max_transfer or ring_capacity
        self.bitmap = NotificationBitmap(max_clients)
        self.clients: list = []
        self.channels: dict[int, Channel] = {}
        self.listeners: dict[tuple[str, int], object] = {}
        self.inbox: deque[tuple[NodeId, TransportMsg]] = deque()
        self.active: dict[int, Channel] = {}
        self.stalled: dict[int, Channel] = {}
        self.connecting: dict[int, Channel] = {}
        self.backlogged: set = set()
        self.event = threading.Event()
        self.stats = Counter()
        self.idle_polls = 0
        self.sleeps = 0
        self.sleeping = False
        self.paused = False
        self._ids = itertools.count(1)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        fabric.join_node(node, self._on_transport, self._on_peer_lost)

    # -- client management ------------------------------------------------------
    def register_client(self, addr: PodAddr | str):
        from .client import TsorClient

        if isinstance(addr, str):
            addr = PodAddr(addr, 0)
        self.registry.add_pod(addr, self.node)
        client = TsorClient(self, len(self.clients), addr)
        self.clients.append(client)
        return client

    def notify(self, client_index: int) -> None:
        """Doorbell rung by a client after it enqueues into its SQ."""
        self.bitmap.set(client_index)
        self.event.set()

    # -- transport side -----------------------------------------------------------
    def _on_transport(self, src: NodeId, msg: TransportMsg) -> None:
        self.inbox.append((src, msg))
        self.event.set()

    def _on_peer_lost(self, node: NodeId) -> None:
        self.inbox.append((node, None))
        self.event.set()

    def _send(self, dst: NodeId, msg: TransportMsg) -> bool:
        if dst == self.node:
            self.inbox.append((self.node, msg))
            return True
        try:
            self.fabric.send(self.node, dst, msg)
        except ConnectionClosed:
            # the peer-lost notification is on its way and will clean up
            self.stats["send_failures"] += 1
            return False
        return True

    def _complete(self, client, msg: Msg) -> None:
        if not client.deliver(msg):
            self.backlogged.add(client)

    # -- engine -------------------------------------------------------------------
    def service_step(self) -> bool:
        """One engine iteration.  Returns whether any work was done."""
        if self.paused:
            return False
        work = False
        for idx in self.bitmap.collect():
            client = self.clients[idx]
            while (msg := client.region.sq.pop()) is not None:
                self._handle_client(client, msg)
                work = True
        while self.inbox:
            src, msg = self.inbox.popleft()
            self._handle_transport(src, msg)
            work = True
        for ch in list(self.active.values()):
            if self._pump_tx(ch):
                work = True
        if self.connecting:
            work |= self._expire_connects()
        for client in list(self.backlogged):
            work |= client.flush_backlog()
            if not client.cq_backlog:
                self.backlogged.discard(client)
        self.stats["steps"] += 1
        return work

    def _handle_client(self, client, msg: Msg) -> None:
        kind = msg.kind
        self.stats[ClientKind(kind).name] += 1
        if kind == ClientKind.WRITE_REQ:
            ch = self.channels.get(msg.a)
            if ch is not None and ch.state is ChannelState.ESTABLISHED:
                self.active[ch.channel_id] = ch
        elif kind == ClientKind.READ_CONSUMED:
            ch = self.channels.get(msg.a)
            if ch is not None:
                ch.consume_signalled = False
                self._announce_space(ch)
        elif kind == ClientKind.CONNECT_REQ:
            self._connect(client, msg.a, PodAddr.unpack(msg.b))
        elif kind == ClientKind.LISTEN_REQ:
            key = (client.addr.virtual_ip, msg.b)
            if key in self.listeners:
                self._complete(client, Msg(ServiceKind.ERROR, ErrorCode.PORT_IN_USE, msg.a))
            else:
                self.listeners[key] = client
                self._complete(client, Msg(ServiceKind.LISTEN_DONE, msg.b, msg.a))
        elif kind == ClientKind.CLOSE_REQ:
            if msg.b == 1:
                self.listeners.pop((client.addr.virtual_ip, msg.a), None)
            else:
                self._close(msg.a)

    def _new_channel(self, client, peer: NodeId) -> Channel | None:
        cid = next(self._ids)
        if client.region.claim_entry(cid) is None:
            return None
        ch = Channel(cid, client, peer, RingBuffer(self.ring_capacity), RingBuffer(self.ring_capacity))
        self.channels[cid] = ch
        client.attach(ch)
        return ch

    def _connect(self, client, token: int, dst: PodAddr) -> None:
        try:
            node = self.registry.lookup_and_authorize(client.addr, dst)
        except PolicyDenied:
            self._complete(client, Msg(ServiceKind.ERROR, ErrorCode.POLICY_DENIED, token))
            return
        except UnknownPod:
            self._complete(client, Msg(ServiceKind.ERROR, ErrorCode.UNKNOWN_POD, token))
            return
        ch = self._new_channel(client, node)
        if ch is None:
            self._complete(client, Msg(ServiceKind.ERROR, ErrorCode.TOO_MANY_CHANNELS, token))
            return
        ch.token = token
        ch.deadline = time.monotonic() + self.connect_timeout
        self.connecting[ch.channel_id] = ch
        self._publish(ch)
        if not self._send(node, ConnectReq(ch.channel_id, dst, client.addr, ch.read.capacity)):
            del self.connecting[ch.channel_id]
            self._release(ch)
            self._complete(client, Msg(ServiceKind.ERROR, ErrorCode.PEER_LOST, token))

    def _expire_connects(self) -> bool:
        now = time.monotonic()
        expired = [ch for ch in self.connecting.values() if ch.deadline is not None and ch.deadline <= now]
        for ch in expired:
            del self.connecting[ch.channel_id]
            self._release(ch)
            self._complete(ch.client, Msg(ServiceKind.ERROR, ErrorCode.TIMEOUT, ch.token))
        return bool(expired)

    def _handle_transport(self, src: NodeId, msg: TransportMsg | None) -> None:
        if msg is None:
            self._peer_lost(src)
            return
        self.stats["rx_" + type(msg).__name__] += 1
        if isinstance(msg, DataWrite):
            self._deposit(msg)
        elif isinstance(msg, SpaceUpdate):
            ch = self.channels.get(msg.channel_id)
            if ch is not None:
                ch.credit += msg.free_bytes
                ch.credit_granted += msg.free_bytes
                if ch.channel_id in self.stalled:
                    self.active[ch.channel_id] = self.stalled.pop(ch.channel_id)
        elif isinstance(msg, ConnectReq):
            self._accept(src, msg)
        elif isinstance(msg, ConnectResp):
            self._connected(src, msg)
        elif isinstance(msg, ChannelClose):
            self._peer_closed(msg.channel_id)

    def _accept(self, src: NodeId, msg: ConnectReq) -> None:
        client = self.listeners.get((msg.dst.virtual_ip, msg.dst.port))
        ch = self._new_channel(client, src) if client is not None else None
        if ch is None:
            verdict = "no_listener" if client is None else "denied"
            self._send(src, ConnectResp(msg.channel_id, 0, 0, verdict))
            return
        ch.remote_id = msg.channel_id
        ch.credit = msg.read_capacity
        ch.state = ChannelState.ESTABLISHED
        self._publish(ch)
        self._complete(client, Msg(ServiceKind.ACCEPT_INCOMING, ch.channel_id, msg.dst.port))
        self._send(src, ConnectResp(msg.channel_id, ch.channel_id, ch.read.capacity, "ok"))

    def _connected(self, src: NodeId, msg: ConnectResp) -> None:
        ch = self.connecting.pop(msg.channel_id, None)
        if ch is None:
            if msg.verdict == "ok":  # we already gave up on it; tell the acceptor
                self._send(src, ChannelClose(msg.responder_channel_id))
            return
        if msg.verdict != "ok":
            self._release(ch)
            code = ErrorCode.NO_LISTENER if msg.verdict == "no_listener" else ErrorCode.TOO_MANY_CHANNELS
            self._complete(ch.client, Msg(ServiceKind.ERROR, code, ch.token))
            return
        ch.remote_id = msg.responder_channel_id
        ch.credit = msg.read_capacity
        ch.state = ChannelState.ESTABLISHED
        ch.deadline = None
        self._publish(ch)
        if ch.local_closed:
            self._close(ch.channel_id)
        self._complete(ch.client, Msg(ServiceKind.CONNECT_DONE, ch.channel_id, ch.token))

    # -- data path --------------------------------------------------------------
    def _pump_tx(self, ch: Channel) -> bool:
        """Send what the write ring holds, re-checking it after every send."""
        sent = False
        if ch.peer_closed:
            ch.discarded += ch.write.discard()
        while ch.credit > 0 and ch.write.used > 0:
            n = min(ch.write.used, ch.credit, self.max_transfer)
            data = ch.write.read(n)
            ch.credit -= n
            ch.data_writes += 1
            ch.bytes_sent += n
            self.stats["data_writes"] += 1
            self._send(ch.peer_node, DataWrite(ch.remote_id, data))
            sent = True
        if ch.write.used == 0:
            with ch.lock:
                drained = ch.write.used == 0
                if drained:
                    ch.tx_armed = False
            if drained:
                self.active.pop(ch.channel_id, None)
                if ch.local_closed and not ch.close_sent:
                    self._send_close(ch)
                    sent = True
        elif ch.credit == 0:
            self.active.pop(ch.channel_id, None)
            self.stalled[ch.channel_id] = ch
        return sent

    def _deposit(self, msg: DataWrite) -> None:
        ch = self.channels.get(msg.channel_id)
        n = len(msg.data)
        if ch is None or ch.local_closed:
            self.stats["discarded_bytes"] += n
            return
        if n > ch.read.free:
            raise FlowControlViolation(
                f"channel {ch.channel_id}: {n} bytes into {ch.read.free} free (credit invariant broken)")
        ch.read.write(msg.data)
        ch.bytes_received += n
        with ch.lock:
            arm = not ch.rx_armed
            ch.rx_armed = True
        if arm:
            ch.read_readies += 1
            self._complete(ch.client, Msg(ServiceKind.READ_READY, ch.channel_id))

    def _announce_space(self, ch: Channel) -> None:
        freed = ch.unannounced
        if freed * 2 > ch.read.capacity and not ch.local_closed and not ch.peer_closed:
            ch.announced_head += freed
            ch.space_updates += 1
            self.stats["space_updates"] += 1
            self._send(ch.peer_node, SpaceUpdate(ch.remote_id, freed))

    # -- teardown ---------------------------------------------------------------
    def _close(self, cid: int) -> None:
        ch = self.channels.get(cid)
        if ch is None:
            return
        ch.local_closed = True
        if ch.state is ChannelState.CONNECTING:
            return  # finished when the response arrives or the connect times out
        if ch.peer_closed or ch.state is ChannelState.CLOSED:
            ch.discarded += ch.write.discard()
        self.stalled.pop(cid, None)
        self.active[cid] = ch
        self._pump_tx(ch)

    def _send_close(self, ch: Channel) -> None:
        ch.close_sent = True
        if ch.state is ChannelState.ESTABLISHED:
            self._send(ch.peer_node, ChannelClose(ch.remote_id))
        if ch.peer_closed or ch.state is ChannelState.CLOSED:
            self._release(ch)

    def _peer_closed(self, cid: int) -> None:
        ch = self.channels.get(cid)
        if ch is None:
            return
        ch.peer_closed = True
        self._publish(ch)
        if ch.close_sent:
            self._release(ch)
        else:
            ch.discarded += ch.write.discard()
            self._complete(ch.client, Msg(ServiceKind.CLOSED, cid))

    def _peer_lost(self, node: NodeId) -> None:
        for ch in [c for c in self.channels.values() if c.peer_node == node]:
            if ch.channel_id in self.connecting:
                del self.connecting[ch.channel_id]
                self._release(ch)
                self._complete(ch.client, Msg(ServiceKind.ERROR, ErrorCode.PEER_LOST, ch.token))
                continue
            ch.state = ChannelState.CLOSED
            ch.peer_closed = True
            self.active.pop(ch.channel_id, None)
            self.stalled.pop(ch.channel_id, None)
            if ch.close_sent or ch.local_closed:
                self._release(ch)
            else:
                self._complete(ch.client, Msg(ServiceKind.CLOSED, ch.channel_id))

    def _release(self, ch: Channel) -> None:
        ch.state = ChannelState.CLOSED
        self.channels.pop(ch.channel_id, None)
        self.active.pop(ch.channel_id, None)
        self.stalled.pop(ch.channel_id, None)
        ch.client.region.release_entry(ch.channel_id)
        ch.client.detach(ch)
        self.stats["released"] += 1

    def _publish(self, ch: Channel) -> None:
        ch.client.region.publish(ch.channel_id, ch.remote_id, int(ch.state), ch.flags, ch.read.capacity,
                                 ch.write.capacity, ch.credit)

    # -- run loop -----------------------------------------------------------------
    def _has_pending(self) -> bool:
        return self.bitmap.any() or bool(self.inbox) or bool(self.active) or bool(self.backlogged)

    def service_run(self, stop: threading.Event | None = None) -> None:
        """Busy-poll while there is work; after ``idle_spin_budget`` empty
        steps, sleep until a client or the transport rings the doorbell."""
        stop = stop or self._stop
        idle = 0
        while not stop.is_set():
            if self.service_step():
                idle = 0
                continue
            self.idle_polls += 1
            idle += 1
            if idle < self.idle_spin_budget:
                continue
            self.event.clear()
            if self._has_pending() or stop.is_set():
                idle = 0
                continue
            self.sleeping = True
            self.sleeps += 1
            # wake periodically only while connects may need timing out
            self.event.wait(0.05 if self.connecting else None)
            self.sleeping = False
            idle = 0

    def start(self) -> None:
        self._stop.clear()
        self._thread = threading.Thread(target=self.service_run, name=f"tsor-{self.node}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self.event.set()
        if self._thread is not None:
            self._thread.join(5.0)
            self._thread = None


def service_step(service: TsorService) -> bool:
    return service.service_step()


def service_run(service: TsorService, stop: threading.Event | None = None) -> None:
    service.service_run(stop)
