from __future__ import annotations

import random
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from oracles import FlaggedSet, StreamDigest
from quarklet.errors import (
    ChannelClosed, ConnectTimeout, FlowControlViolation, ListenerClosed, NoListener, PolicyDenied, PortInUse,
    WouldBlock,
)
from quarklet.transport import DataWrite, PodAddr
from quarklet.tsor import (
    ChannelState, ClientKind, Cluster, NotificationBitmap, RingBuffer, SharedRegion, parse_region,
)

SERVER = PodAddr("10.0.1.1", 80)


def pair(seed=None, **opts):
    c = Cluster(2, seed=seed, **opts)
    a = c.add_pod("node0", "10.0.0.1")
    b = c.add_pod("node1", "10.0.1.1")
    return c, a, b


def connected(seed=None, **opts):
    c, a, b = pair(seed, **opts)
    b.sys_listen(80)
    h = a.sys_connect(SERVER)
    s = b.sys_accept(80)
    return c, a, b, h, s


def stream(c, src, h, dst, s, data: bytes, rng: random.Random, check=None) -> bytes:
    """Push ``data`` through with random write and read sizes."""
    sent, out = 0, StreamDigest()
    got = bytearray()
    while len(got) < len(data):
        if sent < len(data):
            sent += src.sys_write(h, data[sent:sent + rng.randint(1, 90_000)])
        c.step()
        if check:
            check()
        try:
            chunk = dst.sys_read(s, rng.randint(1, 90_000), blocking=False)
        except WouldBlock:
            continue
        out.update(chunk)
        got += chunk
    return bytes(got)


# -- ring -------------------------------------------------------------------------
def test_ring_requires_power_of_two():
    with pytest.raises(ValueError):
        RingBuffer(1000)


def test_ring_capacity_bound():
    r = RingBuffer(65536)
    assert r.write(bytes(100 * 1024)) == 65536
    assert r.write(b"x") == 0
    assert r.used == 65536 and r.free == 0


@given(st.lists(st.tuples(st.binary(max_size=300), st.integers(0, 300)), max_size=60))
def test_ring_is_fifo(ops):
    r, expect, out = RingBuffer(256), bytearray(), bytearray()
    for data, take in ops:
        n = r.write(data)
        expect += data[:n]
        out += r.read(take)
        assert 0 <= r.used <= r.capacity
    out += r.read(r.capacity)
    assert bytes(out) == bytes(expect)


# -- region and bitmap -----------------------------------------------------------------
def test_region_layout_roundtrip():
    region = SharedRegion(7, sq_capacity=8, cq_capacity=4, max_channels=4)
    assert bytes(region.buffer[:5]) == b"QTSR1"
    assert region.sq.push((ClientKind.WRITE_REQ, 3, 0))
    region.claim_entry(3)
    region.publish(3, 9, int(ChannelState.ESTABLISHED), 1, 64, 64, 64)
    image = parse_region(bytes(region.buffer))
    assert image["client_index"] == 7 and image["slot_size"] == 24
    assert image["sq"] == [(ClientKind.WRITE_REQ, 3, 0)]
    assert image["channels"] == [{"channel_id": 3, "remote_id": 9, "state": 2, "flags": 1,
                                  "read_capacity": 64, "write_capacity": 64, "credit": 64}]


def test_region_queue_bounded():
    region = SharedRegion(0, sq_capacity=2)
    assert region.sq.push((1, 0, 0)) and region.sq.push((1, 1, 0))
    assert not region.sq.push((1, 2, 0))
    assert region.sq.pop().a == 0


def test_region_rejects_bad_magic():
    with pytest.raises(ValueError):
        parse_region(bytes(256))


@given(st.lists(st.lists(st.integers(0, 4095), max_size=20), max_size=10))
def test_bitmap_matches_set_oracle(rounds):
    bm, oracle = NotificationBitmap(4096), FlaggedSet()
    for clients in rounds:
        for c in clients:
            bm.set(c)
            oracle.set(c)
            bm.check_coherent()
        assert bm.collect() == oracle.collect()
        bm.check_coherent()
        assert not bm.any()


def test_bitmap_scan_bound_one_active_of_1024():
    c = Cluster(["n0"], max_clients=1024, max_channels=2, sq_capacity=4, cq_capacity=4)
    svc = c.services["n0"]
    clients = [c.add_pod("n0", f"10.1.{i // 256}.{i % 256}") for i in range(1024)]
    clients[777].sys_listen(1)
    svc.service_step()
    bm = svc.bitmap
    before = (bm.l1_reads, bm.l2_reads)
    svc.notify(777)
    svc.service_step()
    assert bm.l1_reads - before[0] <= 2
    assert bm.l2_reads - before[1] == 1


# -- handshake ---------------------------------------------------------------------------
def test_handshake_two_messages_no_new_connection():
    c, a, b = pair()
    b.sys_listen(80)
    msgs, created = c.cross_node_messages, c.connection_creations
    h = a.sys_connect(SERVER)
    assert c.cross_node_messages - msgs == 2
    assert c.connection_creations == created
    ch = a.channels[h]
    assert ch.state is ChannelState.ESTABLISHED
    assert ch.credit == b.channels[b.sys_accept(80)].read.capacity


def test_connect_without_listener():
    c, a, b = pair()
    with pytest.raises(NoListener):
        a.sys_connect(SERVER)
    assert a.channels == {} and a.region.entries == {}


def test_connect_denied_by_policy():
    c, a, b = pair()
    b.sys_listen(80)
    c.registry.deny(dst="10.0.1.1")
    sent = c.cross_node_messages
    with pytest.raises(PolicyDenied):
        a.sys_connect(SERVER)
    assert c.cross_node_messages == sent


def test_connect_timeout_frees_channel():
    c, a, b = pair(connect_timeout=0.02)
    b.sys_listen(80)
    c.services["node1"].paused = True
    with pytest.raises(ConnectTimeout):
        a.sys_connect(SERVER)
    assert a.channels == {}
    c.services["node1"].paused = False
    c.run_until_idle()
    # the late acceptance is torn down again
    s = b.sys_accept(80)
    assert b.sys_read(s) == b""


def test_listen_twice_port_in_use():
    c, a, b = pair()
    b.sys_listen(80)
    with pytest.raises(PortInUse):
        b.sys_listen(80)


def test_accept_after_listener_closed():
    c, a, b = pair()
    b.sys_listen(80)
    b.close_listener(80)
    with pytest.raises(ListenerClosed):
        b.sys_accept(80)
    with pytest.raises(NoListener):
        a.sys_connect(SERVER)


def test_hundred_concurrent_connects_share_one_connection():
    c, a, b = pair()
    b.sys_listen(80)
    created = c.connection_creations
    tokens = [a.connect_start(SERVER) for _ in range(100)]
    handles = [a.connect_wait(t) for t in tokens]
    assert len(set(handles)) == 100
    assert all(a.channels[h].state is ChannelState.ESTABLISHED for h in handles)
    assert len(a.region.entries) == 100
    assert c.connection_creations == created
    assert len(c.fabric.connections) == 1


def test_accepts_in_arrival_order():
    c, a, b = pair()
    b.sys_listen(80)
    for seq in range(12):
        h = a.sys_connect(SERVER)
        a.sys_write(h, seq.to_bytes(2, "little"))
    order = [int.from_bytes(b.sys_read_exact(b.sys_accept(80), 2), "little") for _ in range(12)]
    assert order == list(range(12))


def test_same_node_connect_uses_no_fabric():
    c = Cluster(["n0"])
    a, b = c.add_pod("n0", "10.0.0.1"), c.add_pod("n0", "10.0.0.2")
    b.sys_listen(9)
    h = a.sys_connect(PodAddr("10.0.0.2", 9))
    s = b.sys_accept()
    a.sys_write(h, b"local")
    assert b.sys_read(s) == b"local"
    assert c.cross_node_messages == 0


# -- data path ---------------------------------------------------------------------------
def test_hello():
    c, a, b, h, s = connected()
    assert a.sys_write(h, b"hello") == 5
    assert b.sys_read(s, 16) == b"hello"
    assert b.channels[s].read_readies == 1


def test_write_into_empty_ring_one_sq_entry():
    c, a, b, h, s = connected()
    pushed = a.region.sq.pushed
    a.sys_write(h, b"abc")
    assert a.region.sq.pushed - pushed == 1
    assert parse_region(bytes(a.region.buffer))["sq"] == [(ClientKind.WRITE_REQ, h, 0)]


def test_fifty_writes_paused_service_one_sq_entry():
    c, a, b, h, s = connected()
    c.services["node0"].paused = True
    pushed = a.region.sq.pushed
    for i in range(50):
        a.sys_write(h, bytes([i]) * 10)
    assert a.region.sq.pushed - pushed == 1
    c.services["node0"].paused = False
    assert b.sys_read_exact(s, 500) == b"".join(bytes([i]) * 10 for i in range(50))


def test_large_write_bounded_by_ring():
    c, a, b, h, s = connected()
    assert a.sys_write(h, bytes(100 * 1024)) == 65536
    assert a.sys_write(h, b"more") == 0


def test_credit_zero_blocks_until_space_update():
    c, a, b, h, s = connected(ring_capacity=1024)
    ch = a.channels[h]
    a.sys_write(h, bytes(1024))
    c.run_until_idle()
    assert ch.credit == 0
    a.sys_write(h, bytes(1024))
    sent = ch.data_writes
    for _ in range(20):
        c.step()
    assert ch.data_writes == sent and ch.write.used == 1024
    assert b.sys_read(s, 600)  # frees more than half: one SpaceUpdate
    c.run_until_idle()
    assert ch.space_updates == 0 and b.channels[s].space_updates == 1
    assert ch.data_writes > sent and ch.credit == 0 and ch.write.used == 1024 - 600


def test_deposit_beyond_free_space_is_a_violation():
    c, a, b, h, s = connected(ring_capacity=1024)
    svc = c.services["node1"]
    svc.inbox.append(("node0", DataWrite(s, bytes(2048))))
    with pytest.raises(FlowControlViolation):
        svc.service_step()


def test_space_updates_lazy_one_byte_reader():
    c, a, b, h, s = connected()
    total = 128 * 1024
    data = random.Random(5).randbytes(total)
    got = bytearray()
    sent = 0
    while len(got) < total:
        if sent < total:
            sent += a.sys_write(h, data[sent:])
        got += b.sys_read(s, 1)
    assert bytes(got) == data
    updates = b.channels[s].space_updates
    assert updates <= total // 32768 + 1
    assert updates >= 1


def test_read_blocks_until_data():
    c, a, b, h, s = connected()
    with pytest.raises(WouldBlock):
        b.sys_read(s, blocking=False)
    # a blocking read drives the cluster until a write shows up
    a.sys_write(h, b"late")
    assert b.sys_read(s) == b"late"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stream_integrity_random_interleavings(seed):
    c, a, b, h, s = connected(seed=seed)
    rng = random.Random(seed)
    data = rng.randbytes(3 * 1024 * 1024)

    def coherent():
        for svc in c.services.values():
            svc.bitmap.check_coherent()

    got = stream(c, a, h, b, s, data, rng, coherent)
    src, dst = StreamDigest(), StreamDigest()
    src.update(data)
    dst.update(got)
    assert src.digest() == dst.digest()
    ch = a.channels[h]
    assert b.channels[s].space_updates <= -(-len(data) // 32768) + 1
    assert ch.bytes_sent == len(data)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["w", "r", "s"]), st.integers(1, 3000)), max_size=200),
       st.integers(0, 2**16))
def test_coalescing_bound(ops, seed):
    c, a, b, h, s = connected(seed=seed, ring_capacity=4096)
    ch = a.channels[h]
    base = ch.write_reqs
    transitions = 0
    expect, got = bytearray(), bytearray()
    payload = random.Random(seed).randbytes(3000)
    for op, n in ops:
        if op == "w":
            was_empty = ch.write.used == 0
            k = a.sys_write(h, payload[:n])
            transitions += was_empty and k > 0
            expect += payload[:k]
        elif op == "r":
            try:
                got += b.sys_read(s, n, blocking=False)
            except WouldBlock:
                pass
        else:
            c.step()
    assert ch.write_reqs - base <= transitions
    c.run_until_idle()
    while len(got) < len(expect):
        got += b.sys_read(s, 65536)
    assert bytes(got) == bytes(expect)


# -- close ----------------------------------------------------------------------------------
def test_close_empty_gives_end_of_stream():
    c, a, b, h, s = connected()
    a.sys_close(h)
    assert b.sys_read(s) == b""
    b.sys_close(s)
    c.run_until_idle()
    assert a.channels == {} and b.channels == {}
    assert a.region.entries == {} and b.region.entries == {}


def test_close_flushes_buffered_data():
    c, a, b, h, s = connected()
    data = random.Random(9).randbytes(10 * 1024)
    assert a.sys_write(h, data) == len(data)
    a.sys_close(h)
    got, ref = StreamDigest(), StreamDigest()
    ref.update(data)
    while chunk := b.sys_read(s, 3000):
        got.update(chunk)
    assert got.digest() == ref.digest()


def test_double_close_sends_one_close():
    c, a, b, h, s = connected()
    a.sys_close(h)
    a.sys_close(h)
    c.run_until_idle()
    assert c.fabric.sent["ChannelClose"] == 1
    b.sys_close(s)
    b.sys_close(s)
    c.run_until_idle()
    assert c.fabric.sent["ChannelClose"] == 2


def test_write_after_close_errors():
    c, a, b, h, s = connected()
    a.sys_close(h)
    with pytest.raises(ChannelClosed):
        a.sys_write(h, b"x")
    assert b.sys_read(s) == b""
    with pytest.raises(ChannelClosed):
        b.sys_write(s, b"x")


def test_peer_node_leaving_closes_channels():
    c, a, b, h, s = connected()
    c.fabric.leave_node("node1")
    c.run_until_idle()
    assert a.sys_read(h) == b""
    with pytest.raises(ChannelClosed):
        a.sys_write(h, b"x")
    a.sys_close(h)
    c.run_until_idle()
    assert a.channels == {}


# -- service loop ---------------------------------------------------------------------------
def test_service_sleeps_when_idle():
    c = Cluster(["n0"], idle_spin_budget=16)
    svc = c.services["n0"]
    svc.start()
    try:
        time.sleep(0.2)
        polls = svc.idle_polls
        time.sleep(1.0)
        assert svc.idle_polls == polls
        assert svc.sleeping
    finally:
        svc.stop()


@pytest.mark.slow
def test_no_lost_wakeups_under_seeded_races():
    c = Cluster(["n0"], idle_spin_budget=1)
    a, b = c.add_pod("n0", "10.0.0.1"), c.add_pod("n0", "10.0.0.2")
    b.sys_listen(7)
    h = a.sys_connect(PodAddr("10.0.0.2", 7))
    s = b.sys_accept()
    c.start()
    rng = random.Random(1234)
    try:
        for i in range(10_000):
            spin_until = time.perf_counter() + rng.random() * 50e-6
            while time.perf_counter() < spin_until:
                pass
            a.sys_write(h, b"x")
            b.wait_timeout = 2.0
            assert b.sys_read(s, 1) == b"x", f"round {i}"
        assert c.services["n0"].sleeps > 0
    finally:
        c.stop()


def _threaded_stream(backend, size):
    c, a, b = pair(backend=backend)
    b.sys_listen(80)
    c.start()
    try:
        h = a.sys_connect(SERVER)
        s = b.sys_accept(80)
        data = random.Random(77).randbytes(size)
        out = StreamDigest()
        t = threading.Thread(target=lambda: (a.sys_write_all(h, data), a.sys_close(h)))
        t.start()
        while chunk := b.sys_read(s, 50_000):
            out.update(chunk)
        t.join()
        ref = StreamDigest()
        ref.update(data)
        assert out.digest() == ref.digest()
        b.sys_close(s)
    finally:
        c.stop()


def test_threaded_inproc_stream():
    _threaded_stream("inproc", 2 * 1024 * 1024)


def test_loopback_backend_stream():
    _threaded_stream("loopback", 2 * 1024 * 1024)
