import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quarklet.errors import SwapCorruption, SwapIoError, UnmappedPage, WrongState
from quarklet.hibernate import Sandbox, SandboxState, hibernate, resident_bytes, wakeup
from quarklet.pagealloc import PAGE_SIZE
from quarklet.swapfile import HEADER, MAGIC, SwapFile


def make_sandbox(tmp_path, pages=0, seed=0, name="swap"):
    sb = Sandbox(tmp_path / name)
    sb.boot()
    rng = np.random.default_rng(seed)
    images = {}
    for vpn in range(pages):
        img = rng.integers(0, 256, PAGE_SIZE, dtype=np.uint8).tobytes()
        sb.map_page(vpn, img)
        images[vpn] = img
    return sb, images


def test_hibernate_counts(tmp_path):
    sb, _ = make_sandbox(tmp_path, 100)
    stats = hibernate(sb)
    assert stats.pages_swapped == 100
    assert stats.bytes_written == 100 * PAGE_SIZE
    assert sb.resident_pages == 0 and resident_bytes(sb) == 0
    assert sb.state is SandboxState.HIBERNATED
    assert all(not e.present for e in sb.page_table.values())
    sb.close()


def test_hibernate_empty(tmp_path):
    sb, _ = make_sandbox(tmp_path, 0)
    assert hibernate(sb).pages_swapped == 0
    assert sb.state is SandboxState.HIBERNATED
    sb.close()


def test_swap_file_matches_page_images(tmp_path):
    sb, images = make_sandbox(tmp_path, 37, seed=4)
    hibernate(sb)
    live = sb.swap.live_slots()
    assert sorted(live) == list(range(37))
    assert [live[s].vpn for s in range(37)] == list(range(37))
    assert sb.swap.dump_slots(range(37)) == b"".join(images[v] for v in range(37))
    assert sb.swap.read_header() == (MAGIC, 1, PAGE_SIZE)
    raw = sb.swap.path.read_bytes()
    assert raw[:HEADER.size] == HEADER.pack(b"QSWP", 1, 4096)
    assert raw[HEADER.size:] == b"".join(images[v] for v in range(37))
    sb.close()


def test_wakeup_is_lazy(tmp_path):
    sb, _ = make_sandbox(tmp_path, 100)
    hibernate(sb)
    wakeup(sb)
    assert sb.state is SandboxState.WAKEUP
    assert sb.swapin_count == 0 and sb.swap_reads == 0
    for vpn in range(0, 100, 10):
        sb.access_page(vpn)
    assert sb.swapin_count == 10
    assert resident_bytes(sb) == 10 * PAGE_SIZE
    sb.close()


def test_wakeup_wrong_state(tmp_path):
    sb, _ = make_sandbox(tmp_path, 3)
    with pytest.raises(WrongState):
        wakeup(sb)
    assert sb.state is SandboxState.WARM
    sb.close()


def test_round_trip_write_pattern(tmp_path):
    sb, _ = make_sandbox(tmp_path, 4)
    pattern = bytes(range(256)) * 16
    sb.access_page(2, "write", pattern)
    hibernate(sb)
    wakeup(sb)
    assert sb.access_page(2) == pattern
    assert sb.swapin_count == 1
    assert sb.access_page(2) == pattern
    assert sb.swapin_count == 1
    sb.close()


def test_present_access_reads_no_swap(tmp_path):
    sb, images = make_sandbox(tmp_path, 5)
    assert sb.access_page(3) == images[3]
    assert sb.swap.reads == 0 and sb.swapin_count == 0
    sb.close()


def test_partial_write_offset(tmp_path):
    sb, images = make_sandbox(tmp_path, 1)
    assert sb.access_page(0, "write", b"xyz", offset=100) == 3
    page = sb.access_page(0)
    assert page[100:103] == b"xyz" and page[:100] == images[0][:100]
    with pytest.raises(ValueError):
        sb.access_page(0, "write", b"ab", offset=PAGE_SIZE - 1)
    sb.close()


def test_unmapped_and_corruption(tmp_path):
    sb, _ = make_sandbox(tmp_path, 2)
    with pytest.raises(UnmappedPage):
        sb.access_page(99)
    hibernate(sb)
    wakeup(sb)
    slot = sb.page_table[1].swap_slot
    # flip one byte of the stored image
    raw = bytearray(sb.swap.path.read_bytes())
    raw[HEADER.size + slot * PAGE_SIZE] ^= 0xFF
    sb.swap.path.write_bytes(bytes(raw))
    with pytest.raises(SwapCorruption):
        sb.access_page(1)
    assert not sb.page_table[1].present and sb.swapin_count == 0
    sb.access_page(0)
    assert sb.swapin_count == 1
    sb.close()


def test_disallowed_states_mutate_nothing(tmp_path):
    sb = Sandbox(tmp_path / "s")
    for op in (sb.hibernate, sb.wakeup, sb.begin_request, sb.end_request):
        with pytest.raises(WrongState):
            op()
        assert sb.state is SandboxState.INIT
    with pytest.raises(WrongState):
        sb.access_page(0)
    sb.boot()
    sb.map_page(0, b"\1" * PAGE_SIZE)
    hibernate(sb)
    before = (sb.resident_pages, sb.swapped_pages, sb.swapin_count)
    for op in (sb.hibernate, sb.begin_request, sb.end_request, sb.boot):
        with pytest.raises(WrongState):
            op()
    with pytest.raises(WrongState):
        sb.access_page(0)
    with pytest.raises(WrongState):
        sb.map_page(5)
    assert (sb.resident_pages, sb.swapped_pages, sb.swapin_count) == before
    assert sb.state is SandboxState.HIBERNATED
    sb.close()


def test_full_lifecycle_and_rehibernate(tmp_path):
    sb, images = make_sandbox(tmp_path, 20, seed=9)
    sb.begin_request()
    sb.access_page(0, "write", b"\0" * 8)
    images[0] = b"\0" * 8 + images[0][8:]
    sb.end_request()
    hibernate(sb)
    wakeup(sb)
    sb.begin_request()
    assert sb.access_page(7) == images[7]
    sb.end_request()
    # remaining pages are pulled in when returning to Warm
    assert sb.swapped_pages == 0 and sb.resident_pages == 20
    assert sb.swapin_count == 1 and sb.settled_pages == 19
    assert sb.state is SandboxState.WARM
    hibernate(sb)
    assert sb.swap.epoch == 2
    assert sorted(sb.swap.live_slots()) == list(range(20))
    wakeup(sb)
    for vpn, img in images.items():
        assert sb.access_page(vpn) == img
    sb.close()


def test_swap_io_error_rolls_back(tmp_path, monkeypatch):
    sb, images = make_sandbox(tmp_path, 10)
    real = sb.swap.write_slot
    calls = {"n": 0}

    def flaky(vpn, data):
        calls["n"] += 1
        if calls["n"] == 6:
            raise SwapIoError("disk full")
        return real(vpn, data)

    monkeypatch.setattr(sb.swap, "write_slot", flaky)
    with pytest.raises(SwapIoError):
        hibernate(sb)
    assert sb.state is SandboxState.WARM
    assert sb.resident_pages == 10 and sb.swapped_pages == 0 and sb.swapin_count == 0
    assert all(e.present and e.swap_slot is None for e in sb.page_table.values())
    for vpn, img in images.items():
        assert sb.access_page(vpn) == img
    sb.close()


def test_hibernated_memory_is_returned(tmp_path):
    sb, _ = make_sandbox(tmp_path, 50)
    block = sb.arena.blocks[0]
    hibernate(sb)
    assert block.free_count == 1023
    assert block.reclaimed_pages == 1023
    sb.close()


def test_workers_pause_and_resume(tmp_path):
    sb, _ = make_sandbox(tmp_path, 8)
    counter = {"n": 0}

    def body(s):
        s.access_page(counter["n"] % 8, "write", counter["n"].to_bytes(4, "little"))
        counter["n"] += 1

    worker = sb.spawn_worker(body)
    while worker.iterations < 5:
        threading.Event().wait(0.001)
    hibernate(sb)
    frozen = worker.iterations
    threading.Event().wait(0.05)
    assert worker.iterations == frozen
    wakeup(sb)
    while worker.iterations < frozen + 5:
        threading.Event().wait(0.001)
    assert worker.error is None
    sb.close()


def test_concurrent_faults_distinct_pages(tmp_path):
    sb, images = make_sandbox(tmp_path, 200, seed=2)
    hibernate(sb)
    wakeup(sb)
    errors = []

    def reader(vpns):
        try:
            for v in vpns:
                assert sb.access_page(v) == images[v]
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=reader, args=(range(i, 200, 4),)) for i in range(4)]
    threads += [threading.Thread(target=reader, args=(range(0, 200, 7),))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert sb.swapin_count == 200


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.lists(st.integers(0, 59), max_size=80), st.integers(0, 2**32 - 1))
def test_property_round_trip_and_laziness(tmp_path_factory, n, trace, seed):
    tmp = tmp_path_factory.mktemp("prop")
    sb, images = make_sandbox(tmp, n, seed=seed)
    hibernate(sb)
    assert resident_bytes(sb) == 0
    wakeup(sb)
    touched = set()
    for vpn in trace:
        if vpn >= n:
            continue
        assert sb.access_page(vpn) == images[vpn]
        touched.add(vpn)
        assert sb.swapin_count == len(touched)
    assert resident_bytes(sb) == len(touched) * PAGE_SIZE
    sb.close()


def test_swapfile_slot_rules(tmp_path):
    with SwapFile(tmp_path / "f") as swap:
        swap.begin_epoch()
        a = swap.write_slot(1, b"a" * PAGE_SIZE)
        b = swap.write_slot(2, b"b" * PAGE_SIZE)
        swap.release(a)
        # a released slot is not rewritten inside the same epoch
        assert swap.write_slot(3, b"c" * PAGE_SIZE) == 2
        swap.begin_epoch()
        assert swap.write_slot(4, b"d" * PAGE_SIZE) == 0
        assert swap.read_slot(b) == b"b" * PAGE_SIZE
        idx = swap.read_index()
        assert idx[0].epoch == 2 and idx[1].epoch == 1
        assert set(swap.live_slots()) == {0}
        with pytest.raises(ValueError):
            swap.write_slot(5, b"short")
