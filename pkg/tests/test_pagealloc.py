import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quarklet.errors import DoubleFree, InvalidPage, NoFreePage
from quarklet.pagealloc import (
    L1_OFFSET, L2_OFFSET, PAGE_SIZE, PageArena, PageRef, new_block,
)

from oracles import LinearScanAllocator


def test_new_block_counts():
    block = new_block()
    assert block.free_count == 1023
    assert not block.is_free(0)
    assert all(block.is_free(i) for i in range(1, 1024))
    block.check_invariants()


def test_new_block_l1_all_set_from_direct_construction():
    # build the expected bitmaps independently, bit by bit
    l2_words = [0] * 16
    for page in range(1, 1024):
        l2_words[page // 64] |= 1 << (page % 64)
    l1 = 0
    for k, word in enumerate(l2_words):
        if word:
            l1 |= 1 << k
    block = new_block()
    assert block.l1 == l1 == 0xFFFF
    assert [block.l2_word(k) for k in range(16)] == l2_words


def test_bitmaps_live_in_control_page():
    block = new_block()
    raw = block.memory[0]
    assert int(raw[L1_OFFSET:L1_OFFSET + 2].view("<u2")[0]) == 0xFFFF
    assert int(raw[L2_OFFSET:L2_OFFSET + 8].view("<u8")[0]) == (1 << 64) - 2
    # nothing but zeros outside the control page
    assert not block.memory[1:].any()


def test_alloc_lowest_first_and_exhaustion():
    block = new_block()
    assert block.alloc() == PageRef(0, 1)
    for expected in range(2, 1024):
        assert block.alloc().page_index == expected
    with pytest.raises(NoFreePage):
        block.alloc()
    block.check_invariants()


def test_free_then_alloc_reuses_hole():
    block = new_block()
    for _ in range(1023):
        block.alloc()
    block.free(PageRef(0, 5))
    assert block.alloc().page_index == 5


def test_l1_bit_tracks_word_exhaustion():
    block = new_block()
    for _ in range(63):  # pages 1..63 fill word 0
        block.alloc()
    assert block.l1 == 0xFFFE
    block.free(PageRef(0, 10))
    assert block.l1 == 0xFFFF


def test_double_free_and_invalid():
    block = new_block()
    ref = block.alloc()
    block.free(ref)
    with pytest.raises(DoubleFree):
        block.free(ref)
    with pytest.raises(InvalidPage):
        block.free(0)
    with pytest.raises(InvalidPage):
        block.free(1024)
    with pytest.raises(InvalidPage):
        PageRef(0, 0)
    with pytest.raises(InvalidPage):
        block.free(PageRef(3, 7))


def test_alloc_returns_zeroed_page():
    block = new_block()
    ref = block.alloc()
    block.page(ref)[:] = 0xAB
    block.free(ref)
    assert block.alloc() == ref
    assert not block.page(ref).any()


def test_alloc_bounded_scan_work():
    block = new_block()
    rng = random.Random(3)
    live = []
    for _ in range(5000):
        before = (block.l1_reads, block.l2_reads)
        if live and rng.random() < 0.4:
            block.free(live.pop(rng.randrange(len(live))))
            continue
        try:
            live.append(block.alloc())
        except NoFreePage:
            continue
        assert block.l1_reads - before[0] <= 1
        assert block.l2_reads - before[1] <= 1


def test_reclaim_fresh_block():
    block = new_block()
    assert block.reclaim_free_pages() == 1023
    assert block.alloc().page_index == 1
    assert block.free_count == 1022


def test_reclaim_keeps_allocated_bytes():
    block = new_block()
    refs = [block.alloc() for _ in range(10)]
    for i, ref in enumerate(refs):
        block.page(ref)[:] = i + 1
    snapshot = block.memory[[r.page_index for r in refs]].copy()
    freed = block.reclaim_free_pages()
    assert freed == 1013
    assert np.array_equal(block.memory[[r.page_index for r in refs]], snapshot)
    block.check_invariants()


def test_reclaim_wipes_stale_free_page_data():
    block = new_block()
    ref = block.alloc()
    block.page(ref)[:] = 7
    block.free(ref)
    block.reclaim_free_pages()
    assert not block.page(ref).any()
    assert block.reclaimed_pages == 1023


def _run_schedule(ops, with_reclaim: bool):
    block = new_block()
    live: list[PageRef] = []
    results = []
    for op, arg in ops:
        if op == "alloc":
            try:
                ref = block.alloc()
            except NoFreePage:
                results.append(None)
            else:
                live.append(ref)
                results.append(ref.page_index)
        elif op == "free" and live:
            results.append(live.pop(arg % len(live)).page_index)
            block.free(results[-1])
        elif op == "reclaim" and with_reclaim:
            block.reclaim_free_pages()
        block.check_invariants()
    return results, block.l2, block.l1


@pytest.mark.parametrize("seed", range(5))
def test_reclaim_commutes_with_allocator(seed):
    rng = random.Random(seed)
    ops = [(rng.choice(["alloc", "alloc", "free", "reclaim"]), rng.randrange(1 << 20))
           for _ in range(10_000)]
    assert _run_schedule(ops, True) == _run_schedule(ops, False)


def test_oracle_equivalence_interleaved():
    rng = random.Random(11)
    block, oracle = new_block(), LinearScanAllocator()
    live = []
    for _ in range(20_000):
        if live and rng.random() < 0.45:
            idx = live.pop(rng.randrange(len(live)))
            block.free(idx)
            assert oracle.release(idx)
        else:
            expect = oracle.alloc()
            if expect is None:
                with pytest.raises(NoFreePage):
                    block.alloc()
            else:
                assert block.alloc().page_index == expect
                live.append(expect)
        assert block.l2 == oracle.l2_int()
    block.check_invariants()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["alloc", "free", "reclaim"]),
                          st.integers(0, 2047)), max_size=300))
def test_property_bitmap_coherence(ops):
    block, oracle = new_block(), LinearScanAllocator()
    live = []
    for op, arg in ops:
        if op == "alloc":
            expect = oracle.alloc()
            if expect is None:
                with pytest.raises(NoFreePage):
                    block.alloc()
            else:
                assert block.alloc().page_index == expect
                live.append(expect)
        elif op == "free":
            idx = arg % 1024
            if idx in live:
                live.remove(idx)
                block.free(idx)
                oracle.release(idx)
            elif idx == 0:
                with pytest.raises(InvalidPage):
                    block.free(idx)
            else:
                with pytest.raises(DoubleFree):
                    block.free(idx)
        else:
            block.reclaim_free_pages()
        block.check_invariants()
        assert block.l2 == oracle.l2_int()


def test_arena_first_fit_across_blocks():
    arena = PageArena()
    refs = [arena.alloc() for _ in range(1100)]
    assert refs[1022] == PageRef(0, 1023)
    assert refs[1023] == PageRef(1, 1)
    arena.free(PageRef(0, 9))
    assert arena.alloc() == PageRef(0, 9)
    assert arena.allocated_pages == 1100
    arena.page(refs[0])[:] = 1
    arena.reclaim_free_pages()
    assert arena.page(refs[0]).all()
    assert arena.host_resident_bytes == PAGE_SIZE * (1024 + 1 + 77)


def test_arena_limit():
    arena = PageArena(max_blocks=1)
    for _ in range(1023):
        arena.alloc()
    with pytest.raises(NoFreePage):
        arena.alloc()
