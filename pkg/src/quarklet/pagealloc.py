"""Bitmap page allocator.

A :class:`PageBlock` is a 4 MiB arena of 1024 pages of 4 KiB.  Page 0 is the
control page and is the only place allocator metadata lives, so zero-filling
every free page (what the host does after ``MADV_DONTNEED``) cannot corrupt the
allocator.  This is the property a free list threaded through free pages lacks.

Control page layout (little-endian):

======  =====  ===========================================
offset  size   field
======  =====  ===========================================
0       2      L1 summary bitmap, bit k <=> L2 word k != 0
8       2      free page count
64      128    L2 bitmap, 16 x u64, bit i set <=> page i free
======  =====  ===========================================
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DoubleFree, InvalidPage, NoFreePage

PAGE_SIZE = 4096
PAGES_PER_BLOCK = 1024
BLOCK_SIZE = PAGE_SIZE * PAGES_PER_BLOCK
L2_WORDS = PAGES_PER_BLOCK // 64

L1_OFFSET = 0
FREE_COUNT_OFFSET = 8
L2_OFFSET = 64

_WORD_MASK = (1 << 64) - 1


def _lowest_bit(x: int) -> int:
    return (x & -x).bit_length() - 1


@dataclass(frozen=True, order=True)
class PageRef:
    block_id: int
    page_index: int

    def __post_init__(self):
        if not 1 <= self.page_index < PAGES_PER_BLOCK:
            raise InvalidPage(f"page index {self.page_index} outside [1, {PAGES_PER_BLOCK})")


class PageBlock:
    """One 1024-page arena with a two-layer free bitmap in page 0."""

    def __init__(self, block_id: int = 0):
        self.block_id = block_id
        try:
            self.memory = np.zeros((PAGES_PER_BLOCK, PAGE_SIZE), dtype=np.uint8)
        except MemoryError as exc:  # pragma: no cover - host dependent
            raise MemoryError("cannot back a new page block") from exc
        control = self.memory[0]
        self._l1 = control[L1_OFFSET:L1_OFFSET + 2].view("<u2")
        self._count = control[FREE_COUNT_OFFSET:FREE_COUNT_OFFSET + 2].view("<u2")
        self._l2 = control[L2_OFFSET:L2_OFFSET + 8 * L2_WORDS].view("<u8")
        self._l2[:] = _WORD_MASK
        self._l2[0] = _WORD_MASK & ~1
        self._l1[0] = (1 << L2_WORDS) - 1
        self._count[0] = PAGES_PER_BLOCK - 1
        # host-side accounting; not allocator state
        self._reclaimed = np.zeros(PAGES_PER_BLOCK, dtype=bool)
        self.l1_reads = 0
        self.l2_reads = 0

    # -- bitmap views -------------------------------------------------
    @property
    def l1(self) -> int:
        return int(self._l1[0])

    def l2_word(self, k: int) -> int:
        return int(self._l2[k])

    @property
    def l2(self) -> int:
        """Whole L2 bitmap as one 1024-bit integer (bit i = page i)."""
        out = 0
        for k in range(L2_WORDS - 1, -1, -1):
            out = (out << 64) | int(self._l2[k])
        return out

    @property
    def free_count(self) -> int:
        return int(self._count[0])

    def is_free(self, page_index: int) -> bool:
        return bool((int(self._l2[page_index >> 6]) >> (page_index & 63)) & 1)

    # -- allocation ---------------------------------------------------
    def alloc(self) -> PageRef:
        """Return the lowest-indexed free page, zero-filled."""
        l1 = int(self._l1[0])
        self.l1_reads += 1
        if l1 == 0:
            raise NoFreePage(f"block {self.block_id} is full")
        k = _lowest_bit(l1)
        word = int(self._l2[k])
        self.l2_reads += 1
        bit = _lowest_bit(word)
        word &= word - 1
        self._l2[k] = word
        if word == 0:
            self._l1[0] = l1 & ~(1 << k)
        self._count[0] -= 1
        index = (k << 6) | bit
        self.memory[index] = 0
        self._reclaimed[index] = False
        return PageRef(self.block_id, index)

    def free(self, ref: PageRef | int) -> None:
        index = ref if isinstance(ref, int) else ref.page_index
        if not isinstance(ref, int) and ref.block_id != self.block_id:
            raise InvalidPage(f"page {ref} does not belong to block {self.block_id}")
        if not 1 <= index < PAGES_PER_BLOCK:
            raise InvalidPage(f"page index {index} outside [1, {PAGES_PER_BLOCK})")
        k, bit = index >> 6, index & 63
        word = int(self._l2[k])
        if (word >> bit) & 1:
            raise DoubleFree(f"page {index} of block {self.block_id} is already free")
        self._l2[k] = word | (1 << bit)
        self._l1[0] = int(self._l1[0]) | (1 << k)
        self._count[0] += 1

    def reclaim_free_pages(self) -> int:
        """Zero every free page, as the host does after ``MADV_DONTNEED``.

        Returns the number of pages zeroed.  Reclaimed pages count as returned
        to the host until they are allocated again.
        """
        bits = np.unpackbits(self._l2.view(np.uint8), bitorder="little").astype(bool)
        self.memory[bits] = 0
        self._reclaimed |= bits
        return int(bits.sum())

    # -- accounting ---------------------------------------------------
    @property
    def reclaimed_pages(self) -> int:
        return int(self._reclaimed.sum())

    @property
    def host_resident_pages(self) -> int:
        return PAGES_PER_BLOCK - self.reclaimed_pages

    def page(self, ref: PageRef | int) -> np.ndarray:
        index = ref if isinstance(ref, int) else ref.page_index
        return self.memory[index]

    def check_invariants(self) -> None:
        l1 = int(self._l1[0])
        total = 0
        for k in range(L2_WORDS):
            word = int(self._l2[k])
            assert bool((l1 >> k) & 1) == (word != 0), f"L1 bit {k} disagrees with L2 word"
            total += word.bit_count()
        assert int(self._l2[0]) & 1 == 0, "control page marked free"
        assert total == self.free_count, "free count disagrees with L2 popcount"


def new_block(block_id: int = 0) -> PageBlock:
    return PageBlock(block_id)


class PageArena:
    """First-fit list of page blocks, grown on demand."""

    def __init__(self, max_blocks: int | None = None):
        self.blocks: list[PageBlock] = []
        self.max_blocks = max_blocks

    def alloc(self) -> PageRef:
        for block in self.blocks:
            if block.free_count:
                return block.alloc()
        if self.max_blocks is not None and len(self.blocks) >= self.max_blocks:
            raise NoFreePage("arena exhausted")
        block = PageBlock(len(self.blocks))
        self.blocks.append(block)
        return block.alloc()

    def free(self, ref: PageRef) -> None:
        self._block(ref).free(ref)

    def page(self, ref: PageRef) -> np.ndarray:
        return self._block(ref).memory[ref.page_index]

    def reclaim_free_pages(self) -> int:
        return sum(block.reclaim_free_pages() for block in self.blocks)

    @property
    def allocated_pages(self) -> int:
        return sum(PAGES_PER_BLOCK - 1 - b.free_count for b in self.blocks)

    @property
    def host_resident_bytes(self) -> int:
        return PAGE_SIZE * sum(b.host_resident_pages for b in self.blocks)

    def _block(self, ref: PageRef) -> PageBlock:
        if not 0 <= ref.block_id < len(self.blocks):
            raise InvalidPage(f"no block {ref.block_id}")
        return self.blocks[ref.block_id]
