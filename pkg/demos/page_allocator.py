# Two-layer bitmap page allocator: one 4 MiB block, bitmaps in page 0.
import numpy as np

from quarklet.pagealloc import PAGES_PER_BLOCK, new_block

block = new_block()
print("free pages in a fresh block:", block.free_count)          # 1023, page 0 is the control page
print("L1 word:", bin(block.l1))                                 # one bit per non-empty L2 word

refs = [block.alloc() for _ in range(70)]
print("first pages handed out:", [r.page_index for r in refs[:5]])
print("L2 word 0 after 70 allocs:", hex(block.l2_word(0)))       # exhausted, so L1 bit 0 drops
print("L1 bit 0 set?", bool(block.l1 & 1))

# each alloc reads one L1 word and one L2 word
print("L1 reads, L2 reads so far:", block.l1_reads, block.l2_reads)

# write something, free a page, reclaim: free pages are zero-filled
page = block.page(refs[3])
page[:] = 0xAB
block.free(refs[3])
zeroed = block.reclaim_free_pages()
print("pages zeroed by reclaim:", zeroed, "| stale bytes left:", int(block.page(refs[3]).sum()))
print("host-resident bytes:", block.host_resident_pages * 4096)

# the lowest free page is reused first
print("next alloc:", block.alloc().page_index)

# the bitmap as a numpy view: free pages per 64-page word
words = np.array([block.l2_word(k) for k in range(PAGES_PER_BLOCK // 64)], dtype="<u8")
bits = np.unpackbits(words.view(np.uint8), bitorder="little").reshape(-1, 64)
print("free pages per word:", bits.sum(axis=1))
block.check_invariants()
