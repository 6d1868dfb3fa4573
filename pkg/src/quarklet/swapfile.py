"""On-disk swap file with a sidecar slot index.

Layout of the swap file (little-endian)::

    b"QSWP" | version:u32 | slot_size:u32 | slot 0 | slot 1 | ...

Slots are raw page images.  The sidecar ``<path>.idx`` is an append-only log
of ``slot:u32 vpn:u64 checksum:u64 epoch:u32`` records; the newest record per
slot wins and only records of the current epoch are live.  A new epoch makes
all older slots stale without truncating either file.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

from .errors import SwapCorruption, SwapIoError

MAGIC = b"QSWP"
VERSION = 1
HEADER = struct.Struct("<4sII")
INDEX_RECORD = struct.Struct("<IQQI")


def page_checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class SlotRecord:
    vpn: int
    checksum: int
    epoch: int


class SwapFile:
    def __init__(self, path: str | os.PathLike, slot_size: int = 4096):
        self.path = Path(path)
        self.index_path = self.path.with_name(self.path.name + ".idx")
        self.slot_size = slot_size
        self.epoch = 0
        self.allocated: dict[int, SlotRecord] = {}
        self._written_this_epoch: set[int] = set()
        self._next_slot = 0
        self.writes = 0
        self.reads = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o600)
            os.pwrite(self._fd, HEADER.pack(MAGIC, VERSION, slot_size), 0)
            self._index = open(self.index_path, "wb", buffering=0)
        except OSError as exc:
            raise SwapIoError(f"cannot create swap file {self.path}: {exc}") from exc

    def begin_epoch(self) -> int:
        self.epoch += 1
        self._written_this_epoch.clear()
        self._next_slot = 0
        return self.epoch

    def _offset(self, slot: int) -> int:
        return HEADER.size + slot * self.slot_size

    def write_slot(self, vpn: int, data: bytes) -> int:
        """Store one page image in a fresh slot and return the slot number."""
        if len(data) != self.slot_size:
            raise ValueError(f"page image must be {self.slot_size} bytes")
        while self._next_slot in self.allocated or self._next_slot in self._written_this_epoch:
            self._next_slot += 1
        slot = self._next_slot
        checksum = page_checksum(data)
        try:
            os.pwrite(self._fd, data, self._offset(slot))
            self._index.write(INDEX_RECORD.pack(slot, vpn, checksum, self.epoch))
        except OSError as exc:
            raise SwapIoError(f"writing slot {slot}: {exc}") from exc
        self._written_this_epoch.add(slot)
        self.allocated[slot] = SlotRecord(vpn, checksum, self.epoch)
        self.writes += 1
        return slot

    def read_slot(self, slot: int, verify: bool = True) -> bytes:
        record = self.allocated.get(slot)
        if record is None:
            raise SwapCorruption(f"slot {slot} is not allocated")
        try:
            data = os.pread(self._fd, self.slot_size, self._offset(slot))
        except OSError as exc:
            raise SwapIoError(f"reading slot {slot}: {exc}") from exc
        self.reads += 1
        if len(data) != self.slot_size:
            raise SwapCorruption(f"slot {slot} is truncated")
        if verify and page_checksum(data) != record.checksum:
            raise SwapCorruption(f"checksum mismatch in slot {slot} (vpn {record.vpn})")
        return data

    def release(self, slot: int) -> None:
        self.allocated.pop(slot, None)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._index.close()
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def read_header(self) -> tuple[bytes, int, int]:
        return HEADER.unpack(os.pread(self._fd, HEADER.size, 0))

    def read_index(self) -> dict[int, SlotRecord]:
        """Parse the sidecar; newest record per slot, any epoch."""
        out: dict[int, SlotRecord] = {}
        raw = self.index_path.read_bytes()
        for slot, vpn, checksum, epoch in INDEX_RECORD.iter_unpack(raw):
            out[slot] = SlotRecord(vpn, checksum, epoch)
        return out

    def live_slots(self) -> dict[int, SlotRecord]:
        return {s: r for s, r in self.read_index().items() if r.epoch == self.epoch}

    def dump_slots(self, slots) -> bytes:
        return b"".join(os.pread(self._fd, self.slot_size, self._offset(s)) for s in slots)
