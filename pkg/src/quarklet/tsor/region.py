"""Client/service shared region: submission queue, completion queue and a
channel table packed into one buffer.

Layout (little-endian, offsets in bytes)::

    0    magic        8s   b"QTSR1\\0\\0\\0"
    8    version      u32
    12   client_index u32
    16   sq_capacity  u32
    20   cq_capacity  u32
    24   max_channels u32
    28   slot_size    u32  (24)
    32   sq_head      u64   consumer: service
    40   sq_tail      u64   producer: client
    48   cq_head      u64   consumer: client
    56   cq_tail      u64   producer: service
    64   sq_offset    u32
    68   cq_offset    u32
    72   table_offset u32
    128  sq slots, then cq slots, then the channel table

Queue slot: ``kind:u8 pad:7 a:u64 b:u64``.
Channel table entry (40 bytes): ``channel_id:u64 remote_id:u64 state:u8
flags:u8 pad:2 read_capacity:u32 write_capacity:u32 pad:4 credit:u64``.
"""
from __future__ import annotations

import enum
import struct
from typing import NamedTuple

MAGIC = b"QTSR1\0\0\0"
VERSION = 1
HEADER = struct.Struct("<8sIIIIII QQQQ III")
SLOT = struct.Struct("<B7xQQ")
CHANNEL_ENTRY = struct.Struct("<QQBB2xII4xQ")
HEADER_RESERVED = 128
_SQ_HEAD, _SQ_TAIL, _CQ_HEAD, _CQ_TAIL = 32, 40, 48, 56
_U64 = struct.Struct("<Q")


class ClientKind(enum.IntEnum):
    WRITE_REQ = 1       # a=channel
    CONNECT_REQ = 2     # a=token b=packed dst PodAddr
    LISTEN_REQ = 3      # a=token b=port
    CLOSE_REQ = 4       # a=channel (or port when b=1: listener)
    READ_CONSUMED = 5   # a=channel b=bytes


class ServiceKind(enum.IntEnum):
    READ_READY = 1      # a=channel
    CONNECT_DONE = 2    # a=channel b=token
    ACCEPT_INCOMING = 3 # a=channel b=listener port
    CLOSED = 4          # a=channel
    ERROR = 5           # a=ErrorCode b=token or channel
    LISTEN_DONE = 6     # a=port b=token


class ErrorCode(enum.IntEnum):
    POLICY_DENIED = 1
    NO_LISTENER = 2
    PORT_IN_USE = 3
    UNKNOWN_POD = 4
    TIMEOUT = 5
    TOO_MANY_CHANNELS = 6
    PEER_LOST = 7
    LISTENER_CLOSED = 8


class Msg(NamedTuple):
    kind: int
    a: int = 0
    b: int = 0


class ChannelFlags(enum.IntFlag):
    TX_ARMED = 1
    RX_ARMED = 2
    LOCAL_CLOSED = 4
    PEER_CLOSED = 8


class MessageQueue:
    """Fixed-slot SPSC queue living inside a shared buffer."""

    def __init__(self, buf: memoryview, head_at: int, tail_at: int, slots_at: int, capacity: int):
        self._buf = buf
        self._head_at = head_at
        self._tail_at = tail_at
        self._slots_at = slots_at
        self.capacity = capacity
        self.pushed = 0

    def _head(self) -> int:
        return _U64.unpack_from(self._buf, self._head_at)[0]

    def _tail(self) -> int:
        return _U64.unpack_from(self._buf, self._tail_at)[0]

    def __len__(self) -> int:
        return self._tail() - self._head()

    def push(self, msg: Msg) -> bool:
        tail = self._tail()
        if tail - self._head() >= self.capacity:
            return False
        SLOT.pack_into(self._buf, self._slots_at + (tail % self.capacity) * SLOT.size, *msg)
        _U64.pack_into(self._buf, self._tail_at, tail + 1)  # publish after the slot is written
        self.pushed += 1
        return True

    def pop(self) -> Msg | None:
        head = self._head()
        if head == self._tail():
            return None
        msg = Msg(*SLOT.unpack_from(self._buf, self._slots_at + (head % self.capacity) * SLOT.size))
        _U64.pack_into(self._buf, self._head_at, head + 1)
        return msg


class SharedRegion:
    def __init__(self, client_index: int, sq_capacity: int = 256, cq_capacity: int = 256,
                 max_channels: int = 1024, buffer: bytearray | memoryview | None = None):
        sq_at = HEADER_RESERVED
        cq_at = sq_at + sq_capacity * SLOT.size
        table_at = cq_at + cq_capacity * SLOT.size
        size = table_at + max_channels * CHANNEL_ENTRY.size
        self.buffer = memoryview(buffer if buffer is not None else bytearray(size))
        if len(self.buffer) < size:
            raise ValueError(f"region needs {size} bytes")
        HEADER.pack_into(self.buffer, 0, MAGIC, VERSION, client_index, sq_capacity, cq_capacity,
                         max_channels, SLOT.size, 0, 0, 0, 0, sq_at, cq_at, table_at)
        self.client_index = client_index
        self.max_channels = max_channels
        self.table_at = table_at
        self.sq = MessageQueue(self.buffer, _SQ_HEAD, _SQ_TAIL, sq_at, sq_capacity)
        self.cq = MessageQueue(self.buffer, _CQ_HEAD, _CQ_TAIL, cq_at, cq_capacity)
        self._free_entries = list(range(max_channels - 1, -1, -1))
        self.entries: dict[int, int] = {}

    @property
    def size(self) -> int:
        return len(self.buffer)

    def claim_entry(self, channel_id: int) -> int | None:
        if not self._free_entries:
            return None
        slot = self._free_entries.pop()
        self.entries[channel_id] = slot
        return slot

    def release_entry(self, channel_id: int) -> None:
        slot = self.entries.pop(channel_id, None)
        if slot is not None:
            CHANNEL_ENTRY.pack_into(self.buffer, self.table_at + slot * CHANNEL_ENTRY.size, 0, 0, 0, 0, 0, 0, 0)
            self._free_entries.append(slot)

    def publish(self, channel_id: int, remote_id: int, state: int, flags: int, read_capacity: int,
                write_capacity: int, credit: int) -> None:
        slot = self.entries.get(channel_id)
        if slot is None:
            return
        CHANNEL_ENTRY.pack_into(self.buffer, self.table_at + slot * CHANNEL_ENTRY.size, channel_id, remote_id,
                                state, flags, read_capacity, write_capacity, credit)


def parse_region(data: bytes | memoryview) -> dict:
    """Decode a region image: header fields, queued messages and live channels."""
    fields = HEADER.unpack_from(data, 0)
    (magic, version, client_index, sq_cap, cq_cap, max_channels, slot_size,
     sq_head, sq_tail, cq_head, cq_tail, sq_at, cq_at, table_at) = fields
    if magic != MAGIC:
        raise ValueError(f"bad region magic {magic!r}")

    def queue(at, cap, head, tail):
        return [Msg(*SLOT.unpack_from(data, at + (i % cap) * SLOT.size)) for i in range(head, tail)]

    channels = []
    for i in range(max_channels):
        entry = CHANNEL_ENTRY.unpack_from(data, table_at + i * CHANNEL_ENTRY.size)
        if entry[0]:
            cid, rid, state, flags, rcap, wcap, credit = entry
            channels.append({"channel_id": cid, "remote_id": rid, "state": state, "flags": flags,
                             "read_capacity": rcap, "write_capacity": wcap, "credit": credit})
    return {
        "version": version, "client_index": client_index, "slot_size": slot_size,
        "sq_capacity": sq_cap, "cq_capacity": cq_cap, "max_channels": max_channels,
        "sq": queue(sq_at, sq_cap, sq_head, sq_tail), "cq": queue(cq_at, cq_cap, cq_head, cq_tail),
        "channels": channels,
    }
