from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .region import ChannelFlags
from .ring import RingBuffer

if TYPE_CHECKING:
    from .client import TsorClient


class ChannelState(enum.IntEnum):
    CONNECTING = 1
    ESTABLISHED = 2
    CLOSED = 3


@dataclass(eq=False)
class Channel:
    """One emulated TCP connection; both rings double as registered memory."""

    channel_id: int
    client: "TsorClient"
    peer_node: str
    read: RingBuffer
    write: RingBuffer
    state: ChannelState = ChannelState.CONNECTING
    remote_id: int = 0
    credit: int = 0
    token: int = 0
    deadline: float | None = None
    tx_armed: bool = False
    rx_armed: bool = False
    local_closed: bool = False
    peer_closed: bool = False
    close_sent: bool = False
    consume_signalled: bool = False
    announced_head: int = 0
    # counters
    write_reqs: int = 0
    read_readies: int = 0
    data_writes: int = 0
    space_updates: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    credit_granted: int = 0
    discarded: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def flags(self) -> int:
        f = 0
        if self.tx_armed:
            f |= ChannelFlags.TX_ARMED
        if self.rx_armed:
            f |= ChannelFlags.RX_ARMED
        if self.local_closed:
            f |= ChannelFlags.LOCAL_CLOSED
        if self.peer_closed:
            f |= ChannelFlags.PEER_CLOSED
        return int(f)

    @property
    def unannounced(self) -> int:
        """Bytes the reader has freed that the sender has not been told about."""
        return self.read.head - self.announced_head
