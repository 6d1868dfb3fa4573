from .bitmap import NotificationBitmap
from .channel import Channel, ChannelState
from .client import TsorClient, sys_accept, sys_close, sys_connect, sys_listen, sys_read, sys_write
from .cluster import Cluster
from .region import ClientKind, ErrorCode, Msg, ServiceKind, SharedRegion, parse_region
from .ring import RingBuffer
from .service import TsorService, service_run, service_step

__all__ = [
    "Channel", "ChannelState", "ClientKind", "Cluster", "ErrorCode", "Msg", "NotificationBitmap", "RingBuffer",
    "ServiceKind", "SharedRegion", "TsorClient", "TsorService", "parse_region", "service_run", "service_step",
    "sys_accept", "sys_close", "sys_connect", "sys_listen", "sys_read", "sys_write",
]
