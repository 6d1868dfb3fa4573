"""Desk-scale models of a secure-container runtime's core mechanisms:
socket-over-reliable-channel networking (TSoR), a two-layer bitmap page
allocator, hibernation with lazy swap-in, and asynchronous privileged calls."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import QuarkletError
from .hibernate import Sandbox, SandboxState
from .pagealloc import PageArena, PageBlock, PageRef
from .qcall import HostContext, FilePolicy, QcallEngine, QcallJob
from .transport import InProcFabric, LoopbackFabric, PodAddr, Registry, make_fabric
from .tsor import Cluster, TsorClient, TsorService

__all__ = [
    "Cluster", "FilePolicy", "HostContext", "InProcFabric", "LoopbackFabric", "PageArena", "PageBlock", "PageRef",
    "PodAddr", "QcallEngine", "QcallJob", "QuarkletError", "Registry", "Sandbox", "SandboxState", "TsorClient",
    "TsorService", "make_fabric", "__version__",
]
