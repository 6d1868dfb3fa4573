"""Exception hierarchy shared by all quarklet engines."""
from __future__ import annotations


class QuarkletError(Exception):
    """Base class for every error raised by this package."""


# page allocator
class NoFreePage(QuarkletError):
    pass


class DoubleFree(QuarkletError):
    pass


class InvalidPage(QuarkletError):
    pass


# sandbox lifecycle
class WrongState(QuarkletError):
    pass


class UnmappedPage(QuarkletError):
    pass


class SwapIoError(QuarkletError):
    pass


class SwapCorruption(QuarkletError):
    pass


# qcall
class QueueFull(QuarkletError):
    pass


class ShutdownInProgress(QuarkletError):
    pass


class UnopenedFile(QuarkletError):
    pass


# transport
class DuplicateNode(QuarkletError):
    pass


class ConnectionClosed(QuarkletError):
    pass


class UnknownPod(QuarkletError):
    pass


class PolicyDenied(QuarkletError):
    pass


# tsor
class NoListener(QuarkletError):
    pass


class PortInUse(QuarkletError):
    pass


class ListenerClosed(QuarkletError):
    pass


class ChannelClosed(QuarkletError):
    pass


class WouldBlock(QuarkletError):
    pass


class ConnectTimeout(QuarkletError, TimeoutError):
    pass


class FlowControlViolation(QuarkletError):
    """A deposit would overflow the receiver's read ring."""


# bench
class InvalidConfig(QuarkletError):
    pass


class ScenarioFailure(QuarkletError):
    pass
