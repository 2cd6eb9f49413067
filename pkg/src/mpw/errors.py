"""Exception hierarchy for the mpw library."""


class MPWError(Exception):
    """Base class for all mpw errors."""


class UnresolvableHostError(MPWError):
    """Hostname could not be resolved to an IPv4 address."""


class ConnectError(MPWError):
    """Outgoing stream connections could not all be established."""


class AcceptTimeoutError(MPWError):
    """Not all expected streams arrived before the deadline."""


class ProtocolError(MPWError):
    """Peer violated the stream handshake or framing rules."""


class TransportError(MPWError):
    """A stream failed mid-transfer.

    ``bytes_done`` counts the payload bytes that were sent or received
    on the failing stream before the error.
    """

    def __init__(self, message: str, bytes_done: int = 0):
        super().__init__(message)
        self.bytes_done = bytes_done


class TruncatedStreamError(TransportError):
    """Peer closed before the expected number of bytes arrived."""


class OversizeFrameError(MPWError):
    """A dynamic frame advertised a length above the configured cap."""


class NoSuchPathError(MPWError):
    """Path id does not name a live path."""


class PathBusyError(MPWError):
    """A transfer is already in flight on this path."""


class BarrierError(MPWError):
    """Peer disappeared while synchronizing."""


class ProbeError(MPWError):
    """Tuning probe traffic failed; the path keeps its pre-probe config."""


class TransferFailedError(MPWError):
    """A non-blocking transfer ended in failure."""


class UsageError(MPWError):
    """Caller violated a precondition (bad argument, wrong mode)."""
