"""Light-weight wide-area message passing over paths of parallel TCP streams.

The library connects two programs via *paths* of 1-256 ordered TCP
streams, stripes message buffers across them, and offers software
pacing, TCP window control, and an optional autotuner.  Payloads are
untyped byte buffers; serialization is the application's job.

The functions below operate on a process-wide default registry, which
mirrors the classic global-init/finalize style of message-passing APIs.
Use :class:`PathRegistry` directly for isolated instances.
"""

from . import autotune as _autotune
from .autotune import ProbeReport
from .errors import (
    AcceptTimeoutError,
    BarrierError,
    ConnectError,
    MPWError,
    NoSuchPathError,
    OversizeFrameError,
    PathBusyError,
    ProbeError,
    ProtocolError,
    TransferFailedError,
    TransportError,
    TruncatedStreamError,
    UnresolvableHostError,
    UsageError,
)
from .paths import (
    BARRIER_TOKEN,
    DEFAULT_CHUNK_SIZE,
    PathConfig,
    PathListener,
    PathRegistry,
    StripePlan,
    TransferHandle,
    stripe,
)
from .streams import (
    MAX_STREAMS,
    Endpoint,
    Stream,
    StreamHandshake,
    pacing_delay,
    resolve_host,
)

__all__ = [
    "AcceptTimeoutError",
    "BARRIER_TOKEN",
    "BarrierError",
    "ConnectError",
    "DEFAULT_CHUNK_SIZE",
    "Endpoint",
    "MAX_STREAMS",
    "MPWError",
    "NoSuchPathError",
    "OversizeFrameError",
    "PathBusyError",
    "PathConfig",
    "PathListener",
    "PathRegistry",
    "ProbeError",
    "ProbeReport",
    "ProtocolError",
    "Stream",
    "StreamHandshake",
    "StripePlan",
    "TransferFailedError",
    "TransferHandle",
    "TransportError",
    "TruncatedStreamError",
    "UnresolvableHostError",
    "UsageError",
    "autotune_path",
    "barrier",
    "configure",
    "create_path",
    "cycle",
    "dcycle",
    "default_registry",
    "destroy_path",
    "drecv",
    "dsend",
    "dsend_recv",
    "finalize",
    "has_finished",
    "init",
    "isend_recv",
    "listen",
    "measure_rtt",
    "pacing_delay",
    "recv",
    "relay",
    "resolve_host",
    "send",
    "send_recv",
    "stripe",
    "wait",
]

_registry = PathRegistry()


def default_registry() -> PathRegistry:
    return _registry


def init():
    """Prepare the default registry for use; idempotent."""
    return _registry.init()


def listen(bind, streams=1, config=None) -> PathListener:
    return _registry.listen(bind, streams, config)


def create_path(remote, streams=1, role="client", config=None, timeout=30.0) -> int:
    return _registry.create_path(remote, streams, role, config, timeout)


def destroy_path(path_id):
    return _registry.destroy_path(path_id)


def send(path_id, data):
    return _registry.send(path_id, data)


def recv(path_id, expected_len):
    return _registry.recv(path_id, expected_len)


def send_recv(path_id, out, expected_in):
    return _registry.send_recv(path_id, out, expected_in)


def dsend(path_id, data):
    return _registry.dsend(path_id, data)


def drecv(path_id, max_frame=None):
    return _registry.drecv(path_id, max_frame)


def dsend_recv(path_id, out, max_frame=None):
    return _registry.dsend_recv(path_id, out, max_frame)


def barrier(path_id):
    return _registry.barrier(path_id)


def cycle(recv_path_id, send_path_id, out, expected_in):
    return _registry.cycle(recv_path_id, send_path_id, out, expected_in)


def dcycle(recv_path_id, send_path_id, out, max_frame=None):
    return _registry.dcycle(recv_path_id, send_path_id, out, max_frame)


def relay(path_a, path_b):
    return _registry.relay(path_a, path_b)


def isend_recv(path_id, out, expected_in) -> TransferHandle:
    return _registry.isend_recv(path_id, out, expected_in)


def has_finished(handle) -> bool:
    return _registry.has_finished(handle)


def wait(handle) -> bytes:
    return _registry.wait(handle)


def configure(path_id, setting, value):
    return _registry.configure(path_id, setting, value)


def finalize():
    return _registry.finalize()


def measure_rtt(path_id, samples=_autotune.DEFAULT_RTT_SAMPLES) -> float:
    return _autotune.measure_rtt(_registry, path_id, samples)


def autotune_path(path_id, probe_bytes=_autotune.MIN_PROBE_BYTES) -> ProbeReport:
    return _autotune.autotune_path(_registry, path_id, probe_bytes)
