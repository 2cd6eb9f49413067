"""Individual TCP stream management: handshakes, chunked paced sends, exact receives.

A *stream* is one TCP connection inside a path.  Streams introduce
themselves with a fixed 13-byte handshake so that many parallel
connections arriving on a single listen port can be grouped into the
right path and ordered by stream index:

    4 bytes magic ``MPWP`` | 1 byte version 0x01 | 4 bytes path id (BE)
    | 2 bytes stream index (BE) | 2 bytes stream count (BE)

Everything after the handshake is raw payload bytes.
"""

from __future__ import annotations

import re
import socket
import struct
import time
from dataclasses import dataclass

from .errors import (
    AcceptTimeoutError,
    ConnectError,
    ProtocolError,
    TransportError,
    TruncatedStreamError,
    UnresolvableHostError,
    UsageError,
)

HANDSHAKE_MAGIC = b"MPWP"
HANDSHAKE_VERSION = 0x01
_HANDSHAKE = struct.Struct(">4sBIHH")
HANDSHAKE_SIZE = _HANDSHAKE.size  # 13 bytes

MAX_STREAMS = 256

_DOTTED_QUAD = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})$")


@dataclass(frozen=True)
class Endpoint:
    """A host/port pair naming one end of a path."""

    host: str
    port: int

    def __post_init__(self):
        if not self.host:
            raise UsageError("endpoint host must be non-empty")
        if not 1 <= self.port <= 65535:
            raise UsageError(f"endpoint port out of range: {self.port}")

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        """Parse ``host:port`` text (as used by CLIs and config files)."""
        host, sep, port = text.rpartition(":")
        if not sep or not host:
            raise UsageError(f"expected host:port, got {text!r}")
        try:
            return cls(host, int(port))
        except ValueError:
            raise UsageError(f"bad port in {text!r}") from None

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class StreamHandshake:
    """Identity a connecting stream claims: which path, which slot."""

    path_id: int
    stream_index: int
    stream_count: int

    def __post_init__(self):
        if not 1 <= self.stream_count <= MAX_STREAMS:
            raise UsageError(f"stream count out of range: {self.stream_count}")
        if not 0 <= self.stream_index < self.stream_count:
            raise UsageError(
                f"stream index {self.stream_index} outside count {self.stream_count}"
            )
        if not 0 <= self.path_id < 2**32:
            raise UsageError(f"path id out of range: {self.path_id}")

    def encode(self) -> bytes:
        return _HANDSHAKE.pack(
            HANDSHAKE_MAGIC,
            HANDSHAKE_VERSION,
            self.path_id,
            self.stream_index,
            self.stream_count,
        )


def parse_handshake(raw: bytes) -> StreamHandshake:
    """Decode and validate a 13-byte handshake.

    Raises ProtocolError on bad magic, version, or inconsistent fields.
    """
    if len(raw) != HANDSHAKE_SIZE:
        raise ProtocolError(f"handshake must be {HANDSHAKE_SIZE} bytes, got {len(raw)}")
    magic, version, path_id, index, count = _HANDSHAKE.unpack(raw)
    if magic != HANDSHAKE_MAGIC:
        raise ProtocolError(f"bad handshake magic {magic!r}")
    if version != HANDSHAKE_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        return StreamHandshake(path_id, index, count)
    except UsageError as exc:
        raise ProtocolError(str(exc)) from None


class Stream:
    """One open TCP connection of a path.

    Single-owner per direction: at most one sender and one receiver may
    use it concurrently (full duplex is fine, two senders are not).
    """

    def __init__(self, sock: socket.socket, handshake: StreamHandshake):
        self.sock = sock
        self.handshake = handshake
        self.window_bytes: int | None = None
        self.pacing_rate: float | None = None
        self.warnings: list[str] = []
        self._closed = False

    @property
    def stream_index(self) -> int:
        return self.handshake.stream_index

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self):
        if self._closed:
            return
        self._closed = True
        # shutdown() wakes threads blocked in recv/send on this fd; a bare
        # close() does not reliably interrupt them.
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def __repr__(self):
        state = "closed" if self._closed else "open"
        hs = self.handshake
        return f"<Stream path={hs.path_id} index={hs.stream_index}/{hs.stream_count} {state}>"


def resolve_host(name: str) -> str:
    """Resolve a hostname to its first IPv4 address as a dotted quad.

    Dotted-quad input is returned unchanged.
    """
    m = _DOTTED_QUAD.match(name)
    if m and all(int(part) <= 255 for part in m.groups()):
        return name
    try:
        infos = socket.getaddrinfo(name, None, socket.AF_INET, socket.SOCK_STREAM)
    except socket.gaierror as exc:
        raise UnresolvableHostError(f"cannot resolve {name!r}: {exc}") from None
    if not infos:
        raise UnresolvableHostError(f"no IPv4 address for {name!r}")
    return infos[0][4][0]


def _configure_socket(sock: socket.socket):
    # The library batches via chunks itself; never delay small writes.
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def _read_exact_raw(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes, or None if the peer closed first."""
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            return None
        buf.extend(part)
    return bytes(buf)


class StreamListener:
    """A bound listening socket that groups incoming connections into paths.

    One listener (one open port) serves a whole path; reusable across
    sessions, which the forwarder relies on.
    """

    def __init__(self, bind: "Endpoint | tuple[str, int]",
                 backlog: int = MAX_STREAMS + 16):
        # A plain (host, 0) tuple asks the OS for an ephemeral port.
        host, port = (bind.host, bind.port) if isinstance(bind, Endpoint) else bind
        self.bind = bind
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
            self._sock.listen(backlog)
        except OSError:
            self._sock.close()
            raise

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def close(self):
        self._sock.close()

    def accept_streams(
        self,
        expected_path: int | None,
        expected_count: int,
        timeout: float,
        idle_timeout: float | None = None,
    ) -> list[Stream]:
        """Collect ``expected_count`` handshaken streams for one path.

        With ``expected_path=None`` the first valid handshake fixes the
        path id and the rest must match it.  Connections carrying a wrong
        magic, version, or path id are closed and do not count.  A
        duplicate stream index is a protocol error.

        ``idle_timeout``, when given, bounds the wait for the *first*
        stream; ``timeout`` then starts once a path begins arriving.
        Long-lived acceptors poll that way without dropping a path whose
        streams straddle a poll boundary.
        """
        if not 1 <= expected_count <= MAX_STREAMS:
            raise UsageError(f"expected_count out of range: {expected_count}")
        # Poll mode restarts the completion clock once a path starts
        # arriving; the one-shot form keeps a single overall deadline.
        poll_mode = idle_timeout is not None
        deadline = time.monotonic() + (idle_timeout if poll_mode else timeout)
        started = False
        collected: dict[int, Stream] = {}
        path_id = expected_path
        try:
            while len(collected) < expected_count:
                if poll_mode and collected and not started:
                    started = True
                    deadline = time.monotonic() + timeout
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise AcceptTimeoutError(
                        f"{len(collected)}/{expected_count} streams arrived in time"
                    )
                self._sock.settimeout(remaining)
                try:
                    conn, _addr = self._sock.accept()
                except socket.timeout:
                    continue
                conn.settimeout(min(remaining, 10.0))
                try:
                    raw = _read_exact_raw(conn, HANDSHAKE_SIZE)
                except OSError:
                    conn.close()
                    continue
                if raw is None:
                    conn.close()  # closed before handshake (e.g. port probe)
                    continue
                try:
                    hs = parse_handshake(raw)
                except ProtocolError:
                    conn.close()
                    continue
                if (path_id is not None and hs.path_id != path_id) or (
                    hs.stream_count != expected_count
                ):
                    conn.close()
                    continue
                if hs.stream_index in collected:
                    conn.close()
                    raise ProtocolError(
                        f"duplicate stream index {hs.stream_index} for path {hs.path_id}"
                    )
                path_id = hs.path_id
                conn.settimeout(None)
                _configure_socket(conn)
                collected[hs.stream_index] = Stream(conn, hs)
        except BaseException:
            for stream in collected.values():
                stream.close()
            raise
        finally:
            self._sock.settimeout(None)
        return [collected[i] for i in range(expected_count)]


def listen_accept_streams(
    bind: Endpoint,
    expected_path: int | None,
    expected_count: int,
    timeout: float,
) -> list[Stream]:
    """One-shot accept: bind, collect one path's streams, close the port."""
    listener = StreamListener(bind)
    try:
        return listener.accept_streams(expected_path, expected_count, timeout)
    finally:
        listener.close()


def connect_streams(
    target: Endpoint,
    path_id: int,
    count: int,
    timeout: float,
) -> list[Stream]:
    """Open ``count`` connections to ``target`` and handshake each one.

    Partial success rolls back: on any failure every socket opened by
    this call is closed before the error propagates.
    """
    if not 1 <= count <= MAX_STREAMS:
        raise UsageError(f"stream count out of range: {count}")
    deadline = time.monotonic() + timeout
    streams: list[Stream] = []
    try:
        for index in range(count):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ConnectError(
                    f"timed out connecting stream {index}/{count} to {target}"
                )
            hs = StreamHandshake(path_id, index, count)
            try:
                sock = socket.create_connection(
                    (target.host, target.port), timeout=remaining
                )
                _configure_socket(sock)
                sock.sendall(hs.encode())
                sock.settimeout(None)
            except OSError as exc:
                raise ConnectError(f"connect to {target} failed: {exc}") from None
            streams.append(Stream(sock, hs))
    except BaseException:
        for stream in streams:
            stream.close()
        raise
    return streams


def pacing_delay(bytes_just_sent: int, rate: float) -> float:
    """Seconds a sender must yield after pushing ``bytes_just_sent`` at ``rate``."""
    if rate <= 0:
        raise UsageError(f"pacing rate must be positive, got {rate}")
    return bytes_just_sent / rate


def send_chunked(stream: Stream, data, chunk_size: int) -> int:
    """Write ``data`` to the stream in slices of at most ``chunk_size`` bytes.

    When the stream has a pacing rate, inter-chunk sleeps keep the
    long-run rate at or below it.  Returns the byte count written; a
    transport failure reports how many bytes actually went out.
    """
    if chunk_size <= 0:
        raise UsageError(f"chunk size must be positive, got {chunk_size}")
    view = memoryview(data)
    total = len(view)
    if total == 0:
        return 0
    rate = stream.pacing_rate
    start = time.monotonic()
    sent = 0
    while sent < total:
        end = min(sent + chunk_size, total)
        try:
            stream.sock.sendall(view[sent:end])
        except OSError as exc:
            raise TransportError(
                f"send failed after {sent} of {total} bytes: {exc}", bytes_done=sent
            ) from None
        sent = end
        if rate:
            # Sleep until the cumulative deadline; compensates jitter so the
            # long-run rate never exceeds the ceiling.
            target = start + pacing_delay(sent, rate)
            now = time.monotonic()
            if now < target:
                time.sleep(target - now)
    return sent


def recv_exact(stream: Stream, n: int, into) -> None:
    """Read exactly ``n`` bytes into the writable buffer ``into``.

    ``into`` must have capacity for at least ``n`` bytes.  If the peer
    closes early a TruncatedStreamError reports the bytes received.
    """
    view = memoryview(into)
    if view.readonly:
        raise UsageError("receive region must be writable")
    if len(view) < n:
        raise UsageError(f"receive region holds {len(view)} bytes, need {n}")
    got = 0
    while got < n:
        try:
            r = stream.sock.recv_into(view[got:n])
        except OSError as exc:
            raise TransportError(
                f"recv failed after {got} of {n} bytes: {exc}", bytes_done=got
            ) from None
        if r == 0:
            raise TruncatedStreamError(
                f"peer closed after {got} of {n} bytes", bytes_done=got
            )
        got += r


def recv_bytes(stream: Stream, n: int) -> bytes:
    """Allocate-and-fill convenience wrapper over recv_exact."""
    buf = bytearray(n)
    recv_exact(stream, n, buf)
    return bytes(buf)


def apply_window(stream: Stream, window: int) -> int:
    """Request OS send/receive buffers of ``window`` bytes on the stream.

    The OS may clamp the request; the granted value is recorded on the
    stream and returned.  Clamping is success.  An outright setsockopt
    failure is recorded as a warning and the stream stays usable.
    """
    if window <= 0:
        raise UsageError(f"window must be positive, got {window}")
    if stream.closed:
        raise UsageError("cannot set window on a closed stream")
    try:
        stream.sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, window)
        stream.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, window)
    except OSError as exc:
        stream.warnings.append(f"window request {window} failed: {exc}")
        return stream.window_bytes or 0
    try:
        granted = min(
            stream.sock.getsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF),
            stream.sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF),
        )
    except OSError:
        granted = window
    stream.window_bytes = granted
    return granted
