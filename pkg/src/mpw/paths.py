"""Path lifecycle and striped message passing across parallel TCP streams.

A *path* is an ordered bundle of 1-256 streams between two endpoints,
addressed by a small integer id.  Messages are striped into near-equal
contiguous segments, one per stream, moved concurrently so that a slow
stream does not serialize the rest.

Wire formats (bit-exact):
  dynamic frame   8-byte big-endian unsigned payload length on stream 0,
                  then the striped payload
  barrier token   8 bytes ``MPWBBAR1``
"""

from __future__ import annotations

import socket
import struct
import threading
from concurrent.futures import FIRST_EXCEPTION, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace

from . import streams as _streams
from .errors import (
    BarrierError,
    MPWError,
    NoSuchPathError,
    OversizeFrameError,
    PathBusyError,
    TransferFailedError,
    TransportError,
    UsageError,
)
from .streams import (
    MAX_STREAMS,
    Endpoint,
    Stream,
    StreamListener,
    apply_window,
    recv_exact,
    send_chunked,
)

DEFAULT_CHUNK_SIZE = 8 * 1024 * 1024
DEFAULT_DYNAMIC_CAP = 1024**3  # refuse dynamic frames above this unless overridden

BARRIER_TOKEN = b"MPWBBAR1"
_DYN_LEN = struct.Struct(">Q")

_RELAY_BUFSIZE = 256 * 1024


@dataclass(frozen=True)
class PathConfig:
    """Tunables of one path.

    ``stream_count`` is always caller-chosen; the autotuner may adjust
    the other knobs but never this one.
    """

    stream_count: int = 1
    chunk_size: int = DEFAULT_CHUNK_SIZE
    pacing_rate: float | None = None  # bytes/s ceiling per stream
    window: int | None = None  # requested TCP buffer size
    autotune: bool = True

    def __post_init__(self):
        if not 1 <= self.stream_count <= MAX_STREAMS:
            raise UsageError(f"stream count out of range: {self.stream_count}")
        if self.chunk_size < 1:
            raise UsageError(f"chunk size must be >= 1, got {self.chunk_size}")
        if self.pacing_rate is not None and self.pacing_rate <= 0:
            raise UsageError(f"pacing rate must be positive, got {self.pacing_rate}")
        if self.window is not None and self.window <= 0:
            raise UsageError(f"window must be positive, got {self.window}")


@dataclass(frozen=True)
class StripePlan:
    """Per-stream segment lengths for one message, ordered by stream index."""

    segment_lengths: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.segment_lengths)

    def regions(self, buffer) -> list[memoryview]:
        """Slice ``buffer`` into the plan's contiguous per-stream segments."""
        view = memoryview(buffer)
        out = []
        offset = 0
        for length in self.segment_lengths:
            out.append(view[offset : offset + length])
            offset += length
        return out


def stripe(total_len: int, stream_count: int) -> StripePlan:
    """Split ``total_len`` bytes evenly over ``stream_count`` streams.

    The first ``total_len mod stream_count`` segments carry one byte
    more than the rest, so lengths differ by at most one and sum to the
    total.
    """
    if stream_count < 1:
        raise UsageError(f"stream count must be >= 1, got {stream_count}")
    if total_len < 0:
        raise UsageError(f"negative message length: {total_len}")
    base, extra = divmod(total_len, stream_count)
    lengths = (base + 1,) * extra + (base,) * (stream_count - extra)
    return StripePlan(lengths)


class TransferHandle:
    """Identifier for one in-flight non-blocking exchange."""

    def __init__(self, handle_id: int, path_id: int):
        self.handle_id = handle_id
        self.path_id = path_id
        self.state = "in_flight"  # -> finished | failed, never backwards
        self.result: bytes | None = None
        self.error: BaseException | None = None
        self._done = threading.Event()
        self._wait_claim = threading.Lock()  # first wait() takes it, for good

    def _finish(self, result: bytes | None):
        self.result = result
        self.state = "finished"
        self._done.set()

    def _fail(self, error: BaseException):
        self.error = error
        self.state = "failed"
        self._done.set()

    def __repr__(self):
        return f"<TransferHandle {self.handle_id} path={self.path_id} {self.state}>"


class Path:
    """Internal state of one open path (streams, tunables, caches)."""

    def __init__(self, path_id: int, config: PathConfig, streams: list[Stream]):
        self.id = path_id
        self.config = config
        self.streams = streams
        self.state = "open"  # -> failed | closed
        self.io_lock = threading.Lock()  # one logical transfer at a time
        self.executor = ThreadPoolExecutor(
            max_workers=2 * config.stream_count,
            thread_name_prefix=f"mpw-path{path_id}",
        )
        self._dyn_cache = bytearray()

    def dyn_buffer(self, n: int) -> memoryview:
        """Cached dynamic-receive buffer, grown geometrically, never shrunk."""
        if len(self._dyn_cache) < n:
            new_size = max(4096, len(self._dyn_cache))
            while new_size < n:
                new_size *= 2
            self._dyn_cache = bytearray(new_size)
        return memoryview(self._dyn_cache)[:n]

    def mark_failed(self):
        if self.state == "open":
            self.state = "failed"
        for stream in self.streams:
            stream.close()

    def close(self):
        self.state = "closed"
        for stream in self.streams:
            stream.close()
        self.executor.shutdown(wait=False)
        self._dyn_cache = bytearray()


class PathListener:
    """Server half of path creation: one bound port accepting whole paths."""

    def __init__(self, registry: "PathRegistry", bind, streams: int,
                 config: PathConfig):
        if not 1 <= streams <= MAX_STREAMS:
            raise UsageError(f"stream count out of range: {streams}")
        self._registry = registry
        self._config = replace(config, stream_count=streams)
        self._listener = StreamListener(bind)
        self.bind = bind

    @property
    def port(self) -> int:
        return self._listener.port

    def accept(self, timeout: float = 30.0, idle_timeout: float | None = None) -> int:
        """Accept one full path; returns its local path id."""
        streams = self._listener.accept_streams(
            None, self._config.stream_count, timeout, idle_timeout=idle_timeout
        )
        return self._registry._adopt_streams(streams, self._config)

    def close(self):
        self._listener.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PathRegistry:
    """A self-contained instance of the message-passing library.

    Holds the live path table, the non-blocking transfer handles, and
    the dynamic-frame size cap.  The module-level API in ``mpw`` wraps a
    default registry; tests may build isolated ones.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._paths: dict[int, Path] = {}
        self._handles: dict[int, TransferHandle] = {}
        self._next_path_id = 0  # never reused within the process lifetime
        self._next_handle_id = 0
        self.dynamic_frame_cap = DEFAULT_DYNAMIC_CAP

    # -- lifecycle -----------------------------------------------------

    def init(self):
        """Explicit initializer for API symmetry with finalize; idempotent."""
        return None

    def listen(self, bind, streams: int = 1,
               config: PathConfig | None = None) -> PathListener:
        """Bind a port now, accept paths later (two-phase server setup).

        ``bind`` is an Endpoint or a plain ``(host, port)`` tuple; port 0
        picks an ephemeral port, readable via the listener's ``port``.
        """
        return PathListener(self, bind, streams, config or PathConfig())

    def create_path(self, remote: Endpoint, streams: int, role: str,
                    config: PathConfig | None = None,
                    timeout: float = 30.0) -> int:
        """Open a path of ``streams`` connections to/from ``remote``.

        ``role`` is ``"client"`` (connect out) or ``"server"`` (bind
        ``remote`` and wait).  When the config enables autotuning, a
        post-connect probe adjusts chunk size, window, and pacing; both
        sides of the path must agree on the autotune flag because the
        probe exchanges traffic.
        """
        if not 1 <= streams <= MAX_STREAMS:
            raise UsageError(f"stream count out of range: {streams}")
        if role not in ("client", "server"):
            raise UsageError(f"role must be 'client' or 'server', got {role!r}")
        cfg = replace(config or PathConfig(), stream_count=streams)
        if role == "client":
            wire_id = self._allocate_path_id()
            stream_list = _streams.connect_streams(remote, wire_id, streams, timeout)
            path_id = self._adopt_streams(stream_list, cfg, path_id=wire_id)
        else:
            listener = PathListener(self, remote, streams, cfg)
            try:
                path_id = listener.accept(timeout)
            finally:
                listener.close()
        return path_id

    def _allocate_path_id(self) -> int:
        with self._lock:
            path_id = self._next_path_id
            self._next_path_id += 1
        return path_id

    def _adopt_streams(self, stream_list: list[Stream], config: PathConfig,
                       path_id: int | None = None) -> int:
        if path_id is None:
            path_id = self._allocate_path_id()
        path = Path(path_id, config, stream_list)
        if config.window is not None:
            for stream in stream_list:
                apply_window(stream, config.window)
        if config.pacing_rate is not None:
            for stream in stream_list:
                stream.pacing_rate = config.pacing_rate
        with self._lock:
            self._paths[path_id] = path
        if config.autotune:
            from .autotune import autotune_path  # avoids an import cycle

            try:
                autotune_path(self, path_id)
            except MPWError:
                self.destroy_path(path_id)
                raise
        return path_id

    def destroy_path(self, path_id: int):
        """Close every stream and retire the id; in-flight handles fail."""
        with self._lock:
            path = self._paths.pop(path_id, None)
        if path is None:
            raise NoSuchPathError(f"no such path: {path_id}")
        path.close()

    def finalize(self):
        """Destroy all paths and release cached buffers; idempotent."""
        with self._lock:
            paths = list(self._paths.values())
            self._paths.clear()
            self._handles.clear()
        for path in paths:
            path.close()

    def _get_open(self, path_id: int) -> Path:
        with self._lock:
            path = self._paths.get(path_id)
        if path is None:
            raise NoSuchPathError(f"no such path: {path_id}")
        if path.state != "open":
            raise TransportError(f"path {path_id} has failed")
        return path

    def path_config(self, path_id: int) -> PathConfig:
        return self._get_open(path_id).config

    def live_paths(self) -> list[int]:
        with self._lock:
            return sorted(self._paths)

    # -- tuning ----------------------------------------------------------

    def configure(self, path_id: int, setting: str, value):
        """Change one tunable; subsequent transfers observe the new value."""
        path = self._get_open(path_id)
        if setting == "chunk_size":
            if not isinstance(value, int) or value < 1:
                raise UsageError(f"chunk_size must be a positive int, got {value!r}")
            path.config = replace(path.config, chunk_size=value)
        elif setting == "pacing_rate":
            if value is not None and (not isinstance(value, (int, float)) or value <= 0):
                raise UsageError(f"pacing_rate must be positive or None, got {value!r}")
            path.config = replace(path.config, pacing_rate=value)
            for stream in path.streams:
                stream.pacing_rate = value
        elif setting == "window":
            if not isinstance(value, int) or value <= 0:
                raise UsageError(f"window must be a positive int, got {value!r}")
            path.config = replace(path.config, window=value)
            for stream in path.streams:
                apply_window(stream, value)
        elif setting == "autotune":
            if not isinstance(value, bool):
                raise UsageError(f"autotune must be a bool, got {value!r}")
            path.config = replace(path.config, autotune=value)
        else:
            raise UsageError(f"unknown setting {setting!r}")

    # -- striped transfers -------------------------------------------------

    def send(self, path_id: int, data):
        """Stripe ``data`` over the path's streams and send concurrently."""
        path = self._get_open(path_id)
        with path.io_lock:
            self._send_locked(path, data)

    def recv(self, path_id: int, expected_len: int) -> bytes:
        """Receive a message of an agreed fixed length (no length header)."""
        path = self._get_open(path_id)
        with path.io_lock:
            return self._recv_locked(path, expected_len)

    def send_recv(self, path_id: int, out, expected_in: int) -> bytes:
        """Full-duplex fixed-size exchange: send ∥ recv on the same streams."""
        path = self._get_open(path_id)
        with path.io_lock:
            return self._send_recv_locked(path, out, expected_in)

    def dsend(self, path_id: int, data):
        """Dynamic-size send: 8-byte length prefix on stream 0, then stripes."""
        path = self._get_open(path_id)
        with path.io_lock:
            futures = self._start_dynamic_send(path, data)
            self._await_stream_tasks(path, futures)

    def drecv(self, path_id: int, max_frame: int | None = None) -> bytes:
        """Dynamic-size receive: peer announces the length on stream 0."""
        path = self._get_open(path_id)
        with path.io_lock:
            return self._dynamic_recv_locked(path, max_frame)

    def dsend_recv(self, path_id: int, out, max_frame: int | None = None) -> bytes:
        """Full-duplex dynamic exchange for buffers of unknown size."""
        path = self._get_open(path_id)
        with path.io_lock:
            send_futures = self._start_dynamic_send(path, out)
            try:
                result = self._dynamic_recv_locked(path, max_frame,
                                                   extra_futures=send_futures)
            except BaseException:
                # The failure paths above close the streams, which unblocks
                # any still-running send tasks; drain them before leaving.
                wait(send_futures)
                raise
            return result

    def barrier(self, path_id: int):
        """Two-party sync: neither side returns before both have entered."""
        path = self._get_open(path_id)
        with path.io_lock:
            self._barrier_locked(path)

    def cycle(self, recv_path_id: int, send_path_id: int, out,
              expected_in: int) -> bytes:
        """Send over one path while receiving from another, concurrently."""
        send_path, recv_path = self._lock_pair(send_path_id, recv_path_id)
        try:
            out_plan = stripe(len(memoryview(out)), send_path.config.stream_count)
            send_futs = self._submit_sends(send_path, out_plan.regions(out))
            buf = bytearray(expected_in)
            in_plan = stripe(expected_in, recv_path.config.stream_count)
            recv_futs = self._submit_recvs(recv_path, in_plan.regions(buf))
            self._await_cycle(send_path, send_futs, recv_path, recv_futs)
            return bytes(buf)
        finally:
            send_path.io_lock.release()
            recv_path.io_lock.release()

    def dcycle(self, recv_path_id: int, send_path_id: int, out,
               max_frame: int | None = None) -> bytes:
        """As cycle, but with dynamic length framing in both directions."""
        send_path, recv_path = self._lock_pair(send_path_id, recv_path_id)
        try:
            send_futs = self._start_dynamic_send(send_path, out)
            n = self._read_dynamic_length(recv_path, max_frame)
            region = recv_path.dyn_buffer(n)
            in_plan = stripe(n, recv_path.config.stream_count)
            recv_futs = self._submit_recvs(recv_path, in_plan.regions(region))
            self._await_cycle(send_path, send_futs, recv_path, recv_futs)
            return bytes(region)
        finally:
            send_path.io_lock.release()
            recv_path.io_lock.release()

    # -- non-blocking transfers ---------------------------------------------

    def isend_recv(self, path_id: int, out, expected_in: int) -> TransferHandle:
        """Start a send_recv in the background; returns immediately."""
        path = self._get_open(path_id)
        if not path.io_lock.acquire(blocking=False):
            raise PathBusyError(f"a transfer is already in flight on path {path_id}")
        with self._lock:
            handle = TransferHandle(self._next_handle_id, path_id)
            self._next_handle_id += 1
            self._handles[handle.handle_id] = handle

        def run():
            try:
                result = self._send_recv_locked(path, out, expected_in)
            except BaseException as exc:
                handle._fail(exc)
            else:
                handle._finish(result)
            finally:
                path.io_lock.release()

        thread = threading.Thread(
            target=run, name=f"mpw-transfer{handle.handle_id}", daemon=True
        )
        thread.start()
        return handle

    def _resolve_handle(self, handle) -> TransferHandle:
        if isinstance(handle, TransferHandle):
            return handle
        with self._lock:
            found = self._handles.get(handle)
        if found is None:
            raise UsageError(f"unknown transfer handle: {handle!r}")
        return found

    def has_finished(self, handle) -> bool:
        """True once the transfer reached finished or failed; monotone."""
        return self._resolve_handle(handle).state in ("finished", "failed")

    def wait(self, handle) -> bytes:
        """Block until the transfer completes; consumes the handle."""
        h = self._resolve_handle(handle)
        if not h._wait_claim.acquire(blocking=False):
            raise UsageError(f"handle {h.handle_id} already waited on")
        h._done.wait()
        if h.state == "failed":
            raise TransferFailedError(
                f"transfer {h.handle_id} on path {h.path_id} failed: {h.error}"
            )
        return h.result if h.result is not None else b""

    # -- relay ---------------------------------------------------------------

    def relay(self, path_a: int, path_b: int):
        """Forward all traffic between two equal-width paths until closed.

        Stream i of one path is pumped to stream i of the other in both
        directions, byte-for-byte.  Per-direction EOF propagates as a
        half-close; when every pump has drained, both paths are
        destroyed and the call returns.
        """
        if path_a == path_b:
            raise UsageError("relay requires two distinct paths")
        a = self._get_open(path_a)
        b = self._get_open(path_b)
        if a.config.stream_count != b.config.stream_count:
            raise UsageError(
                f"relay requires equal stream counts "
                f"({a.config.stream_count} vs {b.config.stream_count})"
            )
        with a.io_lock, b.io_lock:
            pumps = []
            for sa, sb in zip(a.streams, b.streams):
                pumps.append(threading.Thread(
                    target=_pump, args=(sa, sb), daemon=True,
                    name=f"mpw-relay{path_a}to{path_b}s{sa.stream_index}"))
                pumps.append(threading.Thread(
                    target=_pump, args=(sb, sa), daemon=True,
                    name=f"mpw-relay{path_b}to{path_a}s{sb.stream_index}"))
            for t in pumps:
                t.start()
            for t in pumps:
                t.join()
        for pid in (path_a, path_b):
            try:
                self.destroy_path(pid)
            except NoSuchPathError:
                pass

    # -- internals -------------------------------------------------------

    def _lock_pair(self, send_path_id: int, recv_path_id: int) -> tuple[Path, Path]:
        if send_path_id == recv_path_id:
            raise UsageError("cycle requires two distinct paths")
        send_path = self._get_open(send_path_id)
        recv_path = self._get_open(recv_path_id)
        # Consistent global order prevents lock cycles between concurrent calls.
        for path in sorted((send_path, recv_path), key=lambda p: p.id):
            path.io_lock.acquire()
        return send_path, recv_path

    def _submit_sends(self, path: Path, regions: list[memoryview]) -> list[Future]:
        chunk = path.config.chunk_size
        return [
            path.executor.submit(send_chunked, stream, region, chunk)
            for stream, region in zip(path.streams, regions)
            if len(region) > 0
        ]

    def _submit_recvs(self, path: Path, regions: list[memoryview]) -> list[Future]:
        return [
            path.executor.submit(recv_exact, stream, len(region), region)
            for stream, region in zip(path.streams, regions)
            if len(region) > 0
        ]

    def _await_stream_tasks(self, path: Path, futures: list[Future]):
        if not futures:
            return
        done, _ = wait(futures, return_when=FIRST_EXCEPTION)
        first_error = None
        for fut in done:
            exc = fut.exception()
            if exc is not None:
                first_error = exc
                break
        if first_error is None:
            return
        # Closing the streams unblocks the remaining per-stream tasks.
        path.mark_failed()
        wait(futures)
        raise TransportError(f"path {path.id} transfer failed: {first_error}")

    def _await_cycle(self, send_path: Path, send_futs: list[Future],
                     recv_path: Path, recv_futs: list[Future]):
        try:
            self._await_stream_tasks(send_path, send_futs)
        except TransportError:
            recv_path.mark_failed()
            wait(recv_futs)
            raise
        self._await_stream_tasks(recv_path, recv_futs)

    def _send_locked(self, path: Path, data):
        plan = stripe(len(memoryview(data)), path.config.stream_count)
        self._await_stream_tasks(path, self._submit_sends(path, plan.regions(data)))

    def _recv_locked(self, path: Path, expected_len: int) -> bytes:
        if expected_len < 0:
            raise UsageError(f"negative receive length: {expected_len}")
        buf = bytearray(expected_len)
        plan = stripe(expected_len, path.config.stream_count)
        self._await_stream_tasks(path, self._submit_recvs(path, plan.regions(buf)))
        return bytes(buf)

    def _send_recv_locked(self, path: Path, out, expected_in: int) -> bytes:
        if expected_in < 0:
            raise UsageError(f"negative receive length: {expected_in}")
        out_plan = stripe(len(memoryview(out)), path.config.stream_count)
        buf = bytearray(expected_in)
        in_plan = stripe(expected_in, path.config.stream_count)
        futures = self._submit_sends(path, out_plan.regions(out))
        futures += self._submit_recvs(path, in_plan.regions(buf))
        self._await_stream_tasks(path, futures)
        return bytes(buf)

    def _start_dynamic_send(self, path: Path, data) -> list[Future]:
        """Write the length prefix on stream 0, then submit segment sends.

        The prefix goes out inline before any stream-0 segment task is
        queued, so same-socket ordering is preserved.
        """
        view = memoryview(data)
        try:
            path.streams[0].sock.sendall(_DYN_LEN.pack(len(view)))
        except OSError as exc:
            path.mark_failed()
            raise TransportError(f"path {path.id} length prefix failed: {exc}") from None
        plan = stripe(len(view), path.config.stream_count)
        return self._submit_sends(path, plan.regions(data))

    def _read_dynamic_length(self, path: Path, max_frame: int | None) -> int:
        cap = max_frame if max_frame is not None else self.dynamic_frame_cap
        header = bytearray(_DYN_LEN.size)
        recv_exact(path.streams[0], _DYN_LEN.size, header)
        (n,) = _DYN_LEN.unpack(bytes(header))
        if n > cap:
            path.mark_failed()
            raise OversizeFrameError(
                f"peer advertised {n} bytes, cap is {cap}"
            )
        return n

    def _dynamic_recv_locked(self, path: Path, max_frame: int | None,
                             extra_futures: list[Future] | None = None) -> bytes:
        n = self._read_dynamic_length(path, max_frame)
        region = path.dyn_buffer(n)
        plan = stripe(n, path.config.stream_count)
        futures = list(extra_futures) if extra_futures else []
        futures += self._submit_recvs(path, plan.regions(region))
        self._await_stream_tasks(path, futures)
        return bytes(region)

    def _barrier_locked(self, path: Path):
        stream = path.streams[0]
        try:
            stream.sock.sendall(BARRIER_TOKEN)
            token = bytearray(len(BARRIER_TOKEN))
            recv_exact(stream, len(BARRIER_TOKEN), token)
        except (TransportError, OSError) as exc:
            path.mark_failed()
            raise BarrierError(f"barrier on path {path.id} failed: {exc}") from None
        if bytes(token) != BARRIER_TOKEN:
            path.mark_failed()
            raise BarrierError(
                f"barrier on path {path.id} got foreign token {bytes(token)!r}"
            )


def _pump(src: Stream, dst: Stream):
    """Copy bytes src -> dst until EOF or error, then half-close dst."""
    try:
        while True:
            data = src.sock.recv(_RELAY_BUFSIZE)
            if not data:
                break
            dst.sock.sendall(data)
    except OSError:
        pass
    finally:
        try:
            dst.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
