"""Multi-stream file copy (mpw-cp) and one-way directory gathering (datagather).

Files travel as length-prefixed records over a path:

    2 bytes BE path length | path (UTF-8) | 4 bytes BE mode | 8 bytes BE
    size | content

each wrapped in one dynamic frame.  Record paths are always relative
and may not contain ``..`` segments; sinks additionally confine writes
to their destination root.
"""

from __future__ import annotations

import argparse
import logging
import os
import posixpath
import shlex
import signal
import struct
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field

from .errors import MPWError, ProtocolError, UsageError
from .paths import DEFAULT_CHUNK_SIZE, PathConfig, PathRegistry
from .streams import Endpoint, resolve_host

log = logging.getLogger(__name__)

_FRAME_HEAD = struct.Struct(">H")  # path length
_FRAME_META = struct.Struct(">IQ")  # mode, content size
FILE_FRAME_CAP = 1 << 40  # dynamic-frame cap while moving files

_PORT_BANNER = "MPW-CP PORT"


def _check_relative(path: str) -> str:
    if not path:
        raise UsageError("file record path is empty")
    if posixpath.isabs(path) or path.startswith("/"):
        raise UsageError(f"file record path is absolute: {path!r}")
    parts = path.split("/")
    if any(part in ("..", "") for part in parts):
        raise UsageError(f"file record path escapes its root: {path!r}")
    return path


@dataclass(frozen=True)
class FileFrame:
    """One file on the wire: where it goes, its mode bits, its bytes."""

    relative_path: str
    mode: int
    content: bytes

    def __post_init__(self):
        _check_relative(self.relative_path)

    @property
    def size(self) -> int:
        return len(self.content)

    def encode(self) -> bytes:
        raw_path = self.relative_path.encode("utf-8")
        return b"".join((
            _FRAME_HEAD.pack(len(raw_path)),
            raw_path,
            _FRAME_META.pack(self.mode, len(self.content)),
            self.content,
        ))

    @classmethod
    def decode(cls, buf: bytes) -> "FileFrame":
        try:
            (path_len,) = _FRAME_HEAD.unpack_from(buf, 0)
            offset = _FRAME_HEAD.size
            raw_path = bytes(buf[offset : offset + path_len])
            if len(raw_path) != path_len:
                raise ProtocolError("file record truncated in path")
            offset += path_len
            mode, size = _FRAME_META.unpack_from(buf, offset)
            offset += _FRAME_META.size
            content = bytes(buf[offset : offset + size])
            if len(content) != size or offset + size != len(buf):
                raise ProtocolError(
                    f"file record size mismatch: header says {size}, "
                    f"frame carries {len(buf) - offset}"
                )
            return cls(raw_path.decode("utf-8"), mode, content)
        except (struct.error, UnicodeDecodeError, UsageError) as exc:
            raise ProtocolError(f"bad file record: {exc}") from None


def safe_child_path(root: str, relative: str) -> str:
    """Resolve ``relative`` under ``root``, refusing any escape.

    Rejects absolute paths, ``..`` segments, and symlink hops that leave
    the root.
    """
    _check_relative(relative)
    root_real = os.path.realpath(root)
    target = os.path.join(root, *relative.split("/"))
    parent_real = os.path.realpath(os.path.dirname(target))
    if parent_real != root_real and not parent_real.startswith(root_real + os.sep):
        raise UsageError(f"path {relative!r} leaves the destination root")
    return target


def write_file_record(frame: FileFrame, target: str):
    """Write a record's content to ``target`` atomically, applying its mode.

    Failures never leave a partial destination file behind.
    """
    directory = os.path.dirname(target) or "."
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(prefix=".mpw-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(frame.content)
        os.chmod(temp_path, frame.mode & 0o7777)
        os.replace(temp_path, target)
    except OSError:
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise


# -- manifests ---------------------------------------------------------------


@dataclass
class Manifest:
    """Recursive listing of regular files: path -> (size, mtime)."""

    entries: dict[str, tuple[int, float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def scan_manifest(root: str) -> Manifest:
    """List regular files under ``root`` with size and mtime.

    Symlinks are skipped; unreadable subtrees are skipped with a warning.
    """
    if not os.path.isdir(root):
        raise UsageError(f"not a directory: {root!r}")
    entries: dict[str, tuple[int, float]] = {}

    def on_error(err):
        log.warning("skipping unreadable %s: %s", getattr(err, "filename", "?"), err)

    for dirpath, dirnames, filenames in os.walk(root, onerror=on_error):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            if os.path.islink(full):
                continue
            try:
                st = os.stat(full)
            except OSError as exc:
                log.warning("skipping unreadable %s: %s", full, exc)
                continue
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            entries[rel] = (st.st_size, st.st_mtime)
    return Manifest(dict(sorted(entries.items())))


# -- mpw-cp ------------------------------------------------------------------


def split_file_spec(spec: str) -> tuple[str | None, str]:
    """Split scp-style ``host:path`` into (host or None, path)."""
    if ":" in spec:
        host, path = spec.split(":", 1)
        if host and path:
            return host, path
    return None, spec


def _path_config(streams: int, chunk: int) -> PathConfig:
    # Explicit user tuning; the autotuner would override -c.
    return PathConfig(stream_count=streams, chunk_size=chunk, autotune=False)


def mpwcp(source: str, dest: str, streams: int = 4,
          chunk: int = DEFAULT_CHUNK_SIZE, rsh: str = "ssh",
          connect_timeout: float = 30.0) -> None:
    """Copy one file between hosts over a multi-stream path.

    Exactly one of ``source``/``dest`` must use ``host:path`` syntax.
    The remote half is started through the remote shell command ``rsh``
    and announces its listen port on stdout; content and permission bits
    arrive byte-identical or the destination is left without a partial
    file.
    """
    src_host, src_path = split_file_spec(source)
    dst_host, dst_path = split_file_spec(dest)
    if (src_host is None) == (dst_host is None):
        raise UsageError("exactly one of SRC and DST must be remote (host:path)")
    pushing = dst_host is not None
    host = dst_host if pushing else src_host
    peer_mode = "recv" if pushing else "send"
    peer_file = dst_path if pushing else src_path

    if pushing and not os.path.isfile(src_path):
        raise UsageError(f"source file not found: {src_path!r}")

    peer_cmd = (
        f"mpw-cp --peer {peer_mode} --peer-file {shlex.quote(peer_file)} "
        f"--streams {streams} --chunk {chunk}"
    )
    proc = subprocess.Popen(
        shlex.split(rsh) + [host, peer_cmd],
        stdout=subprocess.PIPE,
        text=True,
    )
    registry = PathRegistry()
    path_id = None
    try:
        port = _read_port_banner(proc)
        path_id = registry.create_path(
            Endpoint(resolve_host(host), port), streams, "client",
            _path_config(streams, chunk), timeout=connect_timeout,
        )
        if pushing:
            st = os.stat(src_path)
            with open(src_path, "rb") as fh:
                content = fh.read()
            frame = FileFrame(os.path.basename(src_path), st.st_mode & 0o7777, content)
            registry.dsend(path_id, frame.encode())
        else:
            frame = FileFrame.decode(registry.drecv(path_id, max_frame=FILE_FRAME_CAP))
            target = dst_path
            if os.path.isdir(target):
                target = safe_child_path(target, posixpath.basename(frame.relative_path))
            write_file_record(frame, target)
        registry.barrier(path_id)  # peer enters only after its half succeeded
    except BaseException:
        proc.kill()
        raise
    finally:
        registry.finalize()
        proc.stdout.close()
        returncode = proc.wait()
    if returncode != 0:
        raise MPWError(f"remote file process exited with status {returncode}")


def _read_port_banner(proc: subprocess.Popen) -> int:
    for line in proc.stdout:
        line = line.strip()
        if line.startswith(_PORT_BANNER):
            try:
                return int(line[len(_PORT_BANNER):].strip())
            except ValueError:
                break
        log.info("remote: %s", line)
    raise MPWError("remote file process never announced its port")


def run_copy_peer(mode: str, file_path: str, streams: int, chunk: int,
                  bind_host: str = "0.0.0.0", accept_timeout: float = 60.0) -> int:
    """Remote half of mpw-cp: listen, announce the port, move one file."""
    if mode == "send" and not os.path.isfile(file_path):
        print(f"mpw-cp: no such file: {file_path}", file=sys.stderr)
        return 1
    registry = PathRegistry()
    try:
        listener = registry.listen((bind_host, 0), streams,
                                   _path_config(streams, chunk))
    except OSError as exc:
        print(f"mpw-cp: cannot listen: {exc}", file=sys.stderr)
        return 1
    try:
        print(f"{_PORT_BANNER} {listener.port}", flush=True)
        path_id = listener.accept(timeout=accept_timeout)
        if mode == "send":
            st = os.stat(file_path)
            with open(file_path, "rb") as fh:
                content = fh.read()
            frame = FileFrame(os.path.basename(file_path), st.st_mode & 0o7777,
                              content)
            registry.dsend(path_id, frame.encode())
        else:
            frame = FileFrame.decode(registry.drecv(path_id, max_frame=FILE_FRAME_CAP))
            target = file_path
            if os.path.isdir(target):
                target = safe_child_path(target, posixpath.basename(frame.relative_path))
            write_file_record(frame, target)
        registry.barrier(path_id)
        return 0
    except (MPWError, OSError) as exc:
        print(f"mpw-cp: {exc}", file=sys.stderr)
        return 1
    finally:
        listener.close()
        registry.finalize()


def mpwcp_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mpw-cp",
        description="Copy a file between hosts over parallel TCP streams "
                    "(scp-style host:path syntax, remote side via SSH).",
    )
    parser.add_argument("-n", "--streams", type=int, default=4,
                        help="parallel streams (default 4)")
    parser.add_argument("-c", "--chunk", type=int, default=DEFAULT_CHUNK_SIZE,
                        help="bytes per low-level send (default 8 MiB)")
    parser.add_argument("--rsh", default="ssh",
                        help="remote shell command used to start the far side")
    parser.add_argument("src", nargs="?")
    parser.add_argument("dst", nargs="?")
    # Internal flags for the remotely spawned half.
    parser.add_argument("--peer", choices=("send", "recv"), help=argparse.SUPPRESS)
    parser.add_argument("--peer-file", help=argparse.SUPPRESS)
    parser.add_argument("--bind", default="0.0.0.0", help=argparse.SUPPRESS)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING)
    if args.peer:
        if not args.peer_file:
            parser.error("--peer requires --peer-file")
        return run_copy_peer(args.peer, args.peer_file, args.streams, args.chunk,
                             bind_host=args.bind)
    if not args.src or not args.dst:
        parser.error("SRC and DST are required")
    try:
        mpwcp(args.src, args.dst, args.streams, args.chunk, args.rsh)
    except MPWError as exc:
        print(f"mpw-cp: {exc}", file=sys.stderr)
        return 1
    return 0


# -- datagather --------------------------------------------------------------


class DirGatherer:
    """Source half of datagather: push new or changed files each cycle.

    Change detection compares (size, mtime) against the state last
    transmitted; deletions are never propagated.  A failed send leaves
    the file marked unsent so the next cycle retries it.
    """

    def __init__(self, source_root: str, registry: PathRegistry, path_id: int):
        if not os.path.isdir(source_root):
            raise UsageError(f"not a directory: {source_root!r}")
        self.source_root = source_root
        self.registry = registry
        self.path_id = path_id
        self.cycles = 0
        self.frames_sent = 0
        self.payload_bytes = 0
        self._sent: dict[str, tuple[int, float]] = {}

    def sync_once(self) -> tuple[int, int]:
        """Run one scan+send cycle; returns (frames, payload bytes) moved."""
        manifest = scan_manifest(self.source_root)
        frames = 0
        payload = 0
        for rel, (size, mtime) in manifest.entries.items():
            if self._sent.get(rel) == (size, mtime):
                continue
            full = os.path.join(self.source_root, *rel.split("/"))
            try:
                st = os.stat(full)
                with open(full, "rb") as fh:
                    content = fh.read()
            except OSError as exc:
                log.warning("skipping %s: %s", rel, exc)
                continue
            frame = FileFrame(rel, st.st_mode & 0o7777, content)
            self.registry.dsend(self.path_id, frame.encode())
            self._sent[rel] = (size, mtime)
            frames += 1
            payload += len(content)
        self.cycles += 1
        self.frames_sent += frames
        self.payload_bytes += payload
        return frames, payload

    def run(self, poll_interval: float, stop: threading.Event | None = None,
            max_cycles: int | None = None):
        """Cycle until ``stop`` is set (or ``max_cycles`` reached)."""
        stop = stop or threading.Event()
        while not stop.is_set():
            self.sync_once()
            if max_cycles is not None and self.cycles >= max_cycles:
                return
            if stop.wait(timeout=poll_interval):
                return


def datagather_sync(source_root: str, registry: PathRegistry, path_id: int,
                    poll_interval: float = 2.0,
                    stop: threading.Event | None = None,
                    max_cycles: int | None = None) -> DirGatherer:
    """Convenience wrapper: gather ``source_root`` over an open path."""
    gatherer = DirGatherer(source_root, registry, path_id)
    gatherer.run(poll_interval, stop=stop, max_cycles=max_cycles)
    return gatherer


def gather_sink(dest_root: str, registry: PathRegistry, path_id: int) -> int:
    """Receive file records forever; returns the count once the peer closes.

    A record that fails safety checks or disk writes is skipped and
    logged; the stream itself stays consistent because the frame was
    already fully consumed.
    """
    if not os.path.isdir(dest_root):
        raise UsageError(f"not a directory: {dest_root!r}")
    received = 0
    while True:
        try:
            raw = registry.drecv(path_id, max_frame=FILE_FRAME_CAP)
        except (MPWError, OSError):
            return received
        try:
            frame = FileFrame.decode(raw)
            target = safe_child_path(dest_root, frame.relative_path)
            write_file_record(frame, target)
            received += 1
        except (ProtocolError, UsageError, OSError) as exc:
            log.warning("skipping bad or unwritable record: %s", exc)


def _establish(registry: PathRegistry, args, config: PathConfig,
               stop: threading.Event) -> int | None:
    """Connect or accept one path per the CLI transport flags."""
    if args.connect:
        endpoint = Endpoint.parse(args.connect)
        deadline = time.monotonic() + 30.0
        while not stop.is_set():
            try:
                return registry.create_path(endpoint, args.streams, "client",
                                            config, timeout=5.0)
            except MPWError:
                if time.monotonic() > deadline:
                    raise
                stop.wait(timeout=0.5)
        return None
    try:
        listener = registry.listen(("0.0.0.0", args.listen), args.streams, config)
    except OSError as exc:
        raise UsageError(f"cannot listen on port {args.listen}: {exc}") from None
    try:
        while not stop.is_set():
            try:
                return listener.accept(timeout=30.0, idle_timeout=0.5)
            except MPWError:
                continue
        return None
    finally:
        listener.close()


def datagather_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="datagather",
        description="Keep a remote directory updated with local changes, "
                    "one direction only.",
    )
    side = parser.add_mutually_exclusive_group(required=True)
    side.add_argument("--source", metavar="DIR", help="gather files from DIR")
    side.add_argument("--dest", metavar="DIR", help="write received files under DIR")
    transport = parser.add_mutually_exclusive_group(required=True)
    transport.add_argument("--connect", metavar="HOST:PORT")
    transport.add_argument("--listen", metavar="PORT", type=int)
    parser.add_argument("--interval", type=float, default=2.0,
                        help="seconds between source scans (default 2)")
    parser.add_argument("--streams", type=int, default=1)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    root = args.source or args.dest
    if not os.path.isdir(root):
        print(f"datagather: not a directory: {root}", file=sys.stderr)
        return 2

    stop = threading.Event()

    def handle_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)

    registry = PathRegistry()
    config = PathConfig(stream_count=args.streams, autotune=False)
    failures: list[str] = []

    def session_loop():
        while not stop.is_set():
            try:
                path_id = _establish(registry, args, config, stop)
            except MPWError as exc:
                failures.append(str(exc))
                return
            if path_id is None:
                return
            try:
                if args.source:
                    datagather_sync(args.source, registry, path_id,
                                    poll_interval=args.interval, stop=stop)
                else:
                    gather_sink(args.dest, registry, path_id)
            except (MPWError, OSError) as exc:
                log.warning("session ended: %s", exc)
            try:
                registry.destroy_path(path_id)
            except MPWError:
                pass

    # The worker does the blocking socket work so that a signal in the
    # main thread can always shut it down by closing the sockets.
    worker = threading.Thread(target=session_loop, daemon=True)
    worker.start()
    try:
        while worker.is_alive():
            if stop.wait(timeout=0.2):
                break
    finally:
        stop.set()
        registry.finalize()
        worker.join(timeout=5.0)
    if failures:
        print(f"datagather: {failures[0]}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(mpwcp_main())
