"""Built-in test programs and the two-endpoint throughput benchmark.

Three entry points ship with the library: a dependency-free unit test
run and a loopback functional test run (both argument-free), plus
``mpwtest``, a benchmark started manually on both endpoints that
reports per-direction throughput and round-trip time as TSV.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import struct
import sys
import threading
import time
import zlib
from dataclasses import dataclass

from . import autotune as _autotune
from .errors import MPWError, ProtocolError, UsageError
from .filetools import FileFrame
from .paths import BARRIER_TOKEN, PathConfig, PathRegistry, stripe
from .streams import Endpoint, StreamHandshake, pacing_delay, parse_handshake

DEFAULT_REPS = 20  # repetitions per direction
DEFAULT_SIZES = (64 * 1024 * 1024,)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchResult:
    """One benchmark row: what was moved and how fast."""

    message_size: int
    stream_count: int
    repetitions: int
    mean_throughput: float  # bytes/s, this endpoint's send direction
    mean_rtt: float  # seconds
    min_throughput: float
    max_throughput: float

    def tsv(self) -> str:
        return "\t".join((
            str(self.message_size),
            str(self.stream_count),
            str(self.repetitions),
            f"{self.mean_throughput:.0f}",
            f"{self.min_throughput:.0f}",
            f"{self.max_throughput:.0f}",
            f"{self.mean_rtt:.6f}",
        ))


TSV_HEADER = ("# message_bytes\tstreams\treps\tmean_Bps\tmin_Bps\tmax_Bps"
              "\tmean_rtt_s")


def make_payload(size: int, label: str) -> bytes:
    """Deterministic pseudo-random bytes both endpoints can regenerate."""
    if size == 0:
        return b""
    block = hashlib.sha256(label.encode()).digest()
    reps = size // len(block) + 1
    return (block * reps)[:size]


# -- unit tests ---------------------------------------------------------------


def _check_stripe():
    assert stripe(10, 4).segment_lengths == (3, 3, 2, 2)
    assert stripe(7, 1).segment_lengths == (7,)
    assert stripe(5, 8).segment_lengths == (1, 1, 1, 1, 1, 0, 0, 0)
    for total in (0, 1, 17, 999):
        for count in (1, 3, 256):
            plan = stripe(total, count)
            assert sum(plan.segment_lengths) == total
            assert max(plan.segment_lengths) - min(plan.segment_lengths) <= 1


def _check_pacing():
    assert pacing_delay(0, 123.0) == 0.0
    assert pacing_delay(1024**2, 1024**2) == 1.0
    assert pacing_delay(8 * 1024**2, 16 * 1024**2) == 0.5
    a, b, rate = 12345, 67890, 777.0
    assert abs(pacing_delay(a + b, rate)
               - (pacing_delay(a, rate) + pacing_delay(b, rate))) < 1e-9


def _check_handshake():
    hs = StreamHandshake(path_id=7, stream_index=3, stream_count=8)
    raw = hs.encode()
    assert len(raw) == 13
    assert parse_handshake(raw) == hs
    for bad in (b"XXXX" + raw[4:], raw[:4] + b"\x02" + raw[5:], raw[:-1]):
        try:
            parse_handshake(bad)
        except ProtocolError:
            pass
        else:
            raise AssertionError(f"bad handshake accepted: {bad!r}")


def _check_framing():
    assert struct.pack(">Q", 12) == b"\x00" * 7 + b"\x0c"
    assert len(BARRIER_TOKEN) == 8
    frame = FileFrame("a/b.txt", 0o644, b"hello")
    assert FileFrame.decode(frame.encode()) == frame
    try:
        FileFrame.decode(frame.encode()[:-1])
    except ProtocolError:
        pass
    else:
        raise AssertionError("truncated file record accepted")


def run_unit_tests() -> int:
    """Self-contained checks of the pure pieces; no sockets, no arguments."""
    checks = [
        ("stripe split rule", _check_stripe),
        ("pacing delay", _check_pacing),
        ("stream handshake", _check_handshake),
        ("framing encode/decode", _check_framing),
    ]
    failures = 0
    for name, check in checks:
        try:
            check()
        except Exception as exc:  # report, keep going
            failures += 1
            print(f"FAIL - {name}: {exc}")
        else:
            print(f"ok - {name}")
    print(f"{len(checks) - failures}/{len(checks)} unit checks passed")
    return 1 if failures else 0


# -- concurrent functional tests ----------------------------------------------


def _loopback_pair(registry: PathRegistry, streams: int = 1,
                   config: PathConfig | None = None) -> tuple[int, int]:
    """Open a connected client/server path pair inside one process."""
    config = config or PathConfig(autotune=False)
    listener = registry.listen(("127.0.0.1", 0), streams, config)
    result: dict[str, int] = {}
    errors: list[BaseException] = []

    def connect():
        try:
            result["client"] = registry.create_path(
                Endpoint("127.0.0.1", listener.port), streams, "client", config
            )
        except BaseException as exc:
            errors.append(exc)

    t = threading.Thread(target=connect, daemon=True)
    t.start()
    try:
        server_id = listener.accept(timeout=10.0)
    finally:
        t.join(timeout=10.0)
        listener.close()
    if errors:
        raise errors[0]
    return result["client"], server_id


def _both(fn_a, fn_b) -> tuple:
    """Run two endpoint closures concurrently, re-raising their failures."""
    out: list = [None, None]
    errors: list[BaseException] = []

    def call(i, fn):
        try:
            out[i] = fn()
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=call, args=(i, fn), daemon=True)
               for i, fn in enumerate((fn_a, fn_b))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=60.0)
    if any(t.is_alive() for t in threads):
        raise TimeoutError("endpoint closure hung")
    if errors:
        raise errors[0]
    return tuple(out)


def _scenario_send_recv(registry: PathRegistry):
    a, b = _loopback_pair(registry, streams=4)
    data = make_payload(3 * 1024 * 1024 + 17, "send-recv")
    _both(lambda: registry.send(a, data),
          lambda: registry.recv(b, len(data)))
    got, _ = _both(lambda: registry.recv(a, len(data)),
                   lambda: registry.send(b, data))
    assert got == data


def _scenario_send_recv_duplex(registry: PathRegistry):
    a, b = _loopback_pair(registry, streams=2)
    out_a = make_payload(1024 * 1024, "duplex-a")
    out_b = make_payload(512 * 1024 + 3, "duplex-b")
    got_a, got_b = _both(
        lambda: registry.send_recv(a, out_a, len(out_b)),
        lambda: registry.send_recv(b, out_b, len(out_a)),
    )
    assert got_a == out_b and got_b == out_a


def _scenario_dynamic(registry: PathRegistry):
    a, b = _loopback_pair(registry, streams=3)
    out_a = make_payload(5, "dyn-a")
    out_b = make_payload(123456, "dyn-b")
    got_a, got_b = _both(
        lambda: registry.dsend_recv(a, out_a),
        lambda: registry.dsend_recv(b, out_b),
    )
    assert got_a == out_b and got_b == out_a
    got_a, got_b = _both(
        lambda: registry.dsend_recv(a, b""),
        lambda: registry.dsend_recv(b, b""),
    )
    assert got_a == b"" and got_b == b""


def _scenario_barrier(registry: PathRegistry):
    a, b = _loopback_pair(registry)
    entered = []

    def late():
        time.sleep(0.05)
        entered.append(time.monotonic())
        registry.barrier(b)

    returned, _ = _both(
        lambda: (registry.barrier(a), time.monotonic())[1], late
    )
    assert returned >= entered[0]


def _scenario_cycle_ring(registry: PathRegistry):
    ab = _loopback_pair(registry)
    bc = _loopback_pair(registry)
    ca = _loopback_pair(registry)
    tokens = [make_payload(1024, f"ring-{i}") for i in range(3)]
    results: list[bytes | None] = [None, None, None]

    # Node n sends on its outgoing client path, receives from its server
    # side of the upstream node's path.
    plan = [
        (0, ca[1], ab[0]),  # A: recv from C, send to B
        (1, ab[1], bc[0]),  # B: recv from A, send to C
        (2, bc[1], ca[0]),  # C: recv from B, send to A
    ]

    def node(n, recv_path, send_path):
        results[n] = registry.cycle(recv_path, send_path, tokens[n], 1024)

    threads = [threading.Thread(target=node, args=spec, daemon=True)
               for spec in plan]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30.0)
    assert results[0] == tokens[2] and results[1] == tokens[0] \
        and results[2] == tokens[1]


def _scenario_nonblocking(registry: PathRegistry):
    a, b = _loopback_pair(registry, streams=2)
    out_a = make_payload(2 * 1024 * 1024, "nb-a")
    out_b = make_payload(1024 * 1024, "nb-b")
    ha = registry.isend_recv(a, out_a, len(out_b))
    hb = registry.isend_recv(b, out_b, len(out_a))
    got_a = registry.wait(ha)
    got_b = registry.wait(hb)
    assert registry.has_finished(ha) and registry.has_finished(hb)
    blocking_a, blocking_b = _both(
        lambda: registry.send_recv(a, out_a, len(out_b)),
        lambda: registry.send_recv(b, out_b, len(out_a)),
    )
    assert got_a == blocking_a == out_b
    assert got_b == blocking_b == out_a


def _scenario_relay(registry: PathRegistry):
    a, m_in = _loopback_pair(registry, streams=2)
    m_out, b = _loopback_pair(registry, streams=2)
    relay_thread = threading.Thread(
        target=registry.relay, args=(m_in, m_out), daemon=True
    )
    relay_thread.start()
    data = make_payload(8 * 1024 * 1024, "relay")
    _, got = _both(lambda: registry.send(a, data),
                   lambda: registry.recv(b, len(data)))
    assert got == data
    registry.destroy_path(a)
    registry.destroy_path(b)
    relay_thread.join(timeout=30.0)
    assert not relay_thread.is_alive(), "relay failed to unwind"


def run_concurrent_tests() -> int:
    """Loopback functional sweep with both endpoints in-process; no arguments."""
    scenarios = [
        ("fixed-size send/recv", _scenario_send_recv),
        ("full-duplex exchange", _scenario_send_recv_duplex),
        ("dynamic-size exchange", _scenario_dynamic),
        ("barrier", _scenario_barrier),
        ("cycle ring", _scenario_cycle_ring),
        ("non-blocking transfers", _scenario_nonblocking),
        ("relay", _scenario_relay),
    ]
    failures = 0
    for name, scenario in scenarios:
        registry = PathRegistry()
        outcome: list = []

        def run_one(s=scenario):
            try:
                s(registry)
            except BaseException as exc:
                outcome.append(exc)

        worker = threading.Thread(target=run_one, daemon=True)
        worker.start()
        worker.join(timeout=60.0)
        if worker.is_alive():
            registry.finalize()  # close sockets to unhang the worker
            worker.join(timeout=5.0)
            failures += 1
            print(f"FAIL - {name}: timed out")
        elif outcome:
            failures += 1
            print(f"FAIL - {name}: {outcome[0]!r}")
        else:
            print(f"ok - {name}")
        registry.finalize()
    print(f"{len(scenarios) - failures}/{len(scenarios)} concurrent checks passed")
    return 1 if failures else 0


# -- benchmark ----------------------------------------------------------------


def run_benchmark(role: str, peer: Endpoint, sizes: list[int] | None = None,
                  streams: int = 1, reps: int = DEFAULT_REPS,
                  use_autotune: bool = False, out=sys.stdout,
                  registry: PathRegistry | None = None) -> list[BenchResult]:
    """Exchange each message size ``reps`` times and report the rates.

    Both endpoints must be started with matching sizes, streams, and
    repetitions.  Every repetition verifies a rolling checksum of the
    received bytes; a mismatch aborts the run.
    """
    sizes = list(DEFAULT_SIZES if sizes is None else sizes)
    if not sizes:
        raise UsageError("at least one message size is required")
    if any(s < 0 for s in sizes):
        raise UsageError("message sizes must be non-negative")
    if reps < 1:
        raise UsageError(f"repetitions must be >= 1, got {reps}")
    registry = registry or PathRegistry()
    config = PathConfig(stream_count=streams, autotune=False)
    if role == "server":
        listener = registry.listen(("0.0.0.0", peer.port), streams, config)
        try:
            path = listener.accept(timeout=120.0)
        finally:
            listener.close()
    else:
        path = registry.create_path(peer, streams, "client", config)
    me, them = ("client", "server") if role == "client" else ("server", "client")
    try:
        if use_autotune:
            registry.configure(path, "autotune", True)
            report = _autotune.autotune_path(registry, path)
            print(report.to_text(), end="", file=sys.stderr)
        results = []
        print(TSV_HEADER, file=out, flush=True)
        for size in sizes:
            rtt = _autotune.measure_rtt(registry, path)
            out_payload = make_payload(size, f"{me}:{size}")
            expected = make_payload(size, f"{them}:{size}")
            expected_crc = 0
            received_crc = 0
            rates = []
            for rep in range(reps):
                start = time.monotonic()
                got = registry.send_recv(path, out_payload, size)
                elapsed = max(time.monotonic() - start, 1e-9)
                expected_crc = zlib.crc32(expected, expected_crc)
                received_crc = zlib.crc32(got, received_crc)
                if received_crc != expected_crc:
                    raise ProtocolError(
                        f"checksum mismatch at size {size} repetition {rep}"
                    )
                rates.append(size / elapsed)
            result = BenchResult(
                message_size=size,
                stream_count=streams,
                repetitions=reps,
                mean_throughput=sum(rates) / len(rates),
                mean_rtt=rtt,
                min_throughput=min(rates),
                max_throughput=max(rates),
            )
            print(result.tsv(), file=out, flush=True)
            results.append(result)
        return results
    finally:
        registry.finalize()


def unit_tests_main(argv: list[str] | None = None) -> int:
    argparse.ArgumentParser(
        prog="mpw-unit-tests", description=run_unit_tests.__doc__
    ).parse_args(argv)
    return run_unit_tests()


def concurrent_tests_main(argv: list[str] | None = None) -> int:
    argparse.ArgumentParser(
        prog="mpw-concurrent-tests", description=run_concurrent_tests.__doc__
    ).parse_args(argv)
    return run_concurrent_tests()


def _parse_sizes(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise UsageError(f"bad --sizes value: {text!r}") from None


def benchmark_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mpwtest",
        description="Two-endpoint throughput/latency benchmark; start a "
                    "server on one host and a client on the other with "
                    "matching options.",
    )
    sub = parser.add_subparsers(dest="role", required=True)
    server = sub.add_parser("server", help="wait for the client")
    server.add_argument("port", type=int)
    client = sub.add_parser("client", help="connect to the server")
    client.add_argument("peer", metavar="host:port")
    for p in (server, client):
        p.add_argument("--sizes", default=None,
                       help="comma-separated message sizes in bytes "
                            "(default one 64 MiB message)")
        p.add_argument("--streams", type=int, default=1)
        p.add_argument("--reps", type=int, default=DEFAULT_REPS,
                       help=f"repetitions per direction (default {DEFAULT_REPS})")
        p.add_argument("--autotune", action="store_true",
                       help="probe chunk sizes first and print the report")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING)
    try:
        if args.role == "server":
            peer = Endpoint("0.0.0.0", args.port)
        else:
            peer = Endpoint.parse(args.peer)
        sizes = _parse_sizes(args.sizes) if args.sizes is not None else None
        run_benchmark(args.role, peer, sizes, args.streams, args.reps,
                      use_autotune=args.autotune)
    except MPWError as exc:
        print(f"mpwtest: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(benchmark_main())
