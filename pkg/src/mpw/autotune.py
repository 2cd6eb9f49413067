"""Post-connect probing that picks a chunk size for a path.

The probe exchanges a fixed payload per candidate chunk size and keeps
the fastest.  Both ends of a path run it in lockstep (the traffic is
symmetric), which is why the autotune flag must agree on both sides.
Probing never touches the stream count; that is always caller-chosen.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace

from .errors import MPWError, ProbeError, UsageError
from .paths import BARRIER_TOKEN, PathConfig, PathRegistry
from .streams import recv_exact

CANDIDATE_CHUNK_SIZES = (256 * 1024, 1024 * 1024, 8 * 1024 * 1024)
MIN_PROBE_BYTES = 1024 * 1024
DEFAULT_RTT_SAMPLES = 5


@dataclass(frozen=True)
class ProbeReport:
    """What the probe measured and what it settled on."""

    rtt: float  # seconds, median round trip
    throughput: dict[int, float]  # candidate chunk size -> bytes/s
    chosen: PathConfig

    def to_text(self) -> str:
        """Line-oriented key=value form, as consumed by the benchmark tool."""
        lines = [f"rtt_s={self.rtt:.6f}"]
        for chunk, rate in sorted(self.throughput.items()):
            lines.append(f"throughput_{chunk}={rate:.1f}")
        lines.append(f"chosen_chunk_size={self.chosen.chunk_size}")
        lines.append(f"chosen_stream_count={self.chosen.stream_count}")
        lines.append(
            "chosen_pacing_rate="
            + ("off" if self.chosen.pacing_rate is None else str(self.chosen.pacing_rate))
        )
        lines.append(
            "chosen_window="
            + ("unset" if self.chosen.window is None else str(self.chosen.window))
        )
        return "\n".join(lines) + "\n"


def measure_rtt(registry: PathRegistry, path_id: int,
                samples: int = DEFAULT_RTT_SAMPLES) -> float:
    """Median of ``samples`` 8-byte ping-pong round trips on stream 0.

    Both sides must call this the same number of times; each sample is a
    barrier-style token exchange.
    """
    if samples < 1:
        raise UsageError(f"need at least 1 sample, got {samples}")
    path = registry._get_open(path_id)
    times = []
    token = bytearray(len(BARRIER_TOKEN))
    for _ in range(samples):
        with path.io_lock:
            start = time.monotonic()
            try:
                path.streams[0].sock.sendall(BARRIER_TOKEN)
                recv_exact(path.streams[0], len(BARRIER_TOKEN), token)
            except (MPWError, OSError) as exc:
                path.mark_failed()
                raise ProbeError(f"rtt probe on path {path_id} failed: {exc}") from None
            times.append(time.monotonic() - start)
    return statistics.median(times)


def autotune_path(registry: PathRegistry, path_id: int,
                  probe_bytes: int = MIN_PROBE_BYTES) -> ProbeReport:
    """Probe candidate chunk sizes and apply the fastest to the path.

    Exchanges ``probe_bytes`` per candidate with pacing off, then keeps
    the chunk size with the highest measured throughput (ties go to the
    smaller chunk).  The stream count is never changed.  If the probe
    fails the path keeps its pre-probe config.
    """
    path = registry._get_open(path_id)
    if not path.config.autotune:
        raise UsageError(f"autotuning is disabled on path {path_id}")
    if probe_bytes < MIN_PROBE_BYTES:
        raise UsageError(
            f"probe_bytes must be at least {MIN_PROBE_BYTES}, got {probe_bytes}"
        )
    original = path.config
    payload = bytes(probe_bytes)
    throughput: dict[int, float] = {}
    try:
        rtt = measure_rtt(registry, path_id)
        registry.configure(path_id, "pacing_rate", None)
        for chunk in CANDIDATE_CHUNK_SIZES:
            registry.configure(path_id, "chunk_size", chunk)
            start = time.monotonic()
            registry.send_recv(path_id, payload, probe_bytes)
            elapsed = max(time.monotonic() - start, 1e-9)
            throughput[chunk] = probe_bytes / elapsed
    except MPWError as exc:
        path.config = original
        for stream in path.streams:
            stream.pacing_rate = original.pacing_rate
        raise ProbeError(f"autotune probe on path {path_id} failed: {exc}") from None
    best = max(sorted(throughput), key=lambda c: throughput[c])
    chosen = replace(original, chunk_size=best, pacing_rate=None, window=None)
    path.config = chosen
    for stream in path.streams:
        stream.pacing_rate = None
    return ProbeReport(rtt=rtt, throughput=throughput, chosen=chosen)
