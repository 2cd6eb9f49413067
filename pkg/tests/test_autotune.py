import threading

import pytest

from mpw.autotune import (
    CANDIDATE_CHUNK_SIZES,
    MIN_PROBE_BYTES,
    autotune_path,
    measure_rtt,
)
from mpw.errors import ProbeError, UsageError
from mpw.paths import PathConfig

from .conftest import make_loopback_pair, run_both


def test_measure_rtt_loopback_is_fast(registry, pair):
    a, b = pair()
    rtt_a, rtt_b = run_both(
        lambda: measure_rtt(registry, a, samples=5),
        lambda: measure_rtt(registry, b, samples=5),
    )
    assert 0 < rtt_a < 0.005
    assert 0 < rtt_b < 0.005


def test_measure_rtt_single_sample(registry, pair):
    a, b = pair()
    rtt_a, _ = run_both(
        lambda: measure_rtt(registry, a, samples=1),
        lambda: measure_rtt(registry, b, samples=1),
    )
    assert rtt_a > 0
    with pytest.raises(UsageError):
        measure_rtt(registry, a, samples=0)


def test_measure_rtt_closed_path(registry, pair):
    a, _ = pair()
    registry.destroy_path(a)
    with pytest.raises(Exception):
        measure_rtt(registry, a, samples=1)


def _tunable_pair(registry, streams=1):
    # autotune flag on, but no probe at creation: flip it afterwards
    a, b = make_loopback_pair(registry, streams, PathConfig(autotune=False))
    registry.configure(a, "autotune", True)
    registry.configure(b, "autotune", True)
    return a, b


def test_autotune_picks_the_measured_best(registry):
    a, b = _tunable_pair(registry, streams=2)
    report_a, report_b = run_both(
        lambda: autotune_path(registry, a),
        lambda: autotune_path(registry, b),
    )
    for report in (report_a, report_b):
        assert set(report.throughput) == set(CANDIDATE_CHUNK_SIZES)
        best = report.chosen.chunk_size
        assert all(report.throughput[best] >= t for t in report.throughput.values())
        # ties break toward the smaller chunk
        for chunk in CANDIDATE_CHUNK_SIZES:
            if report.throughput[chunk] == report.throughput[best]:
                assert best <= chunk
        assert report.rtt > 0


def test_autotune_applies_chosen_config(registry):
    a, b = _tunable_pair(registry)
    report_a, _ = run_both(
        lambda: autotune_path(registry, a),
        lambda: autotune_path(registry, b),
    )
    assert registry.path_config(a) == report_a.chosen
    assert report_a.chosen.pacing_rate is None
    assert report_a.chosen.window is None


def test_autotune_never_changes_stream_count(registry):
    a, b = _tunable_pair(registry, streams=3)
    report_a, _ = run_both(
        lambda: autotune_path(registry, a),
        lambda: autotune_path(registry, b),
    )
    assert report_a.chosen.stream_count == 3
    assert registry.path_config(a).stream_count == 3


def test_autotune_requires_enabled_flag(registry, pair):
    a, _ = pair()  # autotune disabled in fixture config
    with pytest.raises(UsageError):
        autotune_path(registry, a)


def test_autotune_rejects_small_probe(registry):
    a, _ = _tunable_pair(registry)
    with pytest.raises(UsageError):
        autotune_path(registry, a, probe_bytes=MIN_PROBE_BYTES - 1)


def test_autotune_failure_restores_config(registry):
    a, b = _tunable_pair(registry)
    before = registry.path_config(a)

    def kill_peer():
        registry.destroy_path(b)

    t = threading.Thread(target=kill_peer)
    t.start()
    t.join()
    with pytest.raises(ProbeError):
        autotune_path(registry, a)
    path = registry._paths[a]
    assert path.config == before


def test_disabled_autotune_leaves_config_unchanged(registry):
    config = PathConfig(autotune=False, chunk_size=12345)
    a, b = make_loopback_pair(registry, 2, config)
    assert registry.path_config(a).chunk_size == 12345
    assert registry.path_config(b).chunk_size == 12345


def test_autotune_runs_at_path_creation(registry):
    config = PathConfig(autotune=True, chunk_size=12345)
    a, b = make_loopback_pair(registry, 1, config)
    # the probe replaced the seed chunk size with a candidate
    assert registry.path_config(a).chunk_size in CANDIDATE_CHUNK_SIZES
    assert registry.path_config(b).chunk_size in CANDIDATE_CHUNK_SIZES


def test_probe_report_text_form(registry):
    a, b = _tunable_pair(registry)
    report_a, _ = run_both(
        lambda: autotune_path(registry, a),
        lambda: autotune_path(registry, b),
    )
    text = report_a.to_text()
    lines = dict(line.split("=", 1) for line in text.strip().splitlines())
    assert float(lines["rtt_s"]) > 0
    assert int(lines["chosen_chunk_size"]) == report_a.chosen.chunk_size
    assert lines["chosen_pacing_rate"] == "off"
    assert lines["chosen_window"] == "unset"
    for chunk in CANDIDATE_CHUNK_SIZES:
        assert float(lines[f"throughput_{chunk}"]) > 0
