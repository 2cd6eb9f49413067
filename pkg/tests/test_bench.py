import socket
import subprocess
import threading

import pytest

from mpw.bench import (
    DEFAULT_REPS,
    BenchResult,
    make_payload,
    run_benchmark,
    run_concurrent_tests,
    run_unit_tests,
)
from mpw.errors import UsageError
from mpw.streams import Endpoint


def free_port():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


def test_unit_tests_pass_without_arguments(capsys):
    assert run_unit_tests() == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert out.count("ok - ") == 4


def test_concurrent_tests_pass_without_arguments(capsys):
    assert run_concurrent_tests() == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert out.count("ok - ") == 7


def test_unit_tests_catch_a_broken_stripe_rule(monkeypatch, capsys):
    import mpw.bench as bench_mod
    from mpw.paths import StripePlan

    # mutation: dump the whole message onto stream 0
    monkeypatch.setattr(
        bench_mod, "stripe",
        lambda total, count: StripePlan((total,) + (0,) * (count - 1)),
    )
    assert run_unit_tests() == 1
    assert "FAIL - stripe split rule" in capsys.readouterr().out


def test_make_payload_deterministic():
    assert make_payload(100, "x") == make_payload(100, "x")
    assert make_payload(100, "x") != make_payload(100, "y")
    assert len(make_payload(12345, "z")) == 12345
    assert make_payload(0, "x") == b""


def test_run_benchmark_loopback(tmp_path):
    port = free_port()
    out_server = open(tmp_path / "server.tsv", "w")
    out_client = open(tmp_path / "client.tsv", "w")
    sizes = [4096, 65536]
    results = {}

    def server():
        results["server"] = run_benchmark(
            "server", Endpoint("127.0.0.1", port), sizes, streams=2, reps=3,
            out=out_server,
        )

    t = threading.Thread(target=server, daemon=True)
    t.start()
    results["client"] = run_benchmark(
        "client", Endpoint("127.0.0.1", port), sizes, streams=2, reps=3,
        out=out_client,
    )
    t.join(timeout=60.0)
    out_server.close()
    out_client.close()
    for role in ("server", "client"):
        rows = results[role]
        assert [r.message_size for r in rows] == sizes
        for row in rows:
            assert row.repetitions == 3
            assert row.mean_throughput > 0
            assert row.min_throughput <= row.mean_throughput <= row.max_throughput
            assert row.mean_rtt > 0
    text = (tmp_path / "client.tsv").read_text().splitlines()
    assert text[0].startswith("#")
    assert len(text) == 1 + len(sizes)
    for line in text[1:]:
        assert len(line.split("\t")) == 7


def test_run_benchmark_rejects_empty_sizes():
    with pytest.raises(UsageError):
        run_benchmark("client", Endpoint("127.0.0.1", 1), [], 1, 1)


def test_run_benchmark_rejects_bad_reps():
    with pytest.raises(UsageError):
        run_benchmark("client", Endpoint("127.0.0.1", 1), [1024], 1, 0)


def test_bench_result_tsv_fields():
    row = BenchResult(1024, 2, 20, 1e6, 0.001, 9e5, 1.1e6)
    parts = row.tsv().split("\t")
    assert parts[0] == "1024" and parts[1] == "2" and parts[2] == "20"


def _wait_listening(port, timeout=10.0):
    import time

    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(f"port {port} never started listening")


def test_cli_default_reps_is_twenty_and_tsv_parses():
    port = free_port()
    server = subprocess.Popen(
        ["mpwtest", "server", str(port), "--sizes", "4096"],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        _wait_listening(port)
        client = subprocess.run(
            ["mpwtest", "client", f"127.0.0.1:{port}", "--sizes", "4096"],
            stdout=subprocess.PIPE, text=True, timeout=120,
        )
        assert client.returncode == 0
        lines = client.stdout.strip().splitlines()
        assert lines[0].startswith("#")
        fields = lines[1].split("\t")
        assert fields[0] == "4096"
        assert int(fields[2]) == DEFAULT_REPS == 20
        assert server.wait(timeout=60) == 0
    finally:
        server.kill()


def test_cli_usage_error_on_empty_sizes():
    result = subprocess.run(
        ["mpwtest", "client", "127.0.0.1:1", "--sizes", ""],
        capture_output=True, text=True,
    )
    assert result.returncode != 0
