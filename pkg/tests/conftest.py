import threading

import pytest

from mpw.paths import PathConfig, PathRegistry
from mpw.streams import Endpoint

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_loopback_pair(registry, streams=1, config=None, timeout=10.0):
    """Connected (client_path, server_path) pair inside this process."""
    config = config or PathConfig(autotune=False)
    listener = registry.listen(("127.0.0.1", 0), streams, config)
    result = {}
    errors = []

    def connect():
        try:
            result["client"] = registry.create_path(
                Endpoint("127.0.0.1", listener.port), streams, "client",
                config, timeout=timeout,
            )
        except BaseException as exc:  # surfaced below
            errors.append(exc)

    t = threading.Thread(target=connect, daemon=True)
    t.start()
    try:
        server_id = listener.accept(timeout=timeout)
    finally:
        t.join(timeout=timeout)
        listener.close()
    if errors:
        raise errors[0]
    return result["client"], server_id


def run_both(fn_a, fn_b, timeout=60.0):
    """Run two endpoint closures concurrently; returns their results."""
    out = [None, None]
    errors = []

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
        t.join(timeout=timeout)
    if any(t.is_alive() for t in threads):
        raise TimeoutError("endpoint closure hung")
    if errors:
        raise errors[0]
    return tuple(out)


@pytest.fixture
def registry():
    reg = PathRegistry()
    yield reg
    reg.finalize()


@pytest.fixture
def pair(registry):
    """Factory for loopback path pairs, finalized with the registry."""

    def build(streams=1, config=None):
        return make_loopback_pair(registry, streams, config)

    return build
