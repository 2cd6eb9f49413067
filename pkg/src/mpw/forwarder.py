"""User-space path forwarder: accept incoming paths, relay them onward.

Runs without administrative privileges where compute nodes cannot take
connections from the outside: the forwarder listens on a reachable
host, opens a matching path to the real destination, and pumps bytes
both ways without inspecting them.

Config file: one rule per line, ``listen_host:port target_host:port
streams``; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from dataclasses import dataclass

from .errors import AcceptTimeoutError, MPWError, UsageError
from .paths import PathConfig, PathRegistry
from .streams import MAX_STREAMS, Endpoint

log = logging.getLogger(__name__)

_ACCEPT_POLL_S = 0.5
_SESSION_ACCEPT_S = 30.0
_CONNECT_TIMEOUT_S = 10.0


@dataclass(frozen=True)
class ForwardRule:
    """Forward paths arriving on ``listen`` to ``target``."""

    listen: Endpoint
    target: Endpoint
    stream_count: int

    def __post_init__(self):
        if self.listen == self.target:
            raise UsageError(f"rule forwards {self.listen} to itself")
        if not 1 <= self.stream_count <= MAX_STREAMS:
            raise UsageError(f"stream count out of range: {self.stream_count}")


def parse_rules(text: str) -> list[ForwardRule]:
    """Parse the rule file format; raises UsageError on malformed lines."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise UsageError(
                f"line {lineno}: expected 'listen target streams', got {raw!r}"
            )
        try:
            rule = ForwardRule(
                Endpoint.parse(parts[0]),
                Endpoint.parse(parts[1]),
                int(parts[2]),
            )
        except ValueError:
            raise UsageError(f"line {lineno}: bad stream count {parts[2]!r}") from None
        except UsageError as exc:
            raise UsageError(f"line {lineno}: {exc}") from None
        rules.append(rule)
    return rules


def _serve_rule(registry: PathRegistry, rule: ForwardRule, stop: threading.Event):
    """Accept-relay loop for one rule; one session at a time."""
    config = PathConfig(stream_count=rule.stream_count, autotune=False)
    listener = registry.listen(rule.listen, rule.stream_count, config)
    log.info("rule %s -> %s listening (%d streams)", rule.listen, rule.target,
             rule.stream_count)
    try:
        while not stop.is_set():
            try:
                incoming = listener.accept(
                    timeout=_SESSION_ACCEPT_S, idle_timeout=_ACCEPT_POLL_S
                )
            except AcceptTimeoutError:
                continue
            except OSError:
                break  # listener closed underneath us during shutdown
            log.info("rule %s: session accepted", rule.listen)
            try:
                outgoing = registry.create_path(
                    rule.target, rule.stream_count, "client", config,
                    timeout=_CONNECT_TIMEOUT_S,
                )
            except MPWError as exc:
                log.warning("rule %s: target %s unreachable: %s",
                            rule.listen, rule.target, exc)
                registry.destroy_path(incoming)
                continue
            try:
                registry.relay(incoming, outgoing)
            except MPWError as exc:
                log.warning("rule %s: relay ended with error: %s", rule.listen, exc)
            log.info("rule %s: session closed", rule.listen)
    finally:
        listener.close()


def run_forwarder(rules: list[ForwardRule], stop: threading.Event | None = None,
                  registry: PathRegistry | None = None):
    """Serve all rules until ``stop`` is set; each rule fails independently."""
    if not rules:
        raise UsageError("no forwarding rules given")
    stop = stop or threading.Event()
    registry = registry or PathRegistry()
    workers = []
    for rule in rules:
        t = threading.Thread(
            target=_serve_rule, args=(registry, rule, stop),
            name=f"forward-{rule.listen}", daemon=True,
        )
        t.start()
        workers.append(t)
    try:
        while any(t.is_alive() for t in workers):
            if stop.wait(timeout=0.2):
                break
    finally:
        stop.set()
        registry.finalize()
        for t in workers:
            t.join(timeout=5.0)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="forwarder",
        description="Relay whole paths between networks, one rule per config line.",
    )
    parser.add_argument("config", help="rule file: 'listen_host:port target_host:port streams'")
    parser.add_argument("--verbose", action="store_true", help="log per-session events")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        with open(args.config, encoding="utf-8") as fh:
            rules = parse_rules(fh.read())
        if not rules:
            raise UsageError(f"{args.config}: no rules found")
    except (OSError, UsageError) as exc:
        print(f"forwarder: {exc}", file=sys.stderr)
        return 2

    stop = threading.Event()

    def handle_signal(signum, frame):
        log.info("signal %d, shutting down", signum)
        stop.set()

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)
    run_forwarder(rules, stop)
    return 0


if __name__ == "__main__":
    sys.exit(main())
