#!/usr/bin/env python3
"""Core-library echo peer for the bindings' tests and demo.

Listens on an ephemeral port, prints ``PORT <n>``, accepts one path,
and echoes messages back until the client closes.
"""

import argparse
import sys

from mpw.errors import MPWError
from mpw.paths import PathConfig, PathRegistry


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--streams", type=int, default=1)
    parser.add_argument(
        "--mode",
        choices=("dynamic-echo", "fixed-echo", "barrier-then-echo"),
        default="dynamic-echo",
    )
    parser.add_argument("--size", type=int, default=0,
                        help="message size for fixed-echo mode")
    args = parser.parse_args()

    registry = PathRegistry()
    config = PathConfig(stream_count=args.streams, autotune=False)
    listener = registry.listen(("127.0.0.1", 0), args.streams, config)
    print(f"PORT {listener.port}", flush=True)
    try:
        path = listener.accept(timeout=30.0)
        if args.mode == "barrier-then-echo":
            registry.barrier(path)
        while True:
            if args.mode == "fixed-echo":
                data = registry.recv(path, args.size)
                registry.send(path, data)
            else:
                data = registry.drecv(path)
                registry.dsend(path, data)
    except (MPWError, OSError):
        return 0  # client went away; that is the normal end
    finally:
        listener.close()
        registry.finalize()


if __name__ == "__main__":
    sys.exit(main())
