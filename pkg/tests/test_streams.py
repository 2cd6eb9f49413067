import socket
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from mpw.errors import (
    AcceptTimeoutError,
    ConnectError,
    ProtocolError,
    TruncatedStreamError,
    UnresolvableHostError,
    UsageError,
)
from mpw.streams import (
    HANDSHAKE_SIZE,
    Endpoint,
    Stream,
    StreamHandshake,
    StreamListener,
    apply_window,
    connect_streams,
    listen_accept_streams,
    pacing_delay,
    parse_handshake,
    recv_bytes,
    recv_exact,
    resolve_host,
    send_chunked,
)


def make_stream_pair():
    """Two connected Streams over a local socketpair."""
    left, right = socket.socketpair()
    hs = StreamHandshake(0, 0, 1)
    return Stream(left, hs), Stream(right, hs)


# -- endpoints and handshakes -------------------------------------------------


def test_endpoint_validation():
    assert Endpoint("example.org", 80).port == 80
    with pytest.raises(UsageError):
        Endpoint("", 80)
    for port in (0, -1, 65536):
        with pytest.raises(UsageError):
            Endpoint("h", port)


def test_endpoint_parse():
    ep = Endpoint.parse("10.0.0.1:8080")
    assert (ep.host, ep.port) == ("10.0.0.1", 8080)
    for bad in ("nohost", ":80", "h:notaport", "h:"):
        with pytest.raises(UsageError):
            Endpoint.parse(bad)


def test_handshake_wire_layout():
    raw = StreamHandshake(path_id=0x01020304, stream_index=5, stream_count=7).encode()
    assert raw == b"MPWP" + b"\x01" + b"\x01\x02\x03\x04" + b"\x00\x05" + b"\x00\x07"
    assert len(raw) == HANDSHAKE_SIZE == 13


def test_handshake_rejects_garbage():
    good = StreamHandshake(1, 0, 1).encode()
    with pytest.raises(ProtocolError):
        parse_handshake(b"XXXX" + good[4:])
    with pytest.raises(ProtocolError):
        parse_handshake(good[:4] + b"\x09" + good[5:])
    with pytest.raises(ProtocolError):
        parse_handshake(good[:-1])
    # index must sit below count, count within 1..256
    bad_index = good[:9] + b"\x00\x09" + good[11:]
    with pytest.raises(ProtocolError):
        parse_handshake(bad_index)


@given(
    path_id=st.integers(min_value=0, max_value=2**32 - 1),
    count=st.integers(min_value=1, max_value=256),
    data=st.data(),
)
def test_handshake_round_trip(path_id, count, data):
    index = data.draw(st.integers(min_value=0, max_value=count - 1))
    hs = StreamHandshake(path_id, index, count)
    assert parse_handshake(hs.encode()) == hs


# -- host resolution -----------------------------------------------------------


def test_resolve_host_idempotent_on_dotted_quad():
    assert resolve_host("127.0.0.1") == "127.0.0.1"
    assert resolve_host("8.8.8.8") == "8.8.8.8"


def test_resolve_host_against_platform_resolver():
    assert resolve_host("localhost") == socket.gethostbyname("localhost")


def test_resolve_host_failure():
    with pytest.raises(UnresolvableHostError):
        resolve_host("no-such-host.invalid")


# -- pacing ---------------------------------------------------------------------


def test_pacing_delay_values():
    assert pacing_delay(0, 1000.0) == 0.0
    assert pacing_delay(1024**2, 1024**2) == 1.0
    assert pacing_delay(8 * 1024**2, 16 * 1024**2) == 0.5
    with pytest.raises(UsageError):
        pacing_delay(1, 0)


@given(
    a=st.integers(min_value=0, max_value=2**40),
    b=st.integers(min_value=0, max_value=2**40),
    rate=st.floats(min_value=1.0, max_value=1e12, allow_nan=False),
)
def test_pacing_delay_additive(a, b, rate):
    assert pacing_delay(a + b, rate) == pytest.approx(
        pacing_delay(a, rate) + pacing_delay(b, rate), rel=1e-9, abs=1e-12
    )


# -- chunked send / exact receive ------------------------------------------------


def test_send_chunked_zero_bytes():
    left, right = make_stream_pair()
    try:
        assert send_chunked(left, b"", 4) == 0
    finally:
        left.close()
        right.close()


class _SendSpy:
    """Socket proxy recording per-call write sizes."""

    def __init__(self, sock):
        self._sock = sock
        self.writes = []

    def sendall(self, buf):
        self.writes.append(len(buf))
        return self._sock.sendall(buf)

    def __getattr__(self, name):
        return getattr(self._sock, name)


def test_send_chunked_write_sizes_and_content():
    left, right = make_stream_pair()
    spy = _SendSpy(left.sock)
    left.sock = spy
    try:
        sent = send_chunked(left, b"0123456789", 4)
        assert sent == 10
        assert spy.writes == [4, 4, 2]
        assert recv_bytes(right, 10) == b"0123456789"
    finally:
        left.sock = spy._sock
        left.close()
        right.close()


def test_recv_exact_assembles_partial_writes():
    left, right = make_stream_pair()

    def dribble():
        left.sock.sendall(b"01234")
        time.sleep(0.05)
        left.sock.sendall(b"56789")

    t = threading.Thread(target=dribble)
    t.start()
    try:
        buf = bytearray(10)
        recv_exact(right, 10, buf)
        assert bytes(buf) == b"0123456789"
    finally:
        t.join()
        left.close()
        right.close()


def test_recv_exact_zero_is_immediate():
    left, right = make_stream_pair()
    try:
        recv_exact(right, 0, bytearray())
    finally:
        left.close()
        right.close()


def test_recv_exact_truncation_reports_count():
    left, right = make_stream_pair()
    left.sock.sendall(b"01234")
    left.close()
    try:
        with pytest.raises(TruncatedStreamError) as excinfo:
            recv_bytes(right, 10)
        assert excinfo.value.bytes_done == 5
    finally:
        right.close()


def test_recv_exact_region_too_small():
    left, right = make_stream_pair()
    try:
        with pytest.raises(UsageError):
            recv_exact(right, 10, bytearray(4))
    finally:
        left.close()
        right.close()


@settings(deadline=None)  # socket round trips can outlast the default budget
@given(
    payload=st.binary(min_size=0, max_size=4096),
    chunk=st.integers(min_value=1, max_value=5000),
)
def test_byte_transparency(payload, chunk):
    left, right = make_stream_pair()
    try:
        t = threading.Thread(target=send_chunked, args=(left, payload, chunk))
        t.start()
        got = recv_bytes(right, len(payload))
        t.join()
        assert got == payload
    finally:
        left.close()
        right.close()


def test_send_chunked_pacing_rate_is_enforced():
    left, right = make_stream_pair()
    left.pacing_rate = 2 * 1024 * 1024  # bytes/s
    payload = bytes(512 * 1024)  # should take ~0.25 s

    def drain():
        recv_bytes(right, len(payload))

    t = threading.Thread(target=drain)
    t.start()
    try:
        start = time.monotonic()
        send_chunked(left, payload, 64 * 1024)
        elapsed = time.monotonic() - start
        assert elapsed >= 0.2
    finally:
        t.join()
        left.close()
        right.close()


# -- connect / accept -------------------------------------------------------------


def test_connect_accept_minimal_path():
    listener = StreamListener(("127.0.0.1", 0))
    target = Endpoint("127.0.0.1", listener.port)
    try:
        client_side = []
        t = threading.Thread(
            target=lambda: client_side.extend(connect_streams(target, 9, 1, 5.0))
        )
        t.start()
        streams = listener.accept_streams(9, 1, 5.0)
        t.join()
        assert [s.stream_index for s in streams] == [0]
        streams[0].sock.sendall(b"ping")
        assert recv_bytes(client_side[0], 4) == b"ping"
        for s in streams + client_side:
            s.close()
    finally:
        listener.close()


def test_accept_orders_out_of_order_arrivals():
    listener = StreamListener(("127.0.0.1", 0))
    port = listener.port

    def connect_in_order(order):
        for index in order:
            sock = socket.create_connection(("127.0.0.1", port))
            sock.sendall(StreamHandshake(42, index, 4).encode())
            # keep sockets alive until the listener is done
            connected.append(sock)

    connected = []
    t = threading.Thread(target=connect_in_order, args=([2, 0, 3, 1],))
    t.start()
    try:
        streams = listener.accept_streams(42, 4, 5.0)
        t.join()
        assert [s.stream_index for s in streams] == [0, 1, 2, 3]
        for s in streams:
            s.close()
    finally:
        for sock in connected:
            sock.close()
        listener.close()


def test_accept_times_out_on_partial_path():
    listener = StreamListener(("127.0.0.1", 0))
    sock = socket.create_connection(("127.0.0.1", listener.port))
    sock.sendall(StreamHandshake(7, 0, 2).encode())
    try:
        with pytest.raises(AcceptTimeoutError):
            listener.accept_streams(7, 2, timeout=0.3)
    finally:
        sock.close()
        listener.close()


def test_accept_rejects_wrong_magic_and_path():
    listener = StreamListener(("127.0.0.1", 0))
    port = listener.port
    junk = []

    def connect_all():
        a = socket.create_connection(("127.0.0.1", port))
        a.sendall(b"JUNKJUNKJUNKJ")
        junk.append(a)
        b = socket.create_connection(("127.0.0.1", port))
        b.sendall(StreamHandshake(99, 0, 1).encode())  # wrong path id
        junk.append(b)
        c = socket.create_connection(("127.0.0.1", port))
        c.sendall(StreamHandshake(5, 0, 1).encode())
        junk.append(c)

    t = threading.Thread(target=connect_all)
    t.start()
    try:
        streams = listener.accept_streams(5, 1, 5.0)
        t.join()
        assert len(streams) == 1
        assert streams[0].handshake.path_id == 5
        streams[0].close()
    finally:
        for sock in junk:
            sock.close()
        listener.close()


def test_accept_duplicate_index_is_protocol_error():
    listener = StreamListener(("127.0.0.1", 0))
    port = listener.port
    conns = []

    def connect_all():
        for _ in range(2):
            sock = socket.create_connection(("127.0.0.1", port))
            sock.sendall(StreamHandshake(3, 0, 2).encode())
            conns.append(sock)

    t = threading.Thread(target=connect_all)
    t.start()
    try:
        with pytest.raises(ProtocolError):
            listener.accept_streams(3, 2, 5.0)
        t.join()
    finally:
        for sock in conns:
            sock.close()
        listener.close()


def test_connect_refused_rolls_back():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    free_port = probe.getsockname()[1]
    probe.close()
    with pytest.raises(ConnectError):
        connect_streams(Endpoint("127.0.0.1", free_port), 1, 2, 2.0)


def test_listen_accept_streams_one_shot():
    # The function form binds, accepts, and releases the port afterwards.
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    bind = Endpoint("127.0.0.1", port)
    result = {}

    def client():
        deadline = time.monotonic() + 5.0
        while True:
            try:
                result["c"] = connect_streams(bind, 11, 1, 1.0)
                return
            except ConnectError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.02)

    t = threading.Thread(target=client)
    t.start()
    streams = listen_accept_streams(bind, 11, 1, 5.0)
    t.join()
    assert [s.stream_index for s in streams] == [0]
    # the listening socket is gone: the same port binds again instantly
    StreamListener(("127.0.0.1", port)).close()
    for s in streams + result["c"]:
        s.close()


# -- socket options ----------------------------------------------------------------


def test_apply_window_records_granted_value():
    left, right = make_stream_pair()
    try:
        granted = apply_window(left, 65536)
        assert granted >= 1
        assert left.window_bytes == granted
        # oracle: read back directly from the socket
        readback = min(
            left.sock.getsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF),
            left.sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF),
        )
        assert granted == readback
    finally:
        left.close()
        right.close()


def test_apply_window_clamping_is_not_an_error():
    left, right = make_stream_pair()
    try:
        granted = apply_window(left, 1)
        assert granted >= 1  # OS clamps upward to its minimum
    finally:
        left.close()
        right.close()


def test_apply_window_on_closed_stream():
    left, right = make_stream_pair()
    left.close()
    right.close()
    with pytest.raises(UsageError):
        apply_window(left, 4096)
