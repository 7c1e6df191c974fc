import itertools
import socket
import struct
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import free_addresses, spmd
from gradflow.transport import (HEADER, MAGIC, MSG_DATA, Frame, InProcFabric, ProtocolError,
                                TcpEndpoint, TransportError, TransportTimeout, decode_frame,
                                encode_frame)


def test_header_layout_is_little_endian():
    data = encode_frame(MSG_DATA, 0x01020304, 5, b"ab")
    assert data[:4] == b"GFL1"
    assert data[4] == 0x01
    assert data[5:9] == bytes([4, 3, 2, 1])
    assert data[9:13] == bytes([5, 0, 0, 0])
    assert data[13:21] == (2).to_bytes(8, "little")
    assert data[21:] == b"ab"
    assert HEADER.size == 21


@given(st.binary(max_size=4096), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.sampled_from([1, 2, 3]))
def test_frame_roundtrip(payload, tag, src, msg_type):
    f = decode_frame(encode_frame(msg_type, tag, src, payload))
    assert f == Frame(msg_type, tag, src, payload)


def test_bad_magic_rejected():
    data = bytearray(encode_frame(MSG_DATA, 1, 0, b"x"))
    data[:4] = b"XXXX"
    with pytest.raises(ProtocolError):
        decode_frame(bytes(data))


def test_length_mismatch_rejected():
    with pytest.raises(ProtocolError):
        decode_frame(encode_frame(MSG_DATA, 1, 0, b"abc")[:-1])


@pytest.mark.parametrize("transport", ["inproc", "tcp"])
def test_send_recv_identity_and_counters(transport):
    def fn(ep):
        if ep.rank == 0:
            ep.send(1, 3, b"12345678")
            ep.send(1, 4, b"")
        else:
            got = ep.recv(0, 3), ep.recv(0, 4)
            return got
        return None

    eps = []
    res = spmd(2, fn, transport, endpoints=eps)
    assert res[1] == (b"12345678", b"")
    assert eps[0].stats.sent() == 8
    assert eps[0].stats.frames() == 2
    assert eps[1].stats.received() == 8


def test_counter_arithmetic():
    fab = InProcFabric(2)
    payload = bytes(1024)
    for _ in range(1000):
        fab[0].send(1, 0, payload)
    assert fab[0].stats.sent() == 1_024_000
    for _ in range(1000):
        fab[1].recv(0, 0)
    assert fab[1].stats.received() == 1_024_000


def test_fifo_per_tag():
    fab = InProcFabric(2)
    fab[0].send(1, 7, b"first")
    fab[0].send(1, 8, b"other")
    fab[0].send(1, 7, b"second")
    assert fab[1].recv(0, 7) == b"first"
    assert fab[1].recv(0, 8) == b"other"
    assert fab[1].recv(0, 7) == b"second"


def _schedules():
    msgs = [(0, 1, b"a"), (0, 2, b"b"), (1, 1, b"c"), (1, 2, b"d")]
    return list(itertools.permutations(msgs))


@pytest.mark.parametrize("order", _schedules())
def test_interleaved_sources_match_only_src_and_tag(order):
    # ranks 0 and 1 send to rank 2 in every interleaving; recv order fixed
    fab = InProcFabric(3)
    for src, tag, payload in order:
        fab[src].send(2, tag, payload)
    expect = {(0, 1): b"a", (0, 2): b"b", (1, 1): b"c", (1, 2): b"d"}
    for (src, tag), payload in sorted(expect.items(), reverse=True):
        assert fab[2].recv(src, tag) == payload


def test_invalid_peer():
    fab = InProcFabric(2)
    with pytest.raises(ValueError):
        fab[0].send(0, 1, b"")
    with pytest.raises(ValueError):
        fab[0].send(2, 1, b"")


def test_recv_after_peer_crash_is_an_error_not_a_hang():
    fab = InProcFabric(2, timeout=5.0)
    fab[0].close()
    t0 = time.monotonic()
    with pytest.raises(TransportError):
        fab[1].recv(0, 1)
    assert time.monotonic() - t0 < 1.0
    with pytest.raises(TransportError):
        fab[1].send(0, 1, b"x")


def test_recv_timeout():
    fab = InProcFabric(2, timeout=0.05)
    with pytest.raises(TransportTimeout):
        fab[1].recv(0, 1)


def test_tcp_peer_crash():
    addrs = free_addresses(2)
    eps = [None, None]

    def make(r):
        eps[r] = TcpEndpoint(r, addrs, timeout=5.0)

    ts = [threading.Thread(target=make, args=(r,)) for r in range(2)]
    [t.start() for t in ts]
    [t.join() for t in ts]
    eps[0].close()
    t0 = time.monotonic()
    with pytest.raises(TransportError):
        eps[1].recv(0, 1)
    assert time.monotonic() - t0 < 2.0
    eps[1].close()


def test_tcp_bad_magic_fails_fast():
    addrs = free_addresses(2)
    host, port = addrs[0].split(":")
    result = {}

    def rank0():
        ep = TcpEndpoint(0, addrs, timeout=5.0)
        try:
            ep.recv(1, 1)
        except Exception as exc:
            result["exc"] = exc
        ep.close()

    t = threading.Thread(target=rank0)
    t.start()
    # impersonate rank 1: valid handshake, then garbage
    for _ in range(100):
        try:
            s = socket.create_connection((host, int(port)))
            break
        except OSError:
            time.sleep(0.02)
    s.sendall(encode_frame(3, 0, 1, struct.pack("<II", 1, 2)))
    s.recv(64)
    s.sendall(b"XXXX" + bytes(17))
    t.join(10)
    s.close()
    assert isinstance(result["exc"], ProtocolError)


def test_tcp_world_size_mismatch():
    addrs = free_addresses(2)
    errors = []

    def run(r, n_addrs):
        try:
            TcpEndpoint(r, n_addrs, timeout=3.0).close()
        except Exception as exc:
            errors.append(exc)

    t0 = threading.Thread(target=run, args=(0, addrs))
    t1 = threading.Thread(target=run, args=(1, addrs + ["127.0.0.1:1"]))
    t0.start(); t1.start(); t0.join(); t1.join()
    assert any(isinstance(e, ProtocolError) for e in errors)


def test_barrier_single_rank():
    fab = InProcFabric(1)
    fab[0].barrier()


@pytest.mark.parametrize("transport", ["inproc", "tcp"])
def test_barrier_waits_for_slowest(transport):
    def fn(ep):
        ep.barrier()
        if ep.rank == 3:
            time.sleep(0.05)
        t0 = time.monotonic()
        ep.barrier()
        return time.monotonic() - t0

    waits = spmd(4, fn, transport)
    # every rank except the sleeper waited for it (with scheduling slack)
    assert all(w >= 0.04 for r, w in enumerate(waits) if r != 3)


def test_barrier_stress():
    def fn(ep):
        for _ in range(100):
            ep.barrier()
        return True

    assert all(spmd(4, fn))


def test_barrier_names_absent_ranks():
    fab = InProcFabric(3, timeout=0.1)
    fab[1].send(0, 0, b"", "barrier", 0x02)
    with pytest.raises(TransportTimeout, match=r"\[2\]"):
        fab[0].barrier()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.binary(max_size=64)), max_size=20))
def test_backends_observationally_equivalent(schedule):
    def fn(ep):
        if ep.rank == 0:
            for tag, payload in schedule:
                ep.send(1, tag, payload, label=f"t{tag}")
            return None
        return [ep.recv(0, tag) for tag, _ in schedule]

    out = {}
    stats = {}
    for transport in ("inproc", "tcp"):
        eps = []
        out[transport] = spmd(2, fn, transport, endpoints=eps)[1]
        stats[transport] = {k: (v.payload_bytes_sent, v.frames_sent)
                            for k, v in eps[0].stats.snapshot().items() if k.startswith("t")}
    assert out["inproc"] == out["tcp"] == [p for _, p in schedule]
    assert stats["inproc"] == stats["tcp"]


def test_global_sent_equals_received():
    def fn(ep):
        for dst in range(ep.world_size):
            if dst != ep.rank:
                ep.send(dst, 1, bytes(10 * (ep.rank + 1)))
        for src in range(ep.world_size):
            if src != ep.rank:
                ep.recv(src, 1)

    eps = []
    spmd(4, fn, endpoints=eps)
    assert sum(e.stats.sent() for e in eps) == sum(e.stats.received() for e in eps)


def test_magic_constant():
    assert MAGIC == b"GFL1"
