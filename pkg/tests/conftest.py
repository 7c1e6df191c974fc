import socket
import threading

import numpy as np
import pytest

from gradflow.collectives import Communicator
from gradflow.transport import InProcFabric, TcpEndpoint


def free_addresses(n):
    socks, addrs = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        addrs.append(f"127.0.0.1:{s.getsockname()[1]}")
    for s in socks:
        s.close()
    return addrs


def spmd(n, fn, transport="inproc", timeout=10.0, endpoints=None):
    """Run ``fn(endpoint)`` on ``n`` threads, one per rank; re-raise the first failure."""
    results, errors = [None] * n, {}
    addrs = free_addresses(n) if transport == "tcp" else None
    fabric = InProcFabric(n, timeout=timeout) if transport == "inproc" else None
    eps = [None] * n

    def worker(r):
        try:
            ep = fabric[r] if fabric else TcpEndpoint(r, addrs, timeout=timeout)
            eps[r] = ep
            results[r] = fn(ep)
        except BaseException as exc:  # noqa: BLE001 - reported below
            errors[r] = exc
            if eps[r] is not None:
                eps[r].close()

    threads = [threading.Thread(target=worker, args=(r,), daemon=True) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout * 3)
    if endpoints is not None:
        endpoints.extend(eps)
    for ep in eps:
        if ep is not None:
            ep.close()
    if errors:
        raise errors[min(errors)]
    return results


def spmd_comm(n, fn, group_size=1, ring_order=None, **kw):
    """Like :func:`spmd` but hands ``fn`` a Communicator."""
    def wrapped(ep):
        comm = Communicator(ep, group_size=group_size, ring_order=ring_order)
        try:
            return fn(comm)
        finally:
            comm.close()
    return spmd(n, wrapped, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines printed at the end of the pytest run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
