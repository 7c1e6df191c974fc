"""Allreduce over a :mod:`gradflow.transport` endpoint.

Buffers are flat numpy arrays (float16, float32 or float64) reduced in place.
Three allreduce flavours share one wire convention, ``tag = (cid << 8) | phase``:

* :func:`ring_allreduce` -- reduce-scatter then allgather around a directed
  ring; each rank sends ``2(N-1)`` segments of about ``K/N`` bytes.
* :func:`hierarchical_allreduce` -- ring reduce to each group master, ring
  allreduce among the masters, broadcast back inside each group.
* :func:`oracle_allreduce` -- gather to rank 0, add in rank order, broadcast.
  Slow and obviously correct; everything else is tested against it.
"""

from __future__ import annotations

import threading
from concurrent.futures import Future, ThreadPoolExecutor

import numpy as np

from .halfcodec import to_half
from .transport import Endpoint, ProtocolError

PH_RING_RS = 1
PH_RING_AG = 2
PH_REDUCE_RS = 3
PH_REDUCE_GATHER = 4
PH_BCAST = 5
PH_ORACLE_GATHER = 6
PH_ORACLE_BCAST = 7
PH_ALLGATHER = 8

ALGORITHMS = ("ring", "hierarchical", "oracle")
_CID_MASK = (1 << 24) - 1


def make_tag(cid: int, phase: int) -> int:
    return ((cid & _CID_MASK) << 8) | phase


def segment_bounds(length: int, n: int) -> list[tuple[int, int]]:
    """Split ``length`` elements into ``n`` contiguous segments differing by <= 1."""
    base, extra = divmod(length, n)
    bounds, start = [], 0
    for i in range(n):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


class Communicator:
    """Rank context for collectives.

    ``group_size`` is the number of consecutive ranks per group in
    hierarchical mode (group ``g`` is ``[g*M, (g+1)*M)``, master is its lowest
    rank), so ``N // group_size`` masters take part in the inter-group ring.
    """

    def __init__(self, endpoint: Endpoint, group_size: int = 1, ring_order=None):
        n = endpoint.world_size
        if group_size < 1 or n % group_size:
            raise ValueError(f"group size {group_size} does not divide world size {n}")
        order = list(range(n)) if ring_order is None else [int(r) for r in ring_order]
        if sorted(order) != list(range(n)):
            raise ValueError(f"ring order {order} is not a permutation of range({n})")
        self.endpoint = endpoint
        self.group_size = group_size
        self.ring_order = order
        self._cid = 0
        self._cid_lock = threading.Lock()
        self._executor: ThreadPoolExecutor | None = None

    @property
    def rank(self) -> int:
        return self.endpoint.rank

    @property
    def world_size(self) -> int:
        return self.endpoint.world_size

    @property
    def stats(self):
        return self.endpoint.stats

    def next_cid(self) -> int:
        with self._cid_lock:
            cid = self._cid
            self._cid = (cid + 1) & _CID_MASK
        return cid

    def launch(self, algorithm: str, buf: np.ndarray, label: str = "allreduce") -> Future:
        """Start an allreduce on the progress thread; the collective id is fixed now.

        Launches run FIFO on a single background thread per communicator.
        """
        cid = self.next_cid()
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=1,
                                                thread_name_prefix=f"gflow-progress-{self.rank}")
        return self._executor.submit(allreduce, self, buf, algorithm, label, cid)

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def _flat(buf: np.ndarray) -> np.ndarray:
    if not isinstance(buf, np.ndarray) or buf.dtype.kind != "f":
        raise TypeError("collectives operate on numpy floating-point arrays")
    if not buf.flags.c_contiguous:
        raise ValueError("buffer must be C-contiguous")
    return buf.reshape(-1)


def _pack(seg: np.ndarray) -> bytes:
    return seg.astype(seg.dtype.newbyteorder("<"), copy=False).tobytes()


def _unpack(payload: bytes, dtype: np.dtype, count: int) -> np.ndarray:
    item = dtype.itemsize
    if len(payload) != count * item:
        raise ProtocolError(
            f"expected {count} x {dtype} ({count * item} bytes), got {len(payload)} bytes; "
            "buffer length or element type differs across ranks"
        )
    return np.frombuffer(payload, dtype=dtype.newbyteorder("<"))


def _accumulate(dst: np.ndarray, incoming: np.ndarray) -> None:
    if dst.dtype == np.float16:
        # widen each hop to fp32 and round back once
        dst[...] = to_half(dst.astype(np.float32) + incoming.astype(np.float32))
    else:
        dst += incoming


def _ring_allreduce(ep: Endpoint, flat: np.ndarray, ring: list[int], cid: int, label: str) -> None:
    n = len(ring)
    if n == 1:
        return
    p = ring.index(ep.rank)
    right, left = ring[(p + 1) % n], ring[(p - 1) % n]
    bounds = segment_bounds(flat.size, n)
    tag_rs, tag_ag = make_tag(cid, PH_RING_RS), make_tag(cid, PH_RING_AG)
    for s in range(n - 1):
        a, b = bounds[(p - s) % n]
        ep.send(right, tag_rs, _pack(flat[a:b]), label)
        a, b = bounds[(p - s - 1) % n]
        _accumulate(flat[a:b], _unpack(ep.recv(left, tag_rs, label), flat.dtype, b - a))
    for s in range(n - 1):
        a, b = bounds[(p + 1 - s) % n]
        ep.send(right, tag_ag, _pack(flat[a:b]), label)
        a, b = bounds[(p - s) % n]
        flat[a:b] = _unpack(ep.recv(left, tag_ag, label), flat.dtype, b - a)


def ring_allreduce(comm: Communicator, buf: np.ndarray, label: str = "allreduce",
                   cid: int | None = None) -> np.ndarray:
    """Sum ``buf`` across all ranks in place along ``comm.ring_order``."""
    flat = _flat(buf)
    cid = comm.next_cid() if cid is None else cid
    _ring_allreduce(comm.endpoint, flat, comm.ring_order, cid, f"{label}.ring")
    return buf


def _group_ring(comm: Communicator, ranks) -> list[int]:
    ring = comm.ring_order if ranks is None else list(ranks)
    if comm.rank not in ring:
        raise ValueError(f"rank {comm.rank} is not a member of group {ring}")
    return ring


def reduce(comm: Communicator, buf: np.ndarray, root: int, ranks=None,
           label: str = "reduce", cid: int | None = None) -> np.ndarray:
    """Ring reduce of ``buf`` to ``root`` over ``ranks`` (default: everybody).

    Reduce-scatter around the ring, then every member ships the segment it
    finished to the root.  Only the root's buffer holds the sum afterwards.
    """
    flat = _flat(buf)
    ring = _group_ring(comm, ranks)
    if root not in ring:
        raise ValueError(f"root {root} is outside group {ring}")
    cid = comm.next_cid() if cid is None else cid
    ep, n = comm.endpoint, len(ring)
    if n == 1:
        return buf
    p = ring.index(ep.rank)
    right, left = ring[(p + 1) % n], ring[(p - 1) % n]
    bounds = segment_bounds(flat.size, n)
    tag_rs, tag_g = make_tag(cid, PH_REDUCE_RS), make_tag(cid, PH_REDUCE_GATHER)
    for s in range(n - 1):
        a, b = bounds[(p - s) % n]
        ep.send(right, tag_rs, _pack(flat[a:b]), label)
        a, b = bounds[(p - s - 1) % n]
        _accumulate(flat[a:b], _unpack(ep.recv(left, tag_rs, label), flat.dtype, b - a))
    # position q finished segment q+1
    if ep.rank == root:
        for q in range(n):
            if ring[q] == root:
                continue
            a, b = bounds[(q + 1) % n]
            flat[a:b] = _unpack(ep.recv(ring[q], tag_g, label), flat.dtype, b - a)
    else:
        a, b = bounds[(p + 1) % n]
        ep.send(root, tag_g, _pack(flat[a:b]), label)
    return buf


def broadcast(comm: Communicator, buf: np.ndarray, root: int, ranks=None,
              label: str = "broadcast", cid: int | None = None) -> np.ndarray:
    """Pass ``root``'s buffer along the group ring until every member holds it."""
    flat = _flat(buf)
    ring = _group_ring(comm, ranks)
    if root not in ring:
        raise ValueError(f"root {root} is outside group {ring}")
    cid = comm.next_cid() if cid is None else cid
    ep, n = comm.endpoint, len(ring)
    if n == 1:
        return buf
    tag = make_tag(cid, PH_BCAST)
    q = ring.index(root)
    p = ring.index(ep.rank)
    if p != q:
        flat[:] = _unpack(ep.recv(ring[(p - 1) % n], tag, label), flat.dtype, flat.size)
    nxt = ring[(p + 1) % n]
    if nxt != root:
        ep.send(nxt, tag, _pack(flat), label)
    return buf


def group_of(rank: int, group_size: int) -> list[int]:
    g = rank // group_size
    return list(range(g * group_size, (g + 1) * group_size))


def hierarchical_allreduce(comm: Communicator, buf: np.ndarray, label: str = "allreduce",
                           cid: int | None = None) -> np.ndarray:
    """Three-phase allreduce over groups of ``comm.group_size`` consecutive ranks.

    Traffic labels: ``<label>.hier.intra_reduce``, ``<label>.hier.inter`` and
    ``<label>.hier.bcast``.  Inter-group messages are ``K*M/N`` bytes.
    """
    flat = _flat(buf)
    m, n = comm.group_size, comm.world_size
    if n % m:
        raise ValueError(f"group size {m} does not divide world size {n}")
    cid = comm.next_cid() if cid is None else cid
    group = group_of(comm.rank, m)
    master = group[0]
    reduce(comm, flat, master, group, f"{label}.hier.intra_reduce", cid)
    if comm.rank == master:
        masters = list(range(0, n, m))
        _ring_allreduce(comm.endpoint, flat, masters, cid, f"{label}.hier.inter")
    broadcast(comm, flat, master, group, f"{label}.hier.bcast", cid)
    return buf


def oracle_allreduce(comm: Communicator, buf: np.ndarray, label: str = "allreduce",
                     cid: int | None = None) -> np.ndarray:
    flat = _flat(buf)
    cid = comm.next_cid() if cid is None else cid
    ep, n = comm.endpoint, comm.world_size
    label = f"{label}.oracle"
    if n == 1:
        return buf
    tg, tb = make_tag(cid, PH_ORACLE_GATHER), make_tag(cid, PH_ORACLE_BCAST)
    if ep.rank == 0:
        parts = [flat.copy()] + [_unpack(ep.recv(r, tg, label), flat.dtype, flat.size)
                                 for r in range(1, n)]
        acc = parts[0]
        for part in parts[1:]:
            _accumulate(acc, part)
        flat[:] = acc
        payload = _pack(flat)
        for r in range(1, n):
            ep.send(r, tb, payload, label)
    else:
        ep.send(0, tg, _pack(flat), label)
        flat[:] = _unpack(ep.recv(0, tb, label), flat.dtype, flat.size)
    return buf


def allreduce(comm: Communicator, buf: np.ndarray, algorithm: str = "ring",
              label: str = "allreduce", cid: int | None = None) -> np.ndarray:
    if algorithm == "ring":
        return ring_allreduce(comm, buf, label, cid)
    if algorithm in ("hierarchical", "hier"):
        return hierarchical_allreduce(comm, buf, label, cid)
    if algorithm == "oracle":
        return oracle_allreduce(comm, buf, label, cid)
    raise ValueError(f"unknown allreduce algorithm {algorithm!r}")


def allgather_bytes(comm: Communicator, item: bytes, label: str = "check") -> list[bytes]:
    """Ring allgather of one small byte string per rank, returned in rank order."""
    n, ep = comm.world_size, comm.endpoint
    cid = comm.next_cid()
    out = [b""] * n
    out[comm.rank] = bytes(item)
    if n == 1:
        return out
    ring = comm.ring_order
    p = ring.index(comm.rank)
    right, left = ring[(p + 1) % n], ring[(p - 1) % n]
    tag = make_tag(cid, PH_ALLGATHER)
    for s in range(n - 1):
        ep.send(right, tag, out[ring[(p - s) % n]], label)
        out[ring[(p - s - 1) % n]] = ep.recv(left, tag, label)
    return out


def ring_bytes_sent(length: int, n: int, itemsize: int, position: int = 0) -> int:
    """Exact payload bytes a ring position sends in one ring allreduce."""
    if n == 1:
        return 0
    sizes = [b - a for a, b in segment_bounds(length, n)]
    total = sum(sizes)
    rs = total - sizes[(position + 1) % n]
    ag = total - sizes[(position + 2) % n]
    return (rs + ag) * itemsize
