"""Point-to-point message delivery between ranks.

Two interchangeable backends share one framing protocol and one mailbox
implementation: :class:`InProcFabric` hands frames between threads of a single
process, :class:`TcpEndpoint` moves them over a full mesh of TCP sockets.

Every frame is ``magic | msg_type | tag | src_rank | payload_len | payload``
with little-endian header fields.  Byte accounting counts payload only.
"""

from __future__ import annotations

import collections
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

MAGIC = b"GFL1"
MSG_DATA = 0x01
MSG_BARRIER = 0x02
MSG_HANDSHAKE = 0x03

HEADER = struct.Struct("<4sBIIQ")
MAX_PAYLOAD = 2**63 - 1
DEFAULT_TIMEOUT = 30.0


class TransportError(RuntimeError):
    """Peer unreachable, connection reset, or endpoint closed."""


class ProtocolError(TransportError):
    """Malformed frame or a violated collective protocol."""


class TransportTimeout(TransportError):
    pass


@dataclass
class Frame:
    msg_type: int
    tag: int
    src_rank: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_frame(self.msg_type, self.tag, self.src_rank, self.payload)


def encode_frame(msg_type: int, tag: int, src_rank: int, payload: bytes) -> bytes:
    n = len(payload)
    if n > MAX_PAYLOAD:
        raise ValueError(f"payload of {n} bytes exceeds the frame limit")
    return HEADER.pack(MAGIC, msg_type, tag, src_rank, n) + bytes(payload)


def decode_header(header: bytes) -> tuple[int, int, int, int]:
    """Return ``(msg_type, tag, src_rank, payload_len)`` or raise ProtocolError."""
    if len(header) != HEADER.size:
        raise ProtocolError(f"short frame header ({len(header)} bytes)")
    magic, msg_type, tag, src, n = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    return msg_type, tag, src, n


def decode_frame(data: bytes) -> Frame:
    msg_type, tag, src, n = decode_header(bytes(data[: HEADER.size]))
    payload = bytes(data[HEADER.size:])
    if len(payload) != n:
        raise ProtocolError(f"payload_len {n} but {len(payload)} bytes follow the header")
    return Frame(msg_type, tag, src, payload)


@dataclass
class PhaseCounters:
    payload_bytes_sent: int = 0
    payload_bytes_received: int = 0
    frames_sent: int = 0
    max_frame_bytes: int = 0


@dataclass
class TrafficStats:
    """Per-rank payload accounting, grouped by collective-phase label."""

    rank: int = 0
    phases: dict = field(default_factory=lambda: collections.defaultdict(PhaseCounters))
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_send(self, label: str, nbytes: int) -> None:
        with self._lock:
            c = self.phases[label]
            c.payload_bytes_sent += nbytes
            c.frames_sent += 1
            c.max_frame_bytes = max(c.max_frame_bytes, nbytes)

    def record_recv(self, label: str, nbytes: int) -> None:
        with self._lock:
            self.phases[label].payload_bytes_received += nbytes

    def _total(self, attr: str, prefix: str) -> int:
        with self._lock:
            return sum(getattr(c, attr) for k, c in self.phases.items() if k.startswith(prefix))

    def sent(self, prefix: str = "") -> int:
        return self._total("payload_bytes_sent", prefix)

    def received(self, prefix: str = "") -> int:
        return self._total("payload_bytes_received", prefix)

    def frames(self, prefix: str = "") -> int:
        return self._total("frames_sent", prefix)

    def max_frame(self, prefix: str = "") -> int:
        with self._lock:
            return max((c.max_frame_bytes for k, c in self.phases.items() if k.startswith(prefix)),
                       default=0)

    def snapshot(self) -> dict:
        with self._lock:
            return {k: PhaseCounters(**vars(c)) for k, c in self.phases.items()}

    def reset(self) -> None:
        with self._lock:
            self.phases.clear()


class Mailbox:
    """Frames queued by ``(msg_type, src, tag)``; FIFO within each key."""

    def __init__(self):
        self._queues: dict = collections.defaultdict(collections.deque)
        self._cond = threading.Condition()
        self._dead: dict[int, str] = {}
        self._closed = False

    def put(self, frame: Frame) -> None:
        with self._cond:
            self._queues[(frame.msg_type, frame.src_rank, frame.tag)].append(frame.payload)
            self._cond.notify_all()

    def mark_dead(self, src: int, reason: str) -> None:
        with self._cond:
            self._dead.setdefault(src, reason)
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def get(self, msg_type: int, src: int, tag: int, timeout: float) -> bytes:
        key = (msg_type, src, tag)
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                q = self._queues.get(key)
                if q:
                    payload = q.popleft()
                    if not q:
                        del self._queues[key]
                    return payload
                if src in self._dead:
                    reason = self._dead[src]
                    if isinstance(reason, ProtocolError):
                        raise reason
                    raise TransportError(f"rank {src} unreachable: {reason}")
                if self._closed:
                    raise TransportError("endpoint closed")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportTimeout(
                        f"no frame from rank {src} with tag {tag} within {timeout:g} s"
                    )
                self._cond.wait(remaining)


class Endpoint:
    """Rank-local handle for sending and receiving frames.

    Subclasses implement ``_deliver``; everything else (matching, barrier,
    accounting) is shared so both backends behave the same.
    """

    def __init__(self, rank: int, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        if world_size < 1:
            raise ValueError("world_size must be >= 1")
        if not 0 <= rank < world_size:
            raise ValueError(f"rank {rank} outside [0, {world_size})")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.stats = TrafficStats(rank)
        self.mailbox = Mailbox()
        self._barrier_seq = 0

    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.world_size or peer == self.rank:
            raise ValueError(f"invalid peer rank {peer} for rank {self.rank} of {self.world_size}")

    def _deliver(self, dst: int, data: bytes) -> None:
        raise NotImplementedError

    def send(self, dst: int, tag: int, payload, label: str = "data", msg_type: int = MSG_DATA) -> None:
        self._check_peer(dst)
        payload = bytes(payload)
        data = encode_frame(msg_type, tag, self.rank, payload)
        self._deliver(dst, data)
        self.stats.record_send(label, len(payload))

    def recv(self, src: int, tag: int, label: str = "data", msg_type: int = MSG_DATA,
             timeout: float | None = None) -> bytes:
        self._check_peer(src)
        payload = self.mailbox.get(msg_type, src, tag, self.timeout if timeout is None else timeout)
        self.stats.record_recv(label, len(payload))
        return payload

    def barrier(self, timeout: float | None = None) -> None:
        """Block until every rank has entered; rank 0 coordinates."""
        timeout = self.timeout if timeout is None else timeout
        seq = self._barrier_seq
        self._barrier_seq = (seq + 1) & 0xFFFFFFFF
        if self.world_size == 1:
            return
        if self.rank == 0:
            deadline = time.monotonic() + timeout
            missing = []
            for r in range(1, self.world_size):
                try:
                    self.recv(r, seq, "barrier", MSG_BARRIER,
                              timeout=max(0.0, deadline - time.monotonic()))
                except TransportTimeout:
                    missing.append(r)
            if missing:
                raise TransportTimeout(f"barrier {seq}: ranks {missing} never arrived")
            for r in range(1, self.world_size):
                self.send(r, seq, b"", "barrier", MSG_BARRIER)
        else:
            self.send(0, seq, b"", "barrier", MSG_BARRIER)
            try:
                self.recv(0, seq, "barrier", MSG_BARRIER, timeout=timeout)
            except TransportTimeout:
                raise TransportTimeout(
                    f"barrier {seq}: no release from coordinator rank 0 within {timeout:g} s"
                ) from None

    def close(self) -> None:
        self.mailbox.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcEndpoint(Endpoint):
    def __init__(self, fabric: "InProcFabric", rank: int, timeout: float):
        super().__init__(rank, fabric.world_size, timeout)
        self.fabric = fabric
        self.closed = False

    def _deliver(self, dst: int, data: bytes) -> None:
        peer = self.fabric.endpoints[dst]
        if peer.closed:
            raise TransportError(f"rank {dst} unreachable: endpoint closed")
        # the receiver parses the wire bytes, same as the TCP reader
        peer.mailbox.put(decode_frame(data))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        super().close()
        for ep in self.fabric.endpoints:
            if ep is not self:
                ep.mailbox.mark_dead(self.rank, "peer closed")


class InProcFabric:
    """N endpoints wired together through in-memory mailboxes."""

    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        self.world_size = world_size
        self.endpoints = [InProcEndpoint(self, r, timeout) for r in range(world_size)]

    def __getitem__(self, rank: int) -> InProcEndpoint:
        return self.endpoints[rank]

    def __len__(self):
        return self.world_size

    def close(self) -> None:
        for ep in self.endpoints:
            ep.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionResetError("connection closed by peer")
        got += k
    return bytes(buf)


def _read_frame(sock: socket.socket) -> Frame:
    msg_type, tag, src, n = decode_header(_recv_exact(sock, HEADER.size))
    return Frame(msg_type, tag, src, _recv_exact(sock, n) if n else b"")


_HANDSHAKE = struct.Struct("<II")


class TcpEndpoint(Endpoint):
    """Full-mesh TCP endpoint.

    Rank ``i`` listens on ``addresses[i]`` and dials every lower rank, so rank
    0 accepts a connection from everybody and is where a world-size mismatch
    is caught first.  One reader thread per peer drains frames into the
    mailbox so sends never deadlock against an unread socket.
    """

    def __init__(self, rank: int, addresses: list[str], timeout: float = DEFAULT_TIMEOUT,
                 connect_timeout: float | None = None):
        super().__init__(rank, len(addresses), timeout)
        self.addresses = list(addresses)
        self._socks: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = {}
        self._readers: list[threading.Thread] = []
        self.closed = False
        self._connect(self.timeout if connect_timeout is None else connect_timeout)

    def _connect(self, timeout: float) -> None:
        n = self.world_size
        if n == 1:
            return
        deadline = time.monotonic() + timeout
        host, port = parse_address(self.addresses[self.rank])
        listener = None
        if self.rank < n - 1:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind((host, port))
            listener.listen(n)
        try:
            for peer in range(self.rank):
                self._register(peer, self._dial(peer, deadline))
            for _ in range(self.rank + 1, n):
                listener.settimeout(max(0.01, deadline - time.monotonic()))
                try:
                    conn, _ = listener.accept()
                except socket.timeout:
                    missing = [r for r in range(self.rank + 1, n) if r not in self._socks]
                    raise TransportTimeout(f"rank {self.rank}: ranks {missing} never connected") from None
                conn.settimeout(max(0.01, deadline - time.monotonic()))
                frame = _read_frame(conn)
                peer, their_n = _HANDSHAKE.unpack(frame.payload)
                if frame.msg_type != MSG_HANDSHAKE:
                    raise ProtocolError("expected handshake frame")
                conn.sendall(encode_frame(MSG_HANDSHAKE, 0, self.rank, _HANDSHAKE.pack(self.rank, n)))
                if their_n != n:
                    conn.close()
                    raise ProtocolError(f"rank {peer} reports world_size {their_n}, expected {n}")
                self._register(peer, conn)
        finally:
            if listener is not None:
                listener.close()
        for peer, sock in self._socks.items():
            sock.settimeout(None)
            t = threading.Thread(target=self._reader, args=(peer, sock), daemon=True,
                                 name=f"gflow-reader-{self.rank}<-{peer}")
            t.start()
            self._readers.append(t)

    def _dial(self, peer: int, deadline: float) -> socket.socket:
        host, port = parse_address(self.addresses[peer])
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=max(0.01, deadline - time.monotonic()))
                break
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise TransportError(f"rank {peer} at {self.addresses[peer]} unreachable: {exc}") from exc
                time.sleep(0.02)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(encode_frame(MSG_HANDSHAKE, 0, self.rank, _HANDSHAKE.pack(self.rank, self.world_size)))
        frame = _read_frame(sock)
        their_rank, their_n = _HANDSHAKE.unpack(frame.payload)
        if frame.msg_type != MSG_HANDSHAKE or their_rank != peer:
            raise ProtocolError(f"bad handshake from {self.addresses[peer]}")
        if their_n != self.world_size:
            raise ProtocolError(f"rank {peer} reports world_size {their_n}, expected {self.world_size}")
        return sock

    def _register(self, peer: int, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks[peer] = sock
        self._send_locks[peer] = threading.Lock()

    def _reader(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                frame = _read_frame(sock)
                if frame.src_rank != peer:
                    raise ProtocolError(f"frame claims src {frame.src_rank} on socket of rank {peer}")
                self.mailbox.put(frame)
        except ProtocolError as exc:
            self.mailbox.mark_dead(peer, exc)
            sock.close()
        except OSError as exc:
            self.mailbox.mark_dead(peer, str(exc) or type(exc).__name__)

    def _deliver(self, dst: int, data: bytes) -> None:
        if self.closed:
            raise TransportError("endpoint closed")
        try:
            with self._send_locks[dst]:
                self._socks[dst].sendall(data)
        except OSError as exc:
            raise TransportError(f"rank {dst} unreachable: {exc}") from exc

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        super().close()
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
