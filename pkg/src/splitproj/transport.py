"""Wire framing for cut-interface messages and two byte-exact carriers.

Frame layout (little-endian)::

    magic "SPL1" | u8 msg_type | u32 client_id | u64 step | u32 batch | u32 dim | payload

The payload is ``batch * dim`` float32 values.  ``SETUP_R`` frames carry a
16-byte extension (u32 d, u32 k, u64 seed) before the float payload, with
``batch = 1`` and ``dim = d * k``.
"""
from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (CorruptFrame, Disconnected, IncompleteFrame, InvalidArgument, TimedOut,
                     UnsupportedVersion)

MAGIC = b"SPL1"
HEADER = struct.Struct("<4sBIQII")
HEADER_SIZE = HEADER.size  # 25
SETUP_EXT_SIZE = 16
MAX_PAYLOAD_BYTES = 1 << 31


class MsgType(enum.IntEnum):
    SETUP_R = 0x01
    Z_FWD = 0x02
    U_FWD = 0x03
    GRAD_U = 0x04
    GRAD_Z = 0x05


@dataclass(eq=False)
class WireMessage:
    msg_type: MsgType
    client_id: int
    step: int
    payload: np.ndarray
    extension: bytes = b""

    def __post_init__(self):
        self.msg_type = MsgType(self.msg_type)
        self.payload = np.asarray(self.payload, dtype=np.float32)
        if self.payload.ndim != 2:
            raise InvalidArgument(f"payload must be (batch, dim), got shape {self.payload.shape}")
        want = SETUP_EXT_SIZE if self.msg_type == MsgType.SETUP_R else 0
        if len(self.extension) != want:
            raise InvalidArgument(f"{self.msg_type.name} needs a {want}-byte extension")

    @property
    def batch(self) -> int:
        return self.payload.shape[0]

    @property
    def dim(self) -> int:
        return self.payload.shape[1]

    @property
    def nbytes(self) -> int:
        return HEADER_SIZE + len(self.extension) + 4 * self.payload.size

    def __eq__(self, other):
        if not isinstance(other, WireMessage):
            return NotImplemented
        return encode(self) == encode(other)

    def __repr__(self):
        return (f"WireMessage({self.msg_type.name}, client={self.client_id}, step={self.step}, "
                f"batch={self.batch}, dim={self.dim})")


def encode(msg: WireMessage) -> bytes:
    payload = np.ascontiguousarray(msg.payload, dtype="<f4")
    if payload.shape != (msg.batch, msg.dim):
        raise InvalidArgument("declared batch/dim do not match payload")
    head = HEADER.pack(MAGIC, int(msg.msg_type), msg.client_id, msg.step, msg.batch, msg.dim)
    return head + msg.extension + payload.tobytes()


def _parse_header(data) -> tuple[MsgType, int, int, int, int, int]:
    """Validate a header and return it with the full frame length."""
    probe = bytes(data[:4])
    if probe != MAGIC[:len(probe)]:
        raise CorruptFrame(f"bad magic {probe!r}")
    if len(data) < HEADER_SIZE:
        raise IncompleteFrame(f"need {HEADER_SIZE} header bytes, have {len(data)}")
    _, mtype, client_id, step, batch, dim = HEADER.unpack_from(data)
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise UnsupportedVersion(f"unknown message type 0x{mtype:02x}") from None
    payload = 4 * batch * dim
    if payload > MAX_PAYLOAD_BYTES:
        raise CorruptFrame(f"declared payload of {payload} bytes exceeds limit")
    ext = SETUP_EXT_SIZE if mtype == MsgType.SETUP_R else 0
    return mtype, client_id, step, batch, dim, HEADER_SIZE + ext + payload


def frame_length(header: bytes) -> int:
    return _parse_header(header)[-1]


def decode(data: bytes) -> WireMessage:
    mtype, client_id, step, batch, dim, total = _parse_header(data)
    if len(data) < total:
        raise IncompleteFrame(f"frame needs {total} bytes, have {len(data)}")
    if len(data) > total:
        raise CorruptFrame(f"{len(data) - total} trailing bytes after frame")
    ext_end = HEADER_SIZE + (SETUP_EXT_SIZE if mtype == MsgType.SETUP_R else 0)
    payload = np.frombuffer(data, dtype="<f4", offset=ext_end).reshape(batch, dim)
    return WireMessage(mtype, client_id, step, payload.astype(np.float32),
                       bytes(data[HEADER_SIZE:ext_end]))


@dataclass
class Counters:
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0
    by_type: dict = field(default_factory=dict)

    def record(self, direction: str, msg_type: MsgType, n: int):
        key = f"{direction}:{msg_type.name}"
        self.by_type[key] = self.by_type.get(key, 0) + n


class Endpoint:
    """One side of a bidirectional, ordered, lossless message link."""

    def __init__(self, timeout: float | None = None):
        self.timeout = timeout
        self.counters = Counters()
        self._send_lock = threading.Lock()

    def send(self, msg: WireMessage):
        data = encode(msg)
        with self._send_lock:
            self._send_bytes(data)
            self.counters.bytes_sent += len(data)
            self.counters.messages_sent += 1
            self.counters.record("sent", msg.msg_type, len(data))

    def recv(self, timeout: float | None = None) -> WireMessage:
        data = self._recv_bytes(self.timeout if timeout is None else timeout)
        msg = decode(data)
        self.counters.bytes_received += len(data)
        self.counters.messages_received += 1
        self.counters.record("received", msg.msg_type, len(data))
        return msg

    def _send_bytes(self, data: bytes):
        raise NotImplementedError

    def _recv_bytes(self, timeout) -> bytes:
        raise NotImplementedError

    def close(self):
        pass


_CLOSED = object()


class QueueEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout=None):
        super().__init__(timeout)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send_bytes(self, data):
        if self._closed:
            raise Disconnected("endpoint closed")
        self._outbox.put(data)

    def _recv_bytes(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimedOut(f"no frame within {timeout}s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise Disconnected("peer closed")
        return item

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def channel_pair(timeout: float | None = None) -> tuple[QueueEndpoint, QueueEndpoint]:
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    return QueueEndpoint(b_to_a, a_to_b, timeout), QueueEndpoint(a_to_b, b_to_a, timeout)


def parse_address(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, _, port = str(addr).rpartition(":")
    if not host or not port.isdigit():
        raise InvalidArgument(f"address must look like HOST:PORT, got {addr!r}")
    return host, int(port)


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, timeout=None):
        super().__init__(timeout)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buffer = bytearray()

    def _send_bytes(self, data):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise Disconnected(f"send failed: {exc}") from None

    def _read(self, n: int, timeout):
        self.sock.settimeout(timeout)
        while len(self._buffer) < n:
            try:
                chunk = self.sock.recv(max(65536, n - len(self._buffer)))
            except socket.timeout:
                raise TimedOut(f"no frame within {timeout}s") from None
            except OSError as exc:
                raise Disconnected(f"recv failed: {exc}") from None
            if not chunk:
                raise Disconnected("peer closed")
            self._buffer += chunk

    def _recv_bytes(self, timeout):
        self._read(HEADER_SIZE, timeout)
        total = frame_length(bytes(self._buffer[:HEADER_SIZE]))
        self._read(total, timeout)
        data = bytes(self._buffer[:total])
        del self._buffer[:total]
        return data

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Listener:
    def __init__(self, addr, backlog: int = 16):
        host, port = parse_address(addr)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(backlog)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> SocketEndpoint:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TimedOut(f"no connection within {timeout}s") from None
        conn.settimeout(None)
        return SocketEndpoint(conn)

    def close(self):
        self.sock.close()


def tcp_listen(addr) -> Listener:
    return Listener(addr)


def tcp_connect(addr, timeout: float | None = 10.0) -> SocketEndpoint:
    host, port = parse_address(addr)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except socket.timeout:
        raise TimedOut(f"connect to {host}:{port} timed out") from None
    except OSError as exc:
        raise Disconnected(f"connect to {host}:{port} failed: {exc}") from None
    sock.settimeout(None)
    return SocketEndpoint(sock)
