"""Binary wire messages and duplex transports with byte metering.

Every frame starts with a 16-byte little-endian header::

    u32 length     total frame length including this header
    u8  tag        MessageType
    u8  version    PROTOCOL_VERSION
    u16 iteration  ICP iteration (1-based) or 0
    u16 count      number of records in the body
    u16 flags      message-specific bits
    u32 crc32      CRC-32 of the body

Body layouts are listed in docs/protocol.md.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field

from .errors import ProtocolError, SessionAbort

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<IBBHHHI")
HEADER_SIZE = HEADER.size  # 16
MAX_FRAME = 1 << 30


class MessageType(enum.IntEnum):
    HELLO = 0
    SAMPLES = 1
    MATCHES = 2
    POSE_UPDATE = 3
    CONVERGED = 4
    ABORT = 5
    BLOCKSET = 6
    CONTAINER = 7


@dataclass(frozen=True)
class Message:
    tag: MessageType
    body: bytes = b""
    iteration: int = 0
    count: int = 0
    flags: int = 0

    def pack(self) -> bytes:
        return pack_message(self.tag, self.body, self.iteration, self.count, self.flags)

    def __len__(self):
        return HEADER_SIZE + len(self.body)


def pack_message(tag, body=b"", iteration=0, count=0, flags=0) -> bytes:
    body = bytes(body)
    return HEADER.pack(HEADER_SIZE + len(body), int(tag), PROTOCOL_VERSION,
                       iteration, count, flags, zlib.crc32(body)) + body


def unpack_message(frame: bytes) -> Message:
    if len(frame) < HEADER_SIZE:
        raise ProtocolError(f"short frame ({len(frame)} bytes)")
    length, tag, version, iteration, count, flags, crc = HEADER.unpack_from(frame)
    if length != len(frame):
        raise ProtocolError(f"frame length field {length} != received {len(frame)}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        tag = MessageType(tag)
    except ValueError:
        raise ProtocolError(f"unknown message tag {tag}") from None
    body = bytes(frame[HEADER_SIZE:])
    if zlib.crc32(body) != crc:
        raise ProtocolError(f"{tag.name} body checksum mismatch")
    return Message(tag, body, iteration, count, flags)


@dataclass
class WireLog:
    """Every frame that crossed a link, in send order."""

    entries: list = field(default_factory=list)  # (sender, MessageType, nbytes)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, sender, frame):
        with self.lock:
            self.entries.append((sender, MessageType(frame[4]), len(frame)))

    def total(self, sender=None, tag=None) -> int:
        return sum(n for s, t, n in self.entries
                   if (sender is None or s == sender) and (tag is None or t == tag))

    def sizes(self, sender=None, tag=None) -> list:
        return [n for s, t, n in self.entries
                if (sender is None or s == sender) and (tag is None or t == tag)]


class Endpoint:
    """One side of a duplex link. Sends whole frames, receives whole frames."""

    def __init__(self, name, log, timeout):
        self.name = name
        self.log = log
        self.timeout = timeout

    def send_message(self, msg: Message):
        frame = msg.pack()
        self._send(frame)
        self.log.add(self.name, frame)

    def send(self, tag, body=b"", iteration=0, count=0, flags=0):
        self.send_message(Message(MessageType(tag), bytes(body), iteration, count, flags))

    def recv(self, expect=None) -> Message:
        msg = unpack_message(self._recv())
        if msg.tag == MessageType.ABORT and expect is not None and MessageType.ABORT not in _as_tuple(expect):
            raise SessionAbort(f"peer aborted: {msg.body.decode(errors='replace')}")
        if expect is not None and msg.tag not in _as_tuple(expect):
            raise ProtocolError(f"{self.name}: expected {expect!r}, got {msg.tag.name}")
        return msg

    def _send(self, frame):
        raise NotImplementedError

    def _recv(self) -> bytes:
        raise NotImplementedError

    def close(self):
        pass


def _as_tuple(x):
    return tuple(x) if isinstance(x, (tuple, list, set, frozenset)) else (x,)


class _QueueEndpoint(Endpoint):
    def __init__(self, name, log, timeout, inbox, outbox):
        super().__init__(name, log, timeout)
        self._inbox, self._outbox = inbox, outbox

    def _send(self, frame):
        self._outbox.put(bytes(frame))

    def _recv(self):
        try:
            frame = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise SessionAbort(f"{self.name}: receive timed out") from None
        if frame is None:
            raise SessionAbort(f"{self.name}: link closed")
        return frame

    def close(self):
        self._outbox.put(None)


class _SocketEndpoint(Endpoint):
    def __init__(self, name, log, timeout, sock):
        super().__init__(name, log, timeout)
        self._sock = sock
        sock.settimeout(timeout)

    def _send(self, frame):
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise SessionAbort(f"{self.name}: send failed: {exc}") from exc

    def _read_exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            except OSError as exc:
                raise SessionAbort(f"{self.name}: receive failed: {exc}") from exc
            if not chunk:
                raise SessionAbort(f"{self.name}: connection closed")
            buf += chunk
        return bytes(buf)

    def _recv(self):
        head = self._read_exact(HEADER_SIZE)
        length = struct.unpack_from("<I", head)[0]
        if not HEADER_SIZE <= length <= MAX_FRAME:
            raise ProtocolError(f"{self.name}: bad frame length {length}")
        return head + self._read_exact(length - HEADER_SIZE)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


class Link:
    """A metered duplex channel between two named endpoints."""

    kind = "abstract"

    def __init__(self, names=("a", "b")):
        self.names = names
        self.log = WireLog()

    def endpoint(self, name) -> Endpoint:
        return self._endpoints[self.names.index(name)]

    def close(self):
        for ep in self._endpoints:
            ep.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessLink(Link):
    kind = "inprocess"

    def __init__(self, names=("a", "b"), timeout=60.0):
        super().__init__(names)
        q0, q1 = queue.Queue(), queue.Queue()
        self._endpoints = (_QueueEndpoint(names[0], self.log, timeout, q0, q1),
                           _QueueEndpoint(names[1], self.log, timeout, q1, q0))


class SocketLink(Link):
    """Stream-socket link (a connected ``socketpair``)."""

    kind = "socket"

    def __init__(self, names=("a", "b"), timeout=60.0):
        super().__init__(names)
        s0, s1 = socket.socketpair()
        self._endpoints = (_SocketEndpoint(names[0], self.log, timeout, s0),
                           _SocketEndpoint(names[1], self.log, timeout, s1))


TRANSPORTS = {"inprocess": InProcessLink, "socket": SocketLink}


def make_link(transport="inprocess", names=("a", "b")) -> Link:
    if isinstance(transport, str):
        try:
            return TRANSPORTS[transport](names)
        except KeyError:
            raise ValueError(f"unknown transport {transport!r}") from None
    return transport(names)


def handshake(ep: Endpoint, role: str, digest: bytes, initiator: bool):
    """Exchange HELLO frames pinning protocol version, role and intrinsics."""
    body = digest + role.encode()
    if initiator:
        ep.send(MessageType.HELLO, body)
        reply = ep.recv(MessageType.HELLO)
    else:
        reply = ep.recv(MessageType.HELLO)
        ep.send(MessageType.HELLO, body)
    if reply.body[:8] != digest:
        raise ProtocolError("intrinsics mismatch between peers")
    peer_role = reply.body[8:].decode(errors="replace")
    if peer_role == role:
        raise ProtocolError(f"both peers claim role {role!r}")
    return peer_role


class PeerThread(threading.Thread):
    """Runs a role function and keeps its result or exception."""

    def __init__(self, fn, *args, **kwargs):
        super().__init__(daemon=True)
        self._call = (fn, args, kwargs)
        self.result = None
        self.error = None

    def run(self):
        fn, args, kwargs = self._call
        try:
            self.result = fn(*args, **kwargs)
        except BaseException as exc:  # re-raised by join_result
            self.error = exc

    def join_result(self, timeout=None):
        self.join(timeout)
        if self.is_alive():
            raise SessionAbort("peer role did not finish")
        if self.error is not None:
            raise self.error
        return self.result
