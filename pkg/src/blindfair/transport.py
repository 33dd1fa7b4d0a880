"""Duplex framed channels between the two computing parties.

Wire format of one frame::

    length  u32 little-endian   (payload bytes only)
    tag     u8                  (see ``Tag``)
    payload ``length`` bytes

Two implementations share the framing: ``InProcChannel`` (queue pair, for
tests and ``--loopback``) and ``TcpChannel``.
"""

from __future__ import annotations

import enum
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass

from .errors import (ChannelClosed, ConfigMismatch, FrameTooLarge, HandshakeTimeout,
                     ProtocolAbort, ProtocolError, UnknownTag, VersionMismatch)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 1 << 30
HANDSHAKE_TIMEOUT = 10.0

_HDR = struct.Struct("<IB")
_HELLO = struct.Struct("<4sHB")
_HELLO_MAGIC = b"BFHS"


class Tag(enum.IntEnum):
    HANDSHAKE = 0x01
    SHARE_BATCH = 0x02
    BEAVER_EF = 0x03
    BIT_BATCH = 0x04
    RECONSTRUCT = 0x05
    CERTIFICATE = 0x06
    ABORT = 0x07


class Role(enum.IntEnum):
    MODELER = 1
    REGULATOR = 2

    @classmethod
    def parse(cls, name) -> "Role":
        if isinstance(name, Role):
            return name
        try:
            return {"modeler": cls.MODELER, "m": cls.MODELER,
                    "regulator": cls.REGULATOR, "reg": cls.REGULATOR}[str(name).lower()]
        except KeyError:
            raise ValueError(f"unknown role {name!r}") from None

    @property
    def peer(self) -> "Role":
        return Role.REGULATOR if self is Role.MODELER else Role.MODELER


@dataclass(frozen=True)
class Frame:
    tag: int
    payload: bytes = b""

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise FrameTooLarge(f"payload of {len(self.payload)} bytes exceeds 2^30")
        tag = _check_tag(self.tag)
        return _HDR.pack(len(self.payload), tag) + bytes(self.payload)

    @classmethod
    def decode(cls, buf: bytes) -> "Frame":
        if len(buf) < _HDR.size:
            raise ProtocolError("short frame header")
        length, tag = _HDR.unpack_from(buf)
        if length != len(buf) - _HDR.size:
            raise ProtocolError(f"frame length {length} does not match {len(buf) - _HDR.size}")
        return cls(_check_tag(tag), bytes(buf[_HDR.size:]))


def _check_tag(tag: int) -> Tag:
    try:
        return Tag(tag)
    except ValueError:
        raise UnknownTag(f"unregistered frame tag 0x{int(tag):02x}") from None


@dataclass
class ChannelStats:
    frames_sent: int = 0
    bytes_sent: int = 0
    rounds: int = 0
    frames_recv: int = 0
    bytes_recv: int = 0

    def copy(self) -> "ChannelStats":
        return ChannelStats(**vars(self))

    def __sub__(self, other: "ChannelStats") -> "ChannelStats":
        return ChannelStats(**{k: getattr(self, k) - getattr(other, k) for k in vars(self)})


class Channel:
    """Base class: framing, statistics and abort handling.

    ``rounds`` counts changes of direction as seen by this endpoint: a send
    that follows a receive (or opens the conversation) starts a new round.
    """

    def __init__(self):
        self.stats = ChannelStats()
        self._last_was_send = False
        self.closed = False

    # transport hooks
    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self, timeout: float | None) -> bytes:
        raise NotImplementedError

    def send(self, tag: int, payload: bytes = b"") -> None:
        if self.closed:
            raise ChannelClosed("send on closed channel")
        data = Frame(tag, payload).encode()
        if not self._last_was_send:
            self.stats.rounds += 1
        self._last_was_send = True
        self._send_bytes(data)
        self.stats.frames_sent += 1
        self.stats.bytes_sent += len(data)

    def recv(self, timeout: float | None = None) -> Frame:
        if self.closed:
            raise ChannelClosed("recv on closed channel")
        data = self._recv_bytes(timeout)
        frame = Frame.decode(data)
        self._last_was_send = False
        self.stats.frames_recv += 1
        self.stats.bytes_recv += len(data)
        return frame

    def expect(self, tag: int, timeout: float | None = None) -> bytes:
        frame = self.recv(timeout)
        if frame.tag == Tag.ABORT and tag != Tag.ABORT:
            raise ProtocolAbort(frame.payload.decode("utf-8", "replace"))
        if frame.tag != tag:
            raise ProtocolError(f"expected frame {Tag(tag).name}, got {Tag(frame.tag).name}")
        return frame.payload

    def abort(self, reason: str) -> None:
        try:
            self.send(Tag.ABORT, reason.encode("utf-8")[:4096])
        except Exception:  # peer may already be gone
            pass

    def close(self) -> None:
        self.closed = True


class InProcChannel(Channel):
    """One endpoint of an in-memory duplex pipe."""

    _CLOSE = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self.inbox = inbox
        self.outbox = outbox

    @classmethod
    def pair(cls) -> tuple["InProcChannel", "InProcChannel"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def _send_bytes(self, data: bytes) -> None:
        self.outbox.put(data)

    def _recv_bytes(self, timeout):
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise HandshakeTimeout(f"no frame within {timeout} s") from None
        if item is self._CLOSE:
            self.closed = True
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self) -> None:
        if not self.closed:
            self.outbox.put(self._CLOSE)
        super().close()


class TcpChannel(Channel):
    """Framed channel over a connected TCP socket.

    A reader thread drains the socket into a queue so that two peers that
    both send a large frame before receiving can never deadlock on full
    kernel buffers.
    """

    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(None)
        self._inbox: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_exact(self, n: int) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except OSError:
                return None
            if not chunk:
                return None
            buf += chunk
        return bytes(buf)

    def _read_loop(self) -> None:
        while True:
            hdr = self._read_exact(_HDR.size)
            if hdr is None:
                break
            length, _ = _HDR.unpack(hdr)
            if length > MAX_PAYLOAD:
                self._inbox.put(FrameTooLarge(f"incoming frame of {length} bytes"))
                break
            body = self._read_exact(length) if length else b""
            if body is None:
                break
            self._inbox.put(hdr + body)
        self._inbox.put(None)

    def _send_bytes(self, data: bytes) -> None:
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc

    def _recv_bytes(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise HandshakeTimeout(f"no frame within {timeout} s") from None
        if item is None:
            self.closed = True
            self._inbox.put(None)
            raise ChannelClosed("connection closed by peer")
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        if not self.closed:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()
        super().close()


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = str(addr).rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def hello(ch: Channel, role: Role, version: int = PROTOCOL_VERSION,
          timeout: float = HANDSHAKE_TIMEOUT) -> None:
    """Transport-level greeting exchanged right after connecting."""
    ch.send(Tag.HANDSHAKE, _HELLO.pack(_HELLO_MAGIC, version, int(role)))
    payload = ch.expect(Tag.HANDSHAKE, timeout=timeout)
    try:
        magic, peer_version, peer_role = _HELLO.unpack(payload)
    except struct.error:
        raise ProtocolError("malformed hello frame") from None
    if magic != _HELLO_MAGIC:
        raise ProtocolError("peer is not speaking this protocol")
    if peer_version != version:
        raise VersionMismatch(f"protocol version {version} vs peer {peer_version}")
    if peer_role == int(role):
        raise ConfigMismatch(f"both endpoints claim role {role.name}")


def connect_tcp(addr: str, role, timeout: float = HANDSHAKE_TIMEOUT,
                version: int = PROTOCOL_VERSION) -> TcpChannel:
    host, port = parse_addr(addr)
    role = Role.parse(role)
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            break
        except (ConnectionRefusedError, socket.timeout, OSError) as exc:
            if time.monotonic() >= deadline:
                raise ConnectionRefusedError(f"could not reach {addr}: {exc}") from exc
            time.sleep(0.05)
    ch = TcpChannel(sock)
    try:
        hello(ch, role, version, timeout=max(0.1, deadline - time.monotonic()))
    except Exception:
        ch.close()
        raise
    log.debug("connected to %s as %s", addr, role.name)
    return ch


class Listener:
    """Bound listening socket; ``accept`` yields handshaken channels."""

    def __init__(self, addr: str):
        host, port = parse_addr(addr)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(1)

    @property
    def address(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def accept(self, role, timeout: float = HANDSHAKE_TIMEOUT,
               version: int = PROTOCOL_VERSION) -> TcpChannel:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise HandshakeTimeout(f"no peer connected within {timeout} s") from None
        ch = TcpChannel(conn)
        try:
            hello(ch, Role.parse(role), version, timeout=timeout)
        except Exception:
            ch.close()
            raise
        return ch

    def close(self) -> None:
        self.sock.close()


def accept_tcp(addr: str, role, timeout: float = HANDSHAKE_TIMEOUT,
               version: int = PROTOCOL_VERSION) -> TcpChannel:
    lst = Listener(addr)
    try:
        return lst.accept(role, timeout, version)
    finally:
        lst.close()
