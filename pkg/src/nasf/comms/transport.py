"""Point-to-point framed channels: TCP sockets or in-process queues.

Addresses are ``host:port`` for TCP and ``inproc://name`` for the in-process
transport, which moves the same encoded frames through queues so both
transports exercise identical framing code.
"""

from __future__ import annotations

import queue
import socket
import threading
import time

from nasf.comms.protocol import HEADER, CommError, Envelope, InitError, decode, decode_header

INPROC_PREFIX = "inproc://"
_CONNECT_RETRY = 0.05


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)


class Channel:
    peer_label = "peer"

    def send(self, envelope: Envelope) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None) -> Envelope:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class Listener:
    address: str

    def accept(self, timeout: float | None) -> Channel:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


# --------------------------------------------------------------------------
# TCP
# --------------------------------------------------------------------------

class SocketChannel(Channel):
    def __init__(self, sock: socket.socket, label: str = "peer"):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._closed = False
        self.peer_label = label

    def send(self, envelope: Envelope) -> None:
        if self._closed:
            raise CommError(f"channel to {self.peer_label} is closed")
        try:
            self._sock.settimeout(None)
            self._sock.sendall(envelope.encode())
        except OSError as exc:
            raise CommError(f"send to {self.peer_label} failed: {exc}") from exc

    def _read_exact(self, n: int, deadline: float | None) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise CommError(f"timed out waiting for {self.peer_label}")
            self._sock.settimeout(remaining)
            try:
                chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            except socket.timeout:
                raise CommError(f"timed out waiting for {self.peer_label}") from None
            except OSError as exc:
                raise CommError(f"connection to {self.peer_label} failed: {exc}") from exc
            if not chunk:
                raise CommError(f"connection to {self.peer_label} closed")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, timeout: float | None) -> Envelope:
        if self._closed:
            raise CommError(f"channel to {self.peer_label} is closed")
        deadline = None if timeout is None else time.monotonic() + timeout
        header = self._read_exact(HEADER.size, deadline)
        length, _, _ = decode_header(header)
        return decode(header + self._read_exact(length, deadline))

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class SocketListener(Listener):
    def __init__(self, address: str):
        host, port = parse_address(address)
        try:
            self._sock = socket.create_server((host, port), reuse_port=False)
        except OSError as exc:
            raise InitError(f"cannot listen on {address}: {exc}") from exc
        bound_host, bound_port = self._sock.getsockname()[:2]
        self.address = f"{bound_host}:{bound_port}"

    def accept(self, timeout: float | None) -> Channel:
        self._sock.settimeout(timeout)
        try:
            conn, peer = self._sock.accept()
        except socket.timeout:
            raise InitError("timed out waiting for workers to connect") from None
        return SocketChannel(conn, f"{peer[0]}:{peer[1]}")

    def close(self) -> None:
        self._sock.close()


def _socket_connect(address: str, timeout: float) -> Channel:
    host, port = parse_address(address)
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        try:
            sock = socket.create_connection((host, port), timeout=max(remaining, 0.01))
            return SocketChannel(sock, address)
        except OSError as exc:
            if time.monotonic() + _CONNECT_RETRY >= deadline:
                raise InitError(f"cannot reach master at {address}: {exc}") from exc
            time.sleep(_CONNECT_RETRY)


# --------------------------------------------------------------------------
# in-process
# --------------------------------------------------------------------------

_EOF = None


class InProcChannel(Channel):
    def __init__(self, label: str = "peer"):
        self._inbox: queue.Queue = queue.Queue()
        self._peer: InProcChannel | None = None
        self._closed = False
        self.peer_label = label

    @classmethod
    def pair(cls, label_a: str = "peer", label_b: str = "peer"):
        a, b = cls(label_a), cls(label_b)
        a._peer, b._peer = b, a
        return a, b

    def send(self, envelope: Envelope) -> None:
        if self._closed or self._peer is None:
            raise CommError(f"channel to {self.peer_label} is closed")
        if self._peer._closed:
            raise CommError(f"connection to {self.peer_label} closed")
        self._peer._inbox.put(envelope.encode())

    def recv(self, timeout: float | None) -> Envelope:
        if self._closed:
            raise CommError(f"channel to {self.peer_label} is closed")
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise CommError(f"timed out waiting for {self.peer_label}") from None
        if frame is _EOF:
            self._inbox.put(_EOF)
            raise CommError(f"connection to {self.peer_label} closed")
        return decode(frame)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._peer is not None:
            self._peer._inbox.put(_EOF)


_registry: dict[str, "InProcListener"] = {}
_registry_lock = threading.Lock()


class InProcListener(Listener):
    def __init__(self, address: str):
        with _registry_lock:
            if address in _registry:
                raise InitError(f"{address} is already in use")
            _registry[address] = self
        self.address = address
        self._pending: queue.Queue = queue.Queue()
        self._count = 0

    def accept(self, timeout: float | None) -> Channel:
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            raise InitError("timed out waiting for workers to connect") from None

    def _connect(self) -> Channel:
        self._count += 1
        server_end, client_end = InProcChannel.pair(f"connection {self._count}", self.address)
        self._pending.put(server_end)
        return client_end

    def close(self) -> None:
        with _registry_lock:
            if _registry.get(self.address) is self:
                del _registry[self.address]


def _inproc_connect(address: str, timeout: float) -> Channel:
    deadline = time.monotonic() + timeout
    while True:
        with _registry_lock:
            listener = _registry.get(address)
            if listener is not None:
                return listener._connect()
        if time.monotonic() >= deadline:
            raise InitError(f"cannot reach master at {address}: nothing listening")
        time.sleep(_CONNECT_RETRY)


def listen(address: str) -> Listener:
    if address.startswith(INPROC_PREFIX):
        return InProcListener(address)
    return SocketListener(address)


def connect(address: str, timeout: float) -> Channel:
    if address.startswith(INPROC_PREFIX):
        return _inproc_connect(address, timeout)
    return _socket_connect(address, timeout)
