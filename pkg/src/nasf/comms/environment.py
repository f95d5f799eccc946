"""Distributed environment: ranks, collectives, ordered printing, teardown.

All collectives are root-mediated (star topology through rank 0) and blocking
with a timeout. Reductions sum contributions in rank order 0, 1, 2, ... on
rank 0 and broadcast the one result, so every rank receives bitwise-identical
values.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import sys
import threading
import time
import uuid
from dataclasses import dataclass

import numpy as np

from nasf.comms import transport
from nasf.comms.protocol import (
    RANK_ASSIGN, ClosedEnvironmentError, CommError, Envelope, InitError, MsgType,
    ProtocolError, check_hello, decode_reals, encode_reals, hello_payload, pack_list,
    unpack_list,
)

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
# doubles per allreduce/broadcast round, keeps frames under the payload cap
CHUNK = 4 * 1024 * 1024
_OK, _FAIL = b"\x00", b"\x01"


def default_timeout() -> float:
    value = os.environ.get("NASF_TIMEOUT_SECS")
    return float(value) if value else DEFAULT_TIMEOUT


@dataclass
class EnvironmentConfig:
    role: str  # "master" or "worker"
    master_address: str | None = None
    expected_world_size: int = 1
    timeout: float | None = None


class Environment:
    """One process's (or thread's) view of the distributed world."""

    def __init__(self, rank: int, world_size: int, channels: dict[int, transport.Channel],
                 timeout: float = DEFAULT_TIMEOUT, stream=None):
        if not 0 <= rank < world_size:
            raise InitError(f"rank {rank} outside world of size {world_size}")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.stream = stream
        self._channels = channels
        self._seq = 0
        self._closed = False
        self._print_buffer: list[str] = []

    def __repr__(self):
        state = "closed" if self._closed else "open"
        return f"Environment(rank={self.rank}, world_size={self.world_size}, {state})"

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False

    @property
    def is_root(self) -> bool:
        return self.rank == 0

    @property
    def closed(self) -> bool:
        return self._closed

    # ---- plumbing --------------------------------------------------------

    def _require_open(self):
        if self._closed:
            raise ClosedEnvironmentError("environment has been shut down")

    def _next_tag(self) -> int:
        self._require_open()
        self._seq = (self._seq + 1) & 0xFFFFFFFF
        return self._seq

    def _abort(self):
        # unblock every peer quickly; they see a closed connection
        for ch in self._channels.values():
            ch.close()
        self._closed = True

    def _send(self, rank: int, kind: MsgType, tag: int, payload: bytes = b"") -> None:
        try:
            self._channels[rank].send(Envelope(kind, tag, payload))
        except CommError as exc:
            self._abort()
            raise CommError(f"lost rank {rank}: {exc}") from exc

    def _recv(self, rank: int, kind: MsgType, tag: int, timeout: float | None = ...) -> bytes:
        timeout = self.timeout if timeout is ... else timeout
        try:
            env = self._channels[rank].recv(timeout)
        except CommError as exc:
            self._abort()
            raise CommError(f"lost rank {rank}: {exc}") from exc
        if env.msg_type is MsgType.SHUTDOWN:
            self._abort()
            raise CommError(f"rank {rank} shut down during {kind.name}")
        if env.msg_type is not kind or env.tag != tag:
            self._abort()
            raise ProtocolError(f"expected {kind.name} #{tag} from rank {rank}, "
                                f"got {env.msg_type.name} #{env.tag}")
        return env.payload

    def _gather_to_root(self, kind: MsgType, tag: int, payload: bytes) -> list[bytes] | None:
        if self.rank != 0:
            self._send(0, kind, tag, payload)
            return None
        return [payload] + [self._recv(r, kind, tag) for r in range(1, self.world_size)]

    def _release(self, kind: MsgType, tag: int, payload: bytes) -> bytes:
        """Root sends ``payload`` to every worker; workers receive it."""
        if self.rank == 0:
            for r in range(1, self.world_size):
                self._send(r, kind, tag, payload)
            return payload
        return self._recv(0, kind, tag)

    @staticmethod
    def _status(payload: bytes) -> bytes:
        if payload[:1] == _FAIL:
            raise ProtocolError(payload[1:].decode("utf-8", "replace"))
        return payload[1:]

    # ---- collectives -----------------------------------------------------

    def barrier(self) -> None:
        tag = self._next_tag()
        if self.world_size == 1:
            return
        self._gather_to_root(MsgType.BARRIER, tag, b"")
        self._release(MsgType.BARRIER, tag, b"")

    def broadcast(self, values, root: int = 0) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64).ravel()
        out = np.empty_like(values)
        for lo in range(0, max(values.size, 1), CHUNK):
            out[lo:lo + CHUNK] = self._broadcast_chunk(values[lo:lo + CHUNK], root)
        return out

    def _broadcast_chunk(self, values: np.ndarray, root: int) -> np.ndarray:
        tag = self._next_tag()
        if self.world_size == 1:
            return values.copy()
        payload = self.broadcast_bytes(encode_reals(values) if self.rank == root else b"",
                                       root, _tag=tag)
        result = decode_reals(payload)
        if result.size != values.size:
            raise ProtocolError(f"broadcast length mismatch: rank {self.rank} has {values.size} "
                                f"values, root sent {result.size}")
        return result

    def broadcast_bytes(self, payload: bytes, root: int = 0, _tag: int | None = None) -> bytes:
        tag = self._next_tag() if _tag is None else _tag
        if self.world_size == 1:
            return payload
        if root != 0:
            if self.rank == root:
                self._send(0, MsgType.BCAST, tag, payload)
            elif self.rank == 0:
                payload = self._recv(root, MsgType.BCAST, tag)
        return self._release(MsgType.BCAST, tag, payload)

    def allreduce_mean(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64).ravel()
        lengths = self.gather_bytes(struct.pack(">Q", values.size))
        status = _OK
        if self.rank == 0:
            sizes = [struct.unpack(">Q", b)[0] for b in lengths]
            if len(set(sizes)) != 1:
                status = _FAIL + f"allreduce length mismatch across ranks: {sizes}".encode()
        self._status(self.broadcast_bytes(status))
        out = np.empty_like(values)
        for lo in range(0, max(values.size, 1), CHUNK):
            out[lo:lo + CHUNK] = self._allreduce_chunk(values[lo:lo + CHUNK])
        return out

    def _allreduce_chunk(self, values: np.ndarray) -> np.ndarray:
        tag = self._next_tag()
        if self.world_size == 1:
            return values.copy()
        parts = self._gather_to_root(MsgType.ALLREDUCE, tag, encode_reals(values))
        if self.rank == 0:
            total = values.copy()
            for payload in parts[1:]:
                total = total + decode_reals(payload)
            mean = total / self.world_size
            self._release(MsgType.ALLREDUCE, tag, encode_reals(mean))
            return mean
        return decode_reals(self._release(MsgType.ALLREDUCE, tag, b""))

    def gather_bytes(self, payload: bytes, root: int = 0) -> list[bytes]:
        """Root receives every rank's payload in rank order; others get []."""
        tag = self._next_tag()
        if self.world_size == 1:
            return [bytes(payload)]
        parts = self._gather_to_root(MsgType.GATHER, tag, bytes(payload))
        if root == 0:
            return parts if self.rank == 0 else []
        if self.rank == 0:
            self._send(root, MsgType.GATHER, tag, pack_list(parts))
            return []
        if self.rank == root:
            return unpack_list(self._recv(0, MsgType.GATHER, tag))
        return []

    def ordered_print(self, line: str) -> None:
        """Queue a line for the next :meth:`flush_prints` (printed at once when alone)."""
        self._require_open()
        if self.world_size == 1:
            self._emit(0, [line])
        else:
            self._print_buffer.append(line)

    def flush_prints(self) -> None:
        """Collective: rank 0 prints every rank's queued lines, grouped by rank."""
        tag = self._next_tag()
        if self.world_size == 1:
            return
        lines, self._print_buffer = self._print_buffer, []
        parts = self._gather_to_root(MsgType.LOG, tag, json.dumps(lines).encode())
        if self.rank == 0:
            for r, payload in enumerate(parts):
                self._emit(r, json.loads(payload))

    def _emit(self, rank: int, lines: list[str]) -> None:
        stream = self.stream or sys.stdout
        for line in lines:
            stream.write(f"[rank {rank}] {line}\n")
        stream.flush()

    # ---- point to point (task dispatch) ---------------------------------

    def send(self, rank: int, kind: MsgType, payload: bytes = b"", tag: int = 0) -> None:
        self._require_open()
        self._send(rank, kind, tag, payload)

    def recv(self, rank: int, timeout: float | None = None) -> Envelope:
        """Next envelope from ``rank``; blocks indefinitely by default."""
        self._require_open()
        try:
            return self._channels[rank].recv(timeout)
        except CommError as exc:
            self._abort()
            raise CommError(f"lost rank {rank}: {exc}") from exc

    # ---- teardown --------------------------------------------------------

    def shutdown(self) -> None:
        if self._closed:
            return
        for ch in self._channels.values():
            try:
                ch.send(Envelope(MsgType.SHUTDOWN, 0))
            except CommError:
                pass
            ch.close()
        self._closed = True


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def init_master(address: str | None, world_size: int, timeout: float | None = None,
                stream=None) -> Environment:
    """Listen on ``address`` until ``world_size - 1`` workers have said HELLO.

    Ranks go to workers in the order their connections were accepted; peers
    whose HELLO is malformed are told why and dropped.
    """
    timeout = default_timeout() if timeout is None else timeout
    if world_size < 1:
        raise InitError("world size must be >= 1")
    if world_size == 1:
        return Environment(0, 1, {}, timeout, stream)
    if not address:
        raise InitError("master needs a listen address")
    listener = transport.listen(address)
    accepted: list[transport.Channel] = []
    try:
        deadline = time.monotonic() + timeout
        while len(accepted) < world_size - 1:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise InitError(f"only {len(accepted) + 1} of {world_size} ranks joined "
                                f"within {timeout:g} s")
            ch = listener.accept(remaining)
            try:
                hello = ch.recv(remaining)
                if hello.msg_type is not MsgType.HELLO:
                    raise ProtocolError(f"expected HELLO, got {hello.msg_type.name}")
                check_hello(hello.payload)
            except ProtocolError as exc:
                log.warning("rejecting peer %s: %s", ch.peer_label, exc)
                try:
                    ch.send(Envelope(MsgType.SHUTDOWN, 0, f"protocol: {exc}".encode()))
                except CommError:
                    pass
                ch.close()
                continue
            except CommError as exc:
                log.warning("peer %s vanished during handshake: %s", ch.peer_label, exc)
                ch.close()
                continue
            accepted.append(ch)
        channels = {}
        for rank, ch in enumerate(accepted, start=1):
            ch.send(Envelope(MsgType.RANK_ASSIGN, 0, RANK_ASSIGN.pack(rank, world_size)))
            channels[rank] = ch
    except BaseException:
        for ch in accepted:
            ch.close()
        raise
    finally:
        listener.close()
    log.info("master up with %d ranks", world_size)
    return Environment(0, world_size, channels, timeout, stream)


def init_worker(address: str | None, timeout: float | None = None, stream=None,
                hello: bytes | None = None) -> Environment:
    timeout = default_timeout() if timeout is None else timeout
    address = address or os.environ.get("NASF_MASTER")
    if not address:
        raise InitError("no master address given (flag or NASF_MASTER)")
    ch = transport.connect(address, timeout)
    try:
        ch.send(Envelope(MsgType.HELLO, 0, hello if hello is not None else hello_payload()))
        reply = ch.recv(timeout)
    except CommError as exc:
        ch.close()
        raise InitError(f"handshake with {address} failed: {exc}") from exc
    if reply.msg_type is MsgType.SHUTDOWN:
        ch.close()
        raise ProtocolError(reply.payload.decode("utf-8", "replace") or "rejected by master")
    if reply.msg_type is not MsgType.RANK_ASSIGN:
        ch.close()
        raise ProtocolError(f"expected RANK_ASSIGN, got {reply.msg_type.name}")
    rank, world_size = RANK_ASSIGN.unpack(reply.payload)
    return Environment(rank, world_size, {0: ch}, timeout, stream)


def init(config: EnvironmentConfig, stream=None) -> Environment:
    if config.role == "master":
        return init_master(config.master_address, config.expected_world_size,
                           config.timeout, stream)
    if config.role == "worker":
        return init_worker(config.master_address, config.timeout, stream)
    raise InitError(f"unknown role {config.role!r}")


def run_threads(world_size: int, target, *args, timeout: float = DEFAULT_TIMEOUT,
                stream=None, address: str | None = None, **kwargs) -> list:
    """Run ``target(env, *args, **kwargs)`` on every rank of a threaded world.

    Each rank gets its own thread and Environment. The world talks over a
    fresh in-process address unless ``address`` (e.g. a TCP ``host:port``)
    is given. Returns per-rank results in rank order and re-raises the
    lowest rank's exception, if any.
    """
    address = address or f"{transport.INPROC_PREFIX}{uuid.uuid4().hex}"
    inproc = address.startswith(transport.INPROC_PREFIX)
    results: list = [None] * world_size
    errors: list = [None] * world_size

    def body(rank: int):
        try:
            if rank == 0:
                env = init_master(address, world_size, timeout, stream)
            else:
                env = init_worker(address, timeout, stream)
            with env:
                results[env.rank] = target(env, *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - handed back to the caller
            errors[rank] = exc

    # workers join in thread-start order, which fixes their ranks
    threads = []
    for rank in range(world_size):
        t = threading.Thread(target=body, args=(rank,), name=f"nasf-rank-{rank}", daemon=True)
        t.start()
        threads.append(t)
        if not inproc:
            continue  # socket ranks follow accept order; workers retry until the master listens
        if rank == 0 and world_size > 1:
            _wait_for_listener(address, timeout)
        elif rank > 0:
            _wait_for_pending(address, rank, timeout)
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results


def _wait_for_listener(address: str, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    while address not in transport._registry:
        if time.monotonic() > deadline:
            raise InitError("in-process master never started listening")
        time.sleep(0.001)


def _wait_for_pending(address: str, count: int, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    while True:
        listener = transport._registry.get(address)
        if listener is None or listener._count >= count:
            return
        if time.monotonic() > deadline:
            return
        time.sleep(0.001)
