"""Wire framing for the collective-communication protocol.

Frame layout (all integers big-endian)::

    u32 payload length | u8 message type | u32 tag | payload bytes

Vectors of reals travel as a little-endian u32 count followed by that many
little-endian IEEE-754 doubles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = 0x4E415346  # "NASF"
PROTOCOL_VERSION = 0x01
MAX_PAYLOAD = 64 * 1024 * 1024
HEADER = struct.Struct(">IBI")
HELLO = struct.Struct(">IB")
RANK_ASSIGN = struct.Struct(">II")
MAX_TAG = 0xFFFFFFFF


class CommError(RuntimeError):
    """A peer disconnected, timed out, or the transport failed."""


class ProtocolError(CommError):
    """A peer sent something the protocol does not allow."""


class InitError(CommError):
    """The environment could not be established."""


class ClosedEnvironmentError(CommError):
    """Collective called on an environment that was shut down."""


class MsgType(IntEnum):
    HELLO = 1
    RANK_ASSIGN = 2
    BARRIER = 3
    BCAST = 4
    ALLREDUCE = 5
    GATHER = 6
    TASK = 7
    RESULT = 8
    LOG = 9
    SHUTDOWN = 10


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    tag: int
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        if not 0 <= self.tag <= MAX_TAG:
            raise ProtocolError(f"tag {self.tag} does not fit in 4 bytes")
        if len(self.payload) > MAX_PAYLOAD:
            raise ProtocolError(f"payload of {len(self.payload)} bytes exceeds the 64 MiB cap")

    def encode(self) -> bytes:
        return HEADER.pack(len(self.payload), self.msg_type, self.tag) + bytes(self.payload)


def decode_header(header: bytes) -> tuple[int, MsgType, int]:
    length, kind, tag = HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame announces {length} payload bytes, above the 64 MiB cap")
    try:
        kind = MsgType(kind)
    except ValueError:
        raise ProtocolError(f"unknown message type {kind}") from None
    return length, kind, tag


def decode(frame: bytes) -> Envelope:
    """Inverse of :meth:`Envelope.encode` for one complete frame."""
    if len(frame) < HEADER.size:
        raise ProtocolError(f"frame of {len(frame)} bytes is shorter than the header")
    length, kind, tag = decode_header(frame[:HEADER.size])
    payload = frame[HEADER.size:]
    if len(payload) != length:
        raise ProtocolError(f"frame carries {len(payload)} payload bytes, header says {length}")
    return Envelope(kind, tag, bytes(payload))


def hello_payload(version: int = PROTOCOL_VERSION, magic: int = MAGIC) -> bytes:
    return HELLO.pack(magic, version)


def check_hello(payload: bytes) -> None:
    if len(payload) != HELLO.size:
        raise ProtocolError(f"HELLO payload must be {HELLO.size} bytes, got {len(payload)}")
    magic, version = HELLO.unpack(payload)
    if magic != MAGIC:
        raise ProtocolError(f"bad HELLO magic 0x{magic:08X}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")


def encode_reals(values) -> bytes:
    arr = np.ascontiguousarray(values, dtype="<f8").ravel()
    return struct.pack("<I", arr.size) + arr.tobytes()


def decode_reals(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise ProtocolError("real vector payload lacks its count prefix")
    (count,) = struct.unpack_from("<I", payload)
    if len(payload) != 4 + 8 * count:
        raise ProtocolError(f"real vector announces {count} values in {len(payload) - 4} bytes")
    return np.frombuffer(payload, dtype="<f8", offset=4).astype(np.float64)


def pack_list(items: list[bytes]) -> bytes:
    parts = [struct.pack(">I", len(items))]
    for item in items:
        parts.append(struct.pack(">I", len(item)))
        parts.append(bytes(item))
    return b"".join(parts)


def unpack_list(payload: bytes) -> list[bytes]:
    (count,) = struct.unpack_from(">I", payload)
    offset = 4
    items = []
    for _ in range(count):
        (size,) = struct.unpack_from(">I", payload, offset)
        offset += 4
        items.append(bytes(payload[offset:offset + size]))
        offset += size
    if offset != len(payload):
        raise ProtocolError("trailing bytes after packed list")
    return items


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
