"""Binary framing for :class:`PeerMessage`.

Layout (16-byte header, then the payload)::

    offset  size  field
    0       4     magic b"FDML"
    4       1     version (1)
    5       2     sender, big-endian unsigned
    7       4     round, big-endian unsigned
    11      1     flags; bit 0 = terminate, bit 1 = float32 payload (reserved)
    12      4     dim, big-endian unsigned
    16      8*dim payload, IEEE-754 binary64 little-endian
"""
from __future__ import annotations

import struct

import numpy as np

from ..protocol import PeerMessage

MAGIC = b"FDML"
VERSION = 1
HEADER = struct.Struct(">4sBHIBI")
HEADER_SIZE = HEADER.size
FLAG_TERMINATE = 0x01
# reserved for a float32 payload variant; version 1 rejects it
FLAG_FLOAT32 = 0x02
KNOWN_FLAGS = FLAG_TERMINATE
MAX_DIM = 1 << 26

_PAYLOAD = np.dtype("<f8")

assert HEADER_SIZE == 16


class FramingError(ValueError):
    pass


def frame_size(dim: int) -> int:
    return HEADER_SIZE + 8 * dim


def encode_frame(msg: PeerMessage, dim: int | None = None) -> bytes:
    w = np.ascontiguousarray(msg.weights, dtype=np.float64).ravel()
    if dim is not None and w.size != dim:
        raise FramingError(f"message has {w.size} weights, expected {dim}")
    if w.size == 0 or w.size > MAX_DIM:
        raise FramingError(f"unsupported dimension {w.size}")
    if not 0 <= msg.sender <= 0xFFFF:
        raise FramingError(f"sender {msg.sender} does not fit in 16 bits")
    if not 0 <= msg.round <= 0xFFFFFFFF:
        raise FramingError(f"round {msg.round} does not fit in 32 bits")
    flags = FLAG_TERMINATE if msg.terminate else 0
    header = HEADER.pack(MAGIC, VERSION, msg.sender, msg.round, flags, w.size)
    return header + w.astype(_PAYLOAD, copy=False).tobytes()


def decode_header(buf: bytes) -> tuple:
    """Validate a 16-byte header; returns (sender, round, flags, dim)."""
    if len(buf) < HEADER_SIZE:
        raise FramingError(f"truncated header ({len(buf)} bytes)")
    magic, version, sender, rnd, flags, dim = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FramingError(f"unsupported version {version}")
    if flags & ~KNOWN_FLAGS:
        raise FramingError(f"unsupported flags 0x{flags:02x}")
    if dim == 0 or dim > MAX_DIM:
        raise FramingError(f"unsupported dimension {dim}")
    return sender, rnd, flags, dim


def decode_payload(header: tuple, payload: bytes) -> PeerMessage:
    sender, rnd, flags, dim = header
    if len(payload) != 8 * dim:
        raise FramingError(f"payload is {len(payload)} bytes, expected {8 * dim}")
    w = np.frombuffer(payload, dtype=_PAYLOAD).astype(np.float64)
    if not np.all(np.isfinite(w)):
        raise FramingError("non-finite weights in payload")
    return PeerMessage(sender, rnd, w, bool(flags & FLAG_TERMINATE))


def decode_frame(buf: bytes, dim: int | None = None) -> PeerMessage:
    """Decode exactly one frame; trailing or missing bytes are errors."""
    header = decode_header(buf)
    if dim is not None and header[3] != dim:
        raise FramingError(f"frame dimension {header[3]} != expected {dim}")
    return decode_payload(header, bytes(buf[HEADER_SIZE:]))


def read_frame(read_exact, dim: int | None = None) -> PeerMessage:
    """Read one frame using ``read_exact(n) -> bytes`` (raises EOFError at end)."""
    header = decode_header(read_exact(HEADER_SIZE))
    if dim is not None and header[3] != dim:
        raise FramingError(f"frame dimension {header[3]} != expected {dim}")
    return decode_payload(header, read_exact(8 * header[3]))
