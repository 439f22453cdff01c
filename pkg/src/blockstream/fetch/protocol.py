"""Wire format for block transfer.

All integers are big-endian. Every frame starts with::

    u32 length      bytes following this field
    u8  type        1 URGENT_REQ, 2 SPEC_REQ, 3 RESP, 4 ERROR
    u32 request_id

Request body (types 1, 2)::

    u32 file_id, u32 range_count, then range_count x (u32 first_block, u32 count)

Response body (type 3)::

    u32 request_id (echo), u32 block_count,
    then block_count x (u32 file_id, u32 block_index, u32 crc32, payload)

Each payload is exactly ``block_size`` bytes; the tail block of a file is
zero-padded. The CRC covers the padded payload.

Error body (type 4)::

    u32 request_id (echo), u32 code (1 NOT_FOUND, 2 BAD_REQUEST), utf-8 message
"""

from __future__ import annotations

import socket
import struct
import zlib
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

from ..config import BLOCK_SIZE
from ..trace import BlockId

URGENT_REQ = 1
SPEC_REQ = 2
RESP = 3
ERROR = 4
REQUEST_TYPES = (URGENT_REQ, SPEC_REQ)

NOT_FOUND = 1
BAD_REQUEST = 2

MAX_FRAME = 64 << 20

_LEN = struct.Struct(">I")
_HEAD = struct.Struct(">BI")
_U32X2 = struct.Struct(">II")
_BLOCK_HEAD = struct.Struct(">III")


class ProtocolError(Exception):
    pass


class Frame(NamedTuple):
    type: int
    request_id: int
    body: bytes


class Request(NamedTuple):
    file_id: int
    ranges: Tuple[Tuple[int, int], ...]

    def blocks(self) -> List[BlockId]:
        return [BlockId(self.file_id, i) for first, n in self.ranges for i in range(first, first + n)]


class ErrorReply(NamedTuple):
    request_id: int
    code: int
    message: str


def frame(ftype: int, request_id: int, body: bytes) -> bytes:
    return _LEN.pack(_HEAD.size + len(body)) + _HEAD.pack(ftype, request_id) + body


def encode_request(request_id: int, file_id: int, ranges: Sequence[Tuple[int, int]], urgent: bool) -> bytes:
    body = bytearray(_U32X2.pack(file_id, len(ranges)))
    for first, count in ranges:
        body += _U32X2.pack(first, count)
    return frame(URGENT_REQ if urgent else SPEC_REQ, request_id, bytes(body))


def decode_request(body: bytes) -> Request:
    if len(body) < _U32X2.size:
        raise ProtocolError("request body too short")
    file_id, n = _U32X2.unpack_from(body)
    if len(body) != _U32X2.size * (n + 1):
        raise ProtocolError(f"request declares {n} ranges but body is {len(body)} bytes")
    ranges = tuple(_U32X2.unpack_from(body, _U32X2.size * (k + 1)) for k in range(n))
    return Request(file_id, ranges)


def pad(payload: bytes, block_size: int = BLOCK_SIZE) -> bytes:
    if len(payload) > block_size:
        raise ProtocolError("payload larger than a block")
    return payload + bytes(block_size - len(payload))


def encode_block(block: BlockId, payload: bytes) -> bytes:
    return _BLOCK_HEAD.pack(block.file_id, block.index, zlib.crc32(payload)) + payload


def encode_response(request_id: int, blocks: Sequence[Tuple[BlockId, bytes]]) -> bytes:
    parts = [_U32X2.pack(request_id, len(blocks))]
    parts.extend(encode_block(b, p) for b, p in blocks)
    return frame(RESP, request_id, b"".join(parts))


def response_from_parts(request_id: int, encoded_blocks: Sequence[bytes]) -> bytes:
    return frame(RESP, request_id, _U32X2.pack(request_id, len(encoded_blocks)) + b"".join(encoded_blocks))


def decode_response(body: bytes, block_size: int = BLOCK_SIZE) -> Tuple[int, List[Tuple[BlockId, bytes]]]:
    """Returns (echoed request id, [(block, payload)]); raises on bad CRC or size."""
    if len(body) < _U32X2.size:
        raise ProtocolError("response body too short")
    rid, n = _U32X2.unpack_from(body)
    step = _BLOCK_HEAD.size + block_size
    if len(body) != _U32X2.size + n * step:
        raise ProtocolError(f"response declares {n} blocks but body is {len(body)} bytes")
    out = []
    off = _U32X2.size
    for _ in range(n):
        fid, idx, crc = _BLOCK_HEAD.unpack_from(body, off)
        payload = body[off + _BLOCK_HEAD.size: off + step]
        if zlib.crc32(payload) != crc:
            raise ProtocolError(f"checksum mismatch for block ({fid}, {idx})")
        out.append((BlockId(fid, idx), payload))
        off += step
    return rid, out


def encode_error(request_id: int, code: int, message: str) -> bytes:
    return frame(ERROR, request_id, _U32X2.pack(request_id, code) + message.encode("utf-8"))


def decode_error(body: bytes) -> ErrorReply:
    if len(body) < _U32X2.size:
        raise ProtocolError("error body too short")
    rid, code = _U32X2.unpack_from(body)
    return ErrorReply(rid, code, body[_U32X2.size:].decode("utf-8", "replace"))


def coalesce(blocks: Iterable[BlockId]) -> List[Tuple[int, List[Tuple[int, int]]]]:
    """Group blocks, in order, into per-file runs of contiguous index ranges.

    A new group starts whenever the file changes, so FIFO order is kept.
    """
    groups: List[Tuple[int, List[Tuple[int, int]]]] = []
    for b in blocks:
        if not groups or groups[-1][0] != b.file_id:
            groups.append((b.file_id, [(b.index, 1)]))
            continue
        ranges = groups[-1][1]
        first, n = ranges[-1]
        if b.index == first + n:
            ranges[-1] = (first, n + 1)
        else:
            ranges.append((b.index, 1))
    return groups


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Optional[Frame]:
    """Read one frame; ``None`` on clean EOF at a frame boundary."""
    raw = _recv_exact(sock, _LEN.size)
    if raw is None:
        return None
    (length,) = _LEN.unpack(raw)
    if length < _HEAD.size or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    rest = _recv_exact(sock, length)
    if rest is None:
        raise ProtocolError("connection closed mid-frame")
    ftype, rid = _HEAD.unpack_from(rest)
    if ftype not in (URGENT_REQ, SPEC_REQ, RESP, ERROR):
        raise ProtocolError(f"unknown frame type {ftype}")
    return Frame(ftype, rid, rest[_HEAD.size:])
