"""Framed binary message protocol.

Every message travels as one frame::

    magic(4) | msg_type(1) | seq(8) | payload_len(4) | payload

All integers are big-endian.  See PROTOCOL.md for the payload layouts.
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field

MAGIC = 0x42424D31  # "BBM1"
HEADER = struct.Struct(">IBQI")
HEADER_SIZE = HEADER.size  # 17
MAX_PAYLOAD = 16 * 1024 * 1024
_U32_LIMIT = 1 << 32


class WireError(Exception):
    pass


class EncodingError(WireError):
    pass


class ProtocolError(WireError):
    """Stream is corrupt; the connection must be dropped."""


class IncompleteFrameError(WireError):
    """Not enough bytes yet; retry once more data arrives."""


class MsgType(enum.IntEnum):
    PUT = 1
    PUT_ACK = 2
    REPL_PUT = 3
    REPL_ACK = 4
    GET = 5
    GET_RESP = 6
    REDIRECT = 7
    MEM_QUERY = 8
    MEM_RESP = 9
    PING = 10
    PING_ACK = 11
    NEIGHBOR_QUERY = 12
    NEIGHBOR_RESP = 13
    FAIL_REPORT = 14
    FAIL_CONFIRM_REQ = 15
    FAIL_CONFIRM_RESP = 16
    JOIN_REQ = 17
    RING_UPDATE = 18
    REGISTER = 19
    FLUSH_CMD = 20
    SHUFFLE_META = 21
    SHUFFLE_DATA = 22
    FLUSH_DONE = 23
    LOOKUP_REQ = 24
    LOOKUP_RESP = 25
    ERROR = 26


_CODES = {m.value: m for m in MsgType}


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    seq: int
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def json(self):
        return json.loads(self.payload) if self.payload else {}


def encode_frame(msg_type: MsgType, seq: int, payload: bytes = b"", max_payload: int | None = None) -> bytes:
    n = len(payload)
    if n >= _U32_LIMIT:
        raise EncodingError(f"payload of {n} bytes does not fit a 32-bit length")
    if max_payload is not None and n > max_payload:
        raise EncodingError(f"payload of {n} bytes exceeds max payload {max_payload}")
    if not 0 <= seq < (1 << 64):
        raise EncodingError(f"seq {seq} out of u64 range")
    return HEADER.pack(MAGIC, int(MsgType(msg_type)), seq, n) + bytes(payload)


def parse_header(header: bytes, max_payload: int | None = None) -> tuple[MsgType, int, int]:
    magic, code, seq, n = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    if code not in _CODES:
        raise ProtocolError(f"unknown msg_type {code}")
    if max_payload is not None and n > max_payload:
        raise ProtocolError(f"payload_len {n} exceeds max payload {max_payload}")
    return _CODES[code], seq, n


def decode_frame(stream, max_payload: int | None = None) -> Frame:
    """Read exactly one frame from a binary stream (anything with ``read``)."""
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = io.BytesIO(bytes(stream))
    header = _read_exact(stream, HEADER_SIZE)
    msg_type, seq, n = parse_header(header, max_payload)
    payload = _read_exact(stream, n)
    return Frame(msg_type, seq, payload)


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise IncompleteFrameError(f"needed {n} bytes, stream ended after {got}")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


@dataclass
class FrameDecoder:
    """Incremental decoder: ``feed`` bytes, collect whole frames."""

    max_payload: int | None = None
    _buf: bytearray = field(default_factory=bytearray)

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while len(self._buf) >= HEADER_SIZE:
            msg_type, seq, n = parse_header(bytes(self._buf[:HEADER_SIZE]), self.max_payload)
            end = HEADER_SIZE + n
            if len(self._buf) < end:
                break
            frames.append(Frame(msg_type, seq, bytes(self._buf[HEADER_SIZE:end])))
            del self._buf[:end]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- payload codecs -----------------------------------------------------------

def pack_json(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode()


RECORD_HEADER = struct.Struct(">HIIQQI")  # file_id_len, payload_len, epoch, offset, seq, client


def pack_record(file_id: str, offset: int, epoch: int, seq: int, client: int, payload: bytes) -> bytes:
    fid = file_id.encode()
    return RECORD_HEADER.pack(len(fid), len(payload), epoch, offset, seq, client) + fid + payload


def unpack_record(buf: bytes | memoryview, pos: int = 0):
    """Return ``(file_id, offset, epoch, seq, client, payload, end_pos)``."""
    fid_len, plen, epoch, offset, seq, client = RECORD_HEADER.unpack_from(buf, pos)
    pos += RECORD_HEADER.size
    file_id = bytes(buf[pos:pos + fid_len]).decode()
    pos += fid_len
    payload = bytes(buf[pos:pos + plen])
    if len(payload) != plen:
        raise ProtocolError("truncated record")
    return file_id, offset, epoch, seq, client, payload, pos + plen


PUT_FLAGS = struct.Struct(">B")
FLAG_FORCE = 0x01  # never redirect this put
REPL_PREFIX = struct.Struct(">IBB")  # primary, remaining hops, chain length
U32 = struct.Struct(">I")
PUT_ACK_BODY = struct.Struct(">Q")
REPL_ACK_BODY = struct.Struct(">QII")  # seq, client, acker
