"""Wire format: 4-byte big-endian length prefix + UTF-8 JSON ``{v, seq, type, payload}``."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Iterator

from ..errors import FrameError, ProtocolError

PROTOCOL_VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
_LEN = struct.Struct(">I")

HELLO = "HELLO"
READ_REQUEST = "READ_REQUEST"
READ_RESPONSE = "READ_RESPONSE"
BURN_FUSE = "BURN_FUSE"
BURN_ACK = "BURN_ACK"
PROVISION = "PROVISION"
KEY_ACK = "KEY_ACK"
DATA = "DATA"
ERROR = "ERROR"

# Required payload fields and their JSON types per message type.
SCHEMA: dict[str, dict[str, type | tuple[type, ...]]] = {
    HELLO: {"device_id": str, "n": int, "m": int},
    READ_REQUEST: {"paths": list},
    READ_RESPONSE: {"readings": list},
    BURN_FUSE: {},
    BURN_ACK: {},
    PROVISION: {"key_id": str, "challenges": dict},
    KEY_ACK: {"key_id": str},
    DATA: {"key_id": str, "ciphertext": str},
    ERROR: {"code": str, "detail": str},
}


@dataclass
class Message:
    type: str
    payload: dict[str, Any] = field(default_factory=dict)
    seq: int = 0
    v: int = PROTOCOL_VERSION

    def __post_init__(self):
        validate(self.type, self.payload)

    def to_body(self) -> dict:
        return {"v": self.v, "seq": self.seq, "type": self.type, "payload": self.payload}


def validate(kind: str, payload: Any) -> None:
    if kind not in SCHEMA:
        raise ProtocolError("bad_message", f"unknown message type {kind!r}")
    if not isinstance(payload, dict):
        raise ProtocolError("bad_message", "payload must be an object")
    for name, typ in SCHEMA[kind].items():
        if name not in payload:
            raise ProtocolError("bad_message", f"{kind} lacks {name!r}")
        value = payload[name]
        if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise ProtocolError("bad_message", f"{kind}.{name} has wrong type")


def error(code: str, detail: str = "") -> Message:
    return Message(ERROR, {"code": code, "detail": detail})


def encode_message(msg: Message, max_frame: int = MAX_FRAME) -> bytes:
    body = json.dumps(msg.to_body(), separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(body) > max_frame:
        raise FrameError(f"frame of {len(body)} bytes exceeds {max_frame}")
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> Message:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("bad_message", f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"v", "seq", "type", "payload"}:
        raise ProtocolError("bad_message", "body must have exactly v, seq, type, payload")
    if obj["v"] != PROTOCOL_VERSION:
        raise ProtocolError("version_mismatch", f"got v={obj['v']!r}")
    if not isinstance(obj["seq"], int) or isinstance(obj["seq"], bool) or obj["seq"] < 0:
        raise ProtocolError("bad_message", "seq must be a non-negative integer")
    if not isinstance(obj["type"], str):
        raise ProtocolError("bad_message", "type must be a string")
    return Message(obj["type"], obj["payload"], obj["seq"], obj["v"])


def decode_message(frame: bytes, max_frame: int = MAX_FRAME) -> Message:
    """Decode exactly one complete frame."""
    if len(frame) < _LEN.size:
        raise FrameError("truncated length prefix")
    (length,) = _LEN.unpack_from(frame)
    if length > max_frame:
        raise FrameError(f"declared length {length} exceeds {max_frame}")
    if len(frame) != _LEN.size + length:
        raise FrameError(f"frame holds {len(frame) - _LEN.size} bytes, header says {length}")
    return decode_body(frame[_LEN.size:])


class FrameDecoder:
    """Incremental splitter for a byte stream.

    ``feed`` returns the complete frames received so far; a partial frame stays
    buffered until the rest arrives.  An oversize header poisons the stream
    (raises), since no later boundary can be trusted.
    """

    def __init__(self, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf.extend(data)
        frames = []
        while len(self._buf) >= _LEN.size:
            (length,) = _LEN.unpack_from(self._buf)
            if length > self.max_frame:
                raise FrameError(f"declared length {length} exceeds {self.max_frame}")
            end = _LEN.size + length
            if len(self._buf) < end:
                break
            frames.append(bytes(self._buf[:end]))
            del self._buf[:end]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)

    def messages(self, data: bytes) -> Iterator[Message]:
        for frame in self.feed(data):
            yield decode_message(frame, self.max_frame)


def read_frame(stream, max_frame: int = MAX_FRAME) -> bytes:
    """Read one frame from a file-like binary stream; EOF mid-frame is a frame error."""
    head = _read_exact(stream, _LEN.size, allow_eof=True)
    if not head:
        raise EOFError("stream closed")
    (length,) = _LEN.unpack(head)
    if length > max_frame:
        raise FrameError(f"declared length {length} exceeds {max_frame}")
    return head + _read_exact(stream, length)


def _read_exact(stream, size: int, allow_eof: bool = False) -> bytes:
    chunks, got = [], 0
    while got < size:
        chunk = stream.read(size - got)
        if not chunk:
            if allow_eof and got == 0:
                return b""
            raise FrameError(f"stream ended after {got} of {size} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
