"""Binary frame protocol for the client/server link.

Frame layout, all integers little-endian:

    magic "SFL1" | type u8 | round u32 | client_id u16 | payload_len u32
    | payload | crc32 u32

The CRC (zlib polynomial) covers every byte before it, header included.
Header is 15 bytes, total framing overhead 19 bytes.

Payload bodies by type:
    HELLO, ROUND_DONE, BYE   empty
    TRAIN_CONFIG             canonical JSON object, utf-8
    MODEL_PUSH, MODEL_UPLOAD concatenated tensor blobs
    ACTIVATION               u8 label, then one tensor blob
    GRADIENT                 one tensor blob

A tensor blob is rank u8, then rank u32 dims, then the float32 values in
C order. Decoding is total: any input yields a WireMessage or a
ProtocolError, never a crash.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = b"SFL1"
_HEADER = struct.Struct("<4sBIHI")
HEADER_LEN = _HEADER.size  # 15
FRAME_OVERHEAD = HEADER_LEN + 4  # + trailing crc32
MAX_PAYLOAD = 2**31


class MessageType(IntEnum):
    HELLO = 1
    TRAIN_CONFIG = 2
    MODEL_PUSH = 3
    ACTIVATION = 4
    GRADIENT = 5
    MODEL_UPLOAD = 6
    ROUND_DONE = 7
    BYE = 8


class ProtocolError(Exception):
    """Malformed frame or blob; `kind` names the failure."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {detail}" if detail else kind)


@dataclass(frozen=True)
class WireMessage:
    type_tag: MessageType
    round_index: int
    client_id: int
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.round_index < 2**32:
            raise ValueError("round_index must fit in u32")
        if not 0 <= self.client_id < 2**16:
            raise ValueError("client_id must fit in u16")


def encode_frame(msg: WireMessage) -> bytes:
    if len(msg.payload) >= MAX_PAYLOAD:
        raise ProtocolError("too_large", f"payload of {len(msg.payload)} bytes")
    head = _HEADER.pack(MAGIC, int(msg.type_tag), msg.round_index, msg.client_id, len(msg.payload))
    body = head + msg.payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_frame(blob: bytes) -> WireMessage:
    blob = bytes(blob)
    if len(blob) < FRAME_OVERHEAD:
        raise ProtocolError("truncated", f"{len(blob)} bytes, need at least {FRAME_OVERHEAD}")
    magic, tag, round_index, client_id, payload_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ProtocolError("bad_magic", repr(magic))
    if payload_len >= MAX_PAYLOAD:
        raise ProtocolError("too_large", f"declared payload of {payload_len} bytes")
    if len(blob) != FRAME_OVERHEAD + payload_len:
        raise ProtocolError(
            "length_mismatch", f"declared {payload_len}, frame holds {len(blob) - FRAME_OVERHEAD}"
        )
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc_stored:
        raise ProtocolError("bad_crc")
    try:
        tag = MessageType(tag)
    except ValueError:
        raise ProtocolError("unknown_type", str(tag)) from None
    return WireMessage(tag, round_index, client_id, blob[HEADER_LEN : len(blob) - 4])


# ---------------------------------------------------------------------------
# tensor blobs


def encode_tensor(arr: np.ndarray) -> bytes:
    # asarray, not ascontiguousarray: the latter silently promotes 0-d to 1-d
    arr = np.asarray(arr, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise ProtocolError("bad_tensor", "rank exceeds u8")
    if any(d >= 2**32 for d in arr.shape):
        raise ProtocolError("bad_tensor", "dimension exceeds u32")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0):
    """Decode one blob at `offset`; returns (array, next_offset)."""
    if offset >= len(buf):
        raise ProtocolError("bad_tensor", "empty blob")
    rank = buf[offset]
    offset += 1
    if len(buf) - offset < 4 * rank:
        raise ProtocolError("bad_tensor", "dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= d
    if len(buf) - offset < 4 * count:
        raise ProtocolError("bad_tensor", f"need {4 * count} data bytes, have {len(buf) - offset}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return data.reshape(dims).copy(), offset + 4 * count


def encode_tensors(arrays) -> bytes:
    return b"".join(encode_tensor(a) for a in arrays)


def decode_tensors(buf: bytes) -> list:
    out, offset = [], 0
    while offset < len(buf):
        arr, offset = decode_tensor(buf, offset)
        out.append(arr)
    return out


# ---------------------------------------------------------------------------
# message constructors and accessors


def hello(client_id: int, sample_count: int = 0) -> WireMessage:
    """Client's opening message; the payload carries its shard size so the
    server can fix the common per-epoch step count."""
    return WireMessage(MessageType.HELLO, 0, client_id, struct.pack("<I", sample_count))


def parse_hello(msg: WireMessage) -> int:
    if len(msg.payload) != 4:
        raise ProtocolError("length_mismatch", "hello payload must be 4 bytes")
    return struct.unpack("<I", msg.payload)[0]


def train_config_message(config_dict: dict) -> WireMessage:
    body = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return WireMessage(MessageType.TRAIN_CONFIG, 0, 0, body)


def model_push(round_index: int, tensors) -> WireMessage:
    return WireMessage(MessageType.MODEL_PUSH, round_index, 0, encode_tensors(tensors))


def activation(round_index: int, client_id: int, label: int, arr: np.ndarray) -> WireMessage:
    if not 0 <= label < 256:
        raise ValueError("label must fit in u8")
    body = struct.pack("<B", label) + encode_tensor(arr)
    return WireMessage(MessageType.ACTIVATION, round_index, client_id, body)


def gradient(round_index: int, client_id: int, arr: np.ndarray) -> WireMessage:
    return WireMessage(MessageType.GRADIENT, round_index, client_id, encode_tensor(arr))


def model_upload(round_index: int, client_id: int, tensors) -> WireMessage:
    return WireMessage(MessageType.MODEL_UPLOAD, round_index, client_id, encode_tensors(tensors))


def round_done(round_index: int, client_id: int = 0) -> WireMessage:
    return WireMessage(MessageType.ROUND_DONE, round_index, client_id)


def bye(client_id: int = 0) -> WireMessage:
    return WireMessage(MessageType.BYE, 0, client_id)


def parse_config(msg: WireMessage) -> dict:
    try:
        out = json.loads(msg.payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("bad_config", str(exc)) from exc
    if not isinstance(out, dict):
        raise ProtocolError("bad_config", "expected a JSON object")
    return out


def parse_activation(msg: WireMessage):
    if not msg.payload:
        raise ProtocolError("bad_tensor", "missing label byte")
    arr, offset = decode_tensor(msg.payload, 1)
    if offset != len(msg.payload):
        raise ProtocolError("length_mismatch", "trailing bytes after activation tensor")
    return msg.payload[0], arr


def parse_gradient(msg: WireMessage) -> np.ndarray:
    arr, offset = decode_tensor(msg.payload)
    if offset != len(msg.payload):
        raise ProtocolError("length_mismatch", "trailing bytes after gradient tensor")
    return arr


# ---------------------------------------------------------------------------
# transports


class InProcessChannel:
    """One endpoint of a paired in-memory link.

    Frames still pass through encode/decode so byte counts and integrity
    behavior match the socket transport.
    """

    def __init__(self, outbox: deque, inbox: deque):
        self._outbox = outbox
        self._inbox = inbox

    @staticmethod
    def pair():
        a_to_b, b_to_a = deque(), deque()
        return InProcessChannel(a_to_b, b_to_a), InProcessChannel(b_to_a, a_to_b)

    def send(self, msg: WireMessage) -> int:
        frame = encode_frame(msg)
        self._outbox.append(frame)
        return len(frame)

    def receive(self) -> WireMessage:
        if not self._inbox:
            raise ProtocolError("truncated", "no frame queued")
        return decode_frame(self._inbox.popleft())


def _read_exact(conn, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = conn.recv(n - got)
        if not chunk:
            raise ProtocolError("truncated", f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(conn):
    """Read one frame from a socket; returns None on clean EOF."""
    first = conn.recv(1)
    if not first:
        return None
    head = first + _read_exact(conn, HEADER_LEN - 1)
    magic, _tag, _round, _client, payload_len = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError("bad_magic", repr(magic))
    if payload_len >= MAX_PAYLOAD:
        raise ProtocolError("too_large", f"declared payload of {payload_len} bytes")
    rest = _read_exact(conn, payload_len + 4)
    return decode_frame(head + rest)


def send_frame(conn, msg: WireMessage) -> int:
    frame = encode_frame(msg)
    conn.sendall(frame)
    return len(frame)
