"""Model persistence and int8 export.

Two little-endian binary formats, both ending in a CRC32 footer over all
preceding bytes:

SFLC checkpoint: magic "SFLC", version u8, model name (u8 length + utf-8),
split_index u8, config JSON (u32 length + utf-8), metrics-summary JSON
(u32 length + utf-8), tensor count u8, then per tensor rank u8, u32 dims,
float32 values. Load reproduces weights bit-exactly.

SFLQ quantized model: magic "SFLQ", version u8, model name, split_index
u8, tensor count u8, then per tensor scale f32, zero_point i8, rank u8,
u32 dims, int8 codes.

Quantization is per-tensor affine, q = clamp(round(w / scale) + zero_point).
The real range is widened to include zero before computing the scale, so
the zero point always fits in int8; the scale is nudged up one ulp when
float rounding would otherwise leave the top of the range out of reach.
Every dequantized value then lands within scale/2 of its source.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ModelSpec, SplitModel, build
from .nn import F32, collect_params, set_params

CHECKPOINT_MAGIC = b"SFLC"
QUANTIZED_MAGIC = b"SFLQ"
FORMAT_VERSION = 1


class FormatError(Exception):
    """Unreadable model file; `kind` names the failure."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {detail}" if detail else kind)


def merge(halves: SplitModel) -> list:
    """Client layers followed by server layers, as one forward chain."""
    return list(halves.client) + list(halves.server)


# ---------------------------------------------------------------------------
# int8 quantization


@dataclass(frozen=True)
class QuantizedTensor:
    scale: float
    zero_point: int
    codes: np.ndarray  # int8, original shape

    def dequantize(self, dtype=F32) -> np.ndarray:
        # exact in float64: 8-bit codes times a 24-bit scale
        real = np.float64(self.scale) * (self.codes.astype(np.float64) - self.zero_point)
        return real.astype(dtype)


@dataclass(frozen=True)
class QuantizedModel:
    model_name: str
    split_index: int
    tensors: tuple

    def float_layers(self) -> list:
        spec = build(self.model_name)
        set_params(spec.layers, [t.dequantize() for t in self.tensors])
        return spec.layers


def quantize_tensor(values: np.ndarray) -> QuantizedTensor:
    values = np.asarray(values, dtype=F32)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite weights")
    lo = float(min(values.min(), 0.0)) if values.size else 0.0
    hi = float(max(values.max(), 0.0)) if values.size else 0.0
    if hi == lo:
        return QuantizedTensor(scale=1.0, zero_point=0, codes=np.zeros(values.shape, np.int8))
    scale = F32((hi - lo) / 255.0)
    if float(scale) * 255.0 < hi - lo:
        scale = np.nextafter(scale, np.inf, dtype=F32)
    zero_point = -128 - int(np.round(lo / float(scale)))
    q = np.round(values.astype(np.float64) / float(scale)) + zero_point
    codes = np.clip(q, -128, 127).astype(np.int8)
    return QuantizedTensor(scale=float(scale), zero_point=zero_point, codes=codes)


def quantize_int8(model_name: str, layers: list) -> QuantizedModel:
    template = build(model_name)
    params = collect_params(layers)
    expected = collect_params(template.layers)
    if len(params) != len(expected) or any(
        p.shape != e.shape for p, e in zip(params, expected)
    ):
        raise ValueError(f"layer stack does not match {model_name}")
    return QuantizedModel(
        model_name=model_name,
        split_index=template.split_index,
        tensors=tuple(quantize_tensor(p) for p in params),
    )


def quantized_infer(q: QuantizedModel, features: np.ndarray) -> np.ndarray:
    """Reference semantics: dequantize, then run the float forward pass."""
    from .models import prepare_input
    from .nn import forward_layers

    layers = q.float_layers()
    return forward_layers(layers, prepare_input(q.model_name, features))


# ---------------------------------------------------------------------------
# file i/o helpers


def _write_with_crc(path, body: bytes):
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def _read_with_crc(path, magic: bytes) -> bytes:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError("unreadable", f"{path}: {exc}") from exc
    if len(blob) < len(magic) + 5 or blob[: len(magic)] != magic:
        raise FormatError("bad_magic", f"{path} is not a {magic.decode()} file")
    body, (crc_stored,) = blob[:-4], struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise FormatError("bad_crc", str(path))
    version = blob[len(magic)]
    if version != FORMAT_VERSION:
        raise FormatError("bad_version", f"got {version}, support {FORMAT_VERSION}")
    return body


class _Reader:
    def __init__(self, buf: bytes, offset: int):
        self.buf = buf
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.buf):
            raise FormatError("truncated", f"need {n} bytes at offset {self.offset}")
        out = self.buf[self.offset : self.offset + n]
        self.offset += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def i8(self) -> int:
        return struct.unpack("<b", self.take(1))[0]

    def done(self):
        if self.offset != len(self.buf):
            raise FormatError("trailing_bytes", f"{len(self.buf) - self.offset} unread")


def _pack_name(name: str) -> bytes:
    raw = name.encode()
    if len(raw) > 255:
        raise ValueError("model name too long")
    return struct.pack("<B", len(raw)) + raw


def _pack_dims(shape) -> bytes:
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def _read_dims(r: _Reader) -> tuple:
    rank = r.u8()
    return struct.unpack(f"<{rank}I", r.take(4 * rank))


def _read_name(r: _Reader) -> str:
    return r.take(r.u8()).decode()


_CANON_JSON = dict(sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, spec: ModelSpec, config: dict, metrics_summary: dict):
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<B", FORMAT_VERSION)
    body += _pack_name(spec.name)
    body += struct.pack("<B", spec.split_index)
    for blob in (config, metrics_summary):
        raw = json.dumps(blob, **_CANON_JSON).encode()
        body += struct.pack("<I", len(raw)) + raw
    params = collect_params(spec.layers)
    body += struct.pack("<B", len(params))
    for p in params:
        body += _pack_dims(p.shape)
        body += np.ascontiguousarray(p, dtype="<f4").tobytes()
    _write_with_crc(path, bytes(body))


def load_checkpoint(path):
    """Returns (ModelSpec with restored weights, config dict, summary dict)."""
    body = _read_with_crc(path, CHECKPOINT_MAGIC)
    r = _Reader(body, 5)
    name = _read_name(r)
    split_index = r.u8()
    blobs = []
    for _ in range(2):
        raw = r.take(r.u32())
        try:
            blobs.append(json.loads(raw.decode()))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError("bad_json", str(exc)) from exc
    try:
        spec = build(name)
    except ValueError as exc:
        raise FormatError("unknown_model", str(exc)) from exc
    if split_index != spec.split_index:
        raise FormatError("bad_layout", f"split index {split_index} does not match {name}")
    count = r.u8()
    tensors = []
    for _ in range(count):
        dims = _read_dims(r)
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4")
        tensors.append(data.reshape(dims).copy())
    r.done()
    try:
        set_params(spec.layers, tensors)
    except ValueError as exc:
        raise FormatError("bad_layout", str(exc)) from exc
    return spec, blobs[0], blobs[1]


def save_quantized(path, q: QuantizedModel):
    body = bytearray()
    body += QUANTIZED_MAGIC
    body += struct.pack("<B", FORMAT_VERSION)
    body += _pack_name(q.model_name)
    body += struct.pack("<B", q.split_index)
    body += struct.pack("<B", len(q.tensors))
    for t in q.tensors:
        body += struct.pack("<f", t.scale)
        body += struct.pack("<b", t.zero_point)
        body += _pack_dims(t.codes.shape)
        body += t.codes.tobytes()
    _write_with_crc(path, bytes(body))


def load_quantized(path) -> QuantizedModel:
    body = _read_with_crc(path, QUANTIZED_MAGIC)
    r = _Reader(body, 5)
    name = _read_name(r)
    split_index = r.u8()
    count = r.u8()
    tensors = []
    for _ in range(count):
        scale = r.f32()
        zero_point = r.i8()
        dims = _read_dims(r)
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        codes = np.frombuffer(r.take(n), dtype=np.int8).reshape(dims).copy()
        tensors.append(QuantizedTensor(scale=scale, zero_point=zero_point, codes=codes))
    r.done()
    try:
        template = build(name)
    except ValueError as exc:
        raise FormatError("unknown_model", str(exc)) from exc
    expected = collect_params(template.layers)
    if split_index != template.split_index or len(tensors) != len(expected):
        raise FormatError("bad_layout", f"tensor layout does not match {name}")
    for t, e in zip(tensors, expected):
        if t.codes.shape != e.shape:
            raise FormatError("bad_layout", f"tensor shape {t.codes.shape} vs {e.shape}")
    return QuantizedModel(model_name=name, split_index=split_index, tensors=tuple(tensors))
