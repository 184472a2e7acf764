"""Binary containers for float tensors and bit-packed quantized models.

Two little-endian file formats live here.

``BQNT`` model container::

    magic "BQNT" | u32 version=1 | u32 tensor_count
    per tensor:  u16 name_len | name utf-8 | u8 dtype (0=f32) | u8 rank
                 | u32 dims[rank] | u64 payload offset (absolute)
    payloads:    contiguous row-major f32 arrays, in table order
    graph:       utf-8 layer description text, runs to end of file

``BQPK`` packed quantized model::

    magic "BQPK" | u8 scheme (0=asymm, 1=symm, 2=pow2) | u8 bit_width
    | u32 tensor_count
    per tensor:  u16 name_len | name utf-8 | u8 rank | u32 dims[rank]
                 | u32 group_count | params per group
                 | u32 payload_len | codes bit-packed LSB-first

Per-group params are ``f32 min, f32 max`` (asymm), ``f32 max_abs`` (symm)
or ``i32 exponent_min, i32 exponent_max`` (pow2).  Pow2 elements occupy
``1 + e`` bits: the low ``e`` bits hold ``exponent - exponent_min``, the
top bit the sign; the all-ones exponent code is reserved for zero.
Symmetric codes are stored offset by ``2^(n-1) - 1`` so they are unsigned.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .quant_core import QuantizedTensor

MODEL_MAGIC = b"BQNT"
PACKED_MAGIC = b"BQPK"
MODEL_VERSION = 1
_DTYPE_F32 = 0

# Graph attribute keys whose values name tensors in the tensor table.
GRAPH_REF_KEYS = frozenset({"weight", "bias", "scale", "shift", "mean", "var"})


class ModelFormatError(Exception):
    """File is not a recognizable container (bad magic, version or tag)."""


class ModelCorruptionError(Exception):
    """Structurally broken container: truncated or inconsistent layout."""


class ModelValidationError(Exception):
    """Well-formed container holding invalid content."""


class QuantScheme(str, Enum):
    ASYMM = "asymm"
    SYMM = "symm"
    POW2 = "pow2"


_SCHEME_TAGS = {QuantScheme.ASYMM: 0, QuantScheme.SYMM: 1, QuantScheme.POW2: 2}
_TAG_SCHEMES = {tag: scheme for scheme, tag in _SCHEME_TAGS.items()}


@dataclass(frozen=True)
class AsymmParams:
    """Per-group float range; group count is 1 unless quantized per channel."""

    min_val: np.ndarray
    max_val: np.ndarray


@dataclass(frozen=True)
class SymmParams:
    max_abs: np.ndarray


@dataclass(frozen=True)
class Pow2Params:
    exponent_min: np.ndarray
    exponent_max: np.ndarray


QuantParams = AsymmParams | SymmParams | Pow2Params


@dataclass
class Tensor:
    """Named n-dimensional f32 array, stored flat in row-major order."""

    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        if not self.name or any(c.isspace() for c in self.name) or "=" in self.name:
            raise ModelValidationError(f"invalid tensor name {self.name!r}")
        self.shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in self.shape):
            raise ModelValidationError(f"tensor {self.name!r}: non-positive dimension in {self.shape}")
        self.data = np.asarray(self.data, dtype=np.float32).reshape(-1)
        if self.data.size != self.count:
            raise ModelValidationError(
                f"tensor {self.name!r}: {self.data.size} values for shape {self.shape}"
            )

    @classmethod
    def from_array(cls, name: str, array: np.ndarray) -> "Tensor":
        arr = np.asarray(array, dtype=np.float32)
        return cls(name, arr.shape, arr.reshape(-1))

    @property
    def count(self) -> int:
        return int(math.prod(self.shape))

    @property
    def nbytes(self) -> int:
        return 4 * self.count

    def reshaped(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def validate_finite(self) -> None:
        if not np.isfinite(self.data).all():
            raise ModelValidationError(f"tensor {self.name!r} contains NaN or Inf")


def iter_graph_lines(graph: str) -> list[tuple[str, dict[str, str]]]:
    """Tokenize graph text into (kind, attrs) entries.

    One layer per line, ``kind key=value ...``; blank lines and ``#``
    comments are skipped.  Kinds are not interpreted here.
    """
    entries: list[tuple[str, dict[str, str]]] = []
    for raw in graph.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        attrs: dict[str, str] = {}
        for token in parts[1:]:
            if "=" not in token:
                raise ModelValidationError(f"malformed graph token {token!r} in line {line!r}")
            key, value = token.split("=", 1)
            attrs[key.lower()] = value
        entries.append((parts[0].lower(), attrs))
    return entries


def graph_tensor_refs(graph: str) -> list[str]:
    """Tensor names referenced by the graph text, in order of appearance."""
    refs: list[str] = []
    for _, attrs in iter_graph_lines(graph):
        for key, value in attrs.items():
            if key in GRAPH_REF_KEYS:
                refs.append(value)
    return refs


@dataclass
class ModelFile:
    """Tensor table plus the textual layer graph driving the engine."""

    tensors: list[Tensor]
    graph: str = ""

    def tensor(self, name: str) -> Tensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(f"no tensor named {name!r}")

    def tensor_map(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.tensors}

    def payload_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors)

    def validate(self) -> None:
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ModelValidationError(f"duplicate tensor names: {dupes}")
        for t in self.tensors:
            t.validate_finite()
        known = set(names)
        missing = [r for r in graph_tensor_refs(self.graph) if r not in known]
        if missing:
            raise ModelValidationError(f"graph references unknown tensors: {sorted(set(missing))}")


class _Cursor:
    """Bounds-checked little-endian reader over a byte buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelCorruptionError(f"truncated file while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def u8(self, what: str) -> int:
        return self.unpack("<B", what)[0]

    def u16(self, what: str) -> int:
        return self.unpack("<H", what)[0]

    def u32(self, what: str) -> int:
        return self.unpack("<I", what)[0]

    def u64(self, what: str) -> int:
        return self.unpack("<Q", what)[0]


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ModelValidationError(f"tensor name too long: {name[:32]!r}...")
    return struct.pack("<H", len(raw)) + raw


def _read_name(cur: _Cursor) -> str:
    n = cur.u16("name length")
    try:
        return cur.take(n, "tensor name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelCorruptionError(f"undecodable tensor name: {exc}") from exc


def serialize_model(model: ModelFile) -> bytes:
    model.validate()
    header = bytearray()
    header += MODEL_MAGIC
    header += struct.pack("<II", MODEL_VERSION, len(model.tensors))

    entries = []
    entry_sizes = 0
    for t in model.tensors:
        name = _encode_name(t.name)
        entries.append(name)
        entry_sizes += len(name) + 1 + 1 + 4 * len(t.shape) + 8

    offset = len(header) + entry_sizes
    for t, name in zip(model.tensors, entries):
        header += name
        header += struct.pack("<BB", _DTYPE_F32, len(t.shape))
        header += struct.pack(f"<{len(t.shape)}I", *t.shape)
        header += struct.pack("<Q", offset)
        offset += t.nbytes

    payload = b"".join(t.data.astype("<f4").tobytes() for t in model.tensors)
    return bytes(header) + payload + model.graph.encode("utf-8")


def parse_model(data: bytes) -> ModelFile:
    cur = _Cursor(data)
    if cur.take(4, "magic") != MODEL_MAGIC:
        raise ModelFormatError("not a model container (bad magic)")
    version = cur.u32("version")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported container version {version}")
    count = cur.u32("tensor count")

    headers = []
    for i in range(count):
        name = _read_name(cur)
        dtype = cur.u8(f"dtype of tensor {i}")
        if dtype != _DTYPE_F32:
            raise ModelFormatError(f"unknown dtype tag {dtype} for tensor {name!r}")
        rank = cur.u8(f"rank of tensor {i}")
        dims = cur.unpack(f"<{rank}I", f"dims of tensor {i}") if rank else ()
        offset = cur.u64(f"offset of tensor {i}")
        headers.append((name, tuple(dims), offset))

    tensors = []
    expected = cur.pos
    for name, dims, offset in headers:
        if offset != expected:
            raise ModelCorruptionError(
                f"tensor {name!r}: payload offset {offset}, expected contiguous {expected}"
            )
        nbytes = 4 * math.prod(dims)
        if offset + nbytes > len(data):
            raise ModelCorruptionError(f"tensor {name!r}: payload truncated")
        values = np.frombuffer(data, dtype="<f4", count=math.prod(dims), offset=offset)
        tensors.append(Tensor(name, dims, values.copy()))
        expected = offset + nbytes

    try:
        graph = data[expected:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelCorruptionError(f"undecodable graph text: {exc}") from exc

    model = ModelFile(tensors, graph)
    model.validate()
    return model


def load_model(path) -> ModelFile:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read model {path}: {exc}") from exc
    return parse_model(data)


def save_model(model: ModelFile, path) -> None:
    data = serialize_model(model)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write model {path}: {exc}") from exc


def packed_payload_size(bit_width: int, count: int) -> int:
    """Payload bytes for `count` codes at `bit_width` bits: ceil(n*count/8)."""
    return (bit_width * count + 7) // 8


def pack_codes(codes: np.ndarray, bit_width: int) -> bytes:
    """Bit-pack unsigned codes LSB-first, padded with zeros to a byte."""
    if not 1 <= bit_width <= 8:
        raise ValueError(f"bit width {bit_width} out of packing range [1, 8]")
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bit_width)):
        raise ValueError(f"code out of {bit_width}-bit range: internal invariant violated")
    bits = np.unpackbits(codes.astype(np.uint8)[:, None], axis=1, bitorder="little")
    return np.packbits(bits[:, :bit_width].ravel(), bitorder="little").tobytes()


def unpack_codes(payload: bytes, bit_width: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns int64 codes."""
    expected = packed_payload_size(bit_width, count)
    if len(payload) != expected:
        raise ModelCorruptionError(f"packed payload is {len(payload)} bytes, expected {expected}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    bits = bits[: bit_width * count].reshape(count, bit_width).astype(np.int64)
    weights = np.int64(1) << np.arange(bit_width, dtype=np.int64)
    return bits @ weights


@dataclass
class PackedTensor:
    name: str
    shape: tuple[int, ...]
    params: QuantParams
    payload: bytes

    @property
    def count(self) -> int:
        return int(math.prod(self.shape))


@dataclass
class PackedQuantModel:
    scheme: QuantScheme
    bit_width: int
    tensors: list[PackedTensor] = field(default_factory=list)

    def payload_bytes(self) -> int:
        return sum(len(t.payload) for t in self.tensors)

    def concat_payload(self) -> bytes:
        return b"".join(t.payload for t in self.tensors)


def _stored_codes(q: "QuantizedTensor", scheme: QuantScheme, bit_width: int) -> np.ndarray:
    if scheme is QuantScheme.ASYMM:
        return q.codes
    if scheme is QuantScheme.SYMM:
        return q.codes + ((1 << (bit_width - 1)) - 1)
    e_bits = bit_width - 1
    reserved = (1 << e_bits) - 1
    nonzero = q.signs != 0
    exp_code = np.where(nonzero, q.exponents - int(q.params.exponent_min[0]), reserved)
    if nonzero.any() and exp_code[nonzero].max() >= reserved:
        raise ValueError("pow2 exponent exceeds code range: internal invariant violated")
    return (np.where(q.signs < 0, 1, 0) << e_bits) | exp_code


def pack_quantized(
    tensors: Sequence["QuantizedTensor"], scheme: QuantScheme, bit_width: int
) -> PackedQuantModel:
    """Pack quantized tensors of one scheme/width into sub-byte storage."""
    scheme = QuantScheme(scheme)
    for q in tensors:
        if q.scheme is not scheme or q.bit_width != bit_width:
            raise ValueError(
                f"tensor {q.name!r} is {q.scheme.value}/{q.bit_width}-bit, "
                f"expected {scheme.value}/{bit_width}-bit"
            )
    packed = PackedQuantModel(scheme, bit_width)
    for q in tensors:
        payload = pack_codes(_stored_codes(q, scheme, bit_width), bit_width)
        packed.tensors.append(PackedTensor(q.name, q.shape, q.params, payload))
    return packed


def unpack_quantized(packed: PackedQuantModel) -> list["QuantizedTensor"]:
    """Recover the exact quantized tensors from a packed model."""
    from .quant_core import QuantizedTensor  # local import: quant_core imports this module

    out = []
    n = packed.bit_width
    for t in packed.tensors:
        stored = unpack_codes(t.payload, n, t.count)
        groups = _param_group_count(t.params)
        axis = 0 if groups > 1 else None
        if packed.scheme is QuantScheme.ASYMM:
            q = QuantizedTensor(
                t.name, packed.scheme, n, t.shape, t.params,
                codes=stored.astype(np.int32), channel_axis=axis,
            )
        elif packed.scheme is QuantScheme.SYMM:
            codes = stored - ((1 << (n - 1)) - 1)
            q = QuantizedTensor(
                t.name, packed.scheme, n, t.shape, t.params,
                codes=codes.astype(np.int32), channel_axis=axis,
            )
        else:
            e_bits = n - 1
            reserved = (1 << e_bits) - 1
            code = stored & reserved
            zero = code == reserved
            signs = np.where(zero, 0, np.where(stored >> e_bits, -1, 1)).astype(np.int8)
            exponents = np.where(zero, 0, code + int(t.params.exponent_min[0])).astype(np.int32)
            q = QuantizedTensor(
                t.name, packed.scheme, n, t.shape, t.params,
                signs=signs, exponents=exponents,
            )
        out.append(q)
    return out


def _param_group_count(params: QuantParams) -> int:
    if isinstance(params, AsymmParams):
        return len(params.min_val)
    if isinstance(params, SymmParams):
        return len(params.max_abs)
    return len(params.exponent_min)


def serialize_packed(packed: PackedQuantModel) -> bytes:
    out = bytearray()
    out += PACKED_MAGIC
    out += struct.pack("<BBI", _SCHEME_TAGS[packed.scheme], packed.bit_width, len(packed.tensors))
    for t in packed.tensors:
        out += _encode_name(t.name)
        out += struct.pack("<B", len(t.shape))
        out += struct.pack(f"<{len(t.shape)}I", *t.shape)
        groups = _param_group_count(t.params)
        out += struct.pack("<I", groups)
        if isinstance(t.params, AsymmParams):
            for lo, hi in zip(t.params.min_val, t.params.max_val):
                out += struct.pack("<2f", lo, hi)
        elif isinstance(t.params, SymmParams):
            for m in t.params.max_abs:
                out += struct.pack("<f", m)
        else:
            for lo, hi in zip(t.params.exponent_min, t.params.exponent_max):
                out += struct.pack("<2i", lo, hi)
        expected = packed_payload_size(packed.bit_width, t.count)
        if len(t.payload) != expected:
            raise ModelValidationError(
                f"packed tensor {t.name!r}: payload {len(t.payload)} bytes, expected {expected}"
            )
        out += struct.pack("<I", len(t.payload))
        out += t.payload
    return bytes(out)


def parse_packed(data: bytes) -> PackedQuantModel:
    cur = _Cursor(data)
    if cur.take(4, "magic") != PACKED_MAGIC:
        raise ModelFormatError("not a packed model (bad magic)")
    tag, bit_width, count = cur.unpack("<BBI", "packed header")
    if tag not in _TAG_SCHEMES:
        raise ModelFormatError(f"unknown scheme tag {tag}")
    scheme = _TAG_SCHEMES[tag]
    packed = PackedQuantModel(scheme, bit_width)
    for i in range(count):
        name = _read_name(cur)
        rank = cur.u8(f"rank of tensor {i}")
        dims = tuple(cur.unpack(f"<{rank}I", f"dims of tensor {i}")) if rank else ()
        groups = cur.u32(f"param groups of tensor {i}")
        if scheme is QuantScheme.ASYMM:
            vals = cur.unpack(f"<{2 * groups}f", f"params of tensor {i}")
            params: QuantParams = AsymmParams(
                np.array(vals[0::2], dtype=np.float32), np.array(vals[1::2], dtype=np.float32)
            )
        elif scheme is QuantScheme.SYMM:
            vals = cur.unpack(f"<{groups}f", f"params of tensor {i}")
            params = SymmParams(np.array(vals, dtype=np.float32))
        else:
            vals = cur.unpack(f"<{2 * groups}i", f"params of tensor {i}")
            params = Pow2Params(
                np.array(vals[0::2], dtype=np.int32), np.array(vals[1::2], dtype=np.int32)
            )
        payload_len = cur.u32(f"payload length of tensor {i}")
        payload = bytes(cur.take(payload_len, f"payload of tensor {i}"))
        if payload_len != packed_payload_size(bit_width, math.prod(dims)):
            raise ModelCorruptionError(f"packed tensor {name!r}: payload length mismatch")
        packed.tensors.append(PackedTensor(name, dims, params, payload))
    return packed


def load_packed(path) -> PackedQuantModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read packed model {path}: {exc}") from exc
    return parse_packed(data)


def save_packed(packed: PackedQuantModel, path) -> None:
    data = serialize_packed(packed)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write packed model {path}: {exc}") from exc
