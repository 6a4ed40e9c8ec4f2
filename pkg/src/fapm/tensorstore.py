"""Checkpoint container I/O and dtype conversion.

Layout: an 8-byte little-endian header length ``N``, ``N`` bytes of JSON
mapping tensor names to ``{"dtype", "shape", "data_offsets"}`` (plus an
optional ``"__metadata__"`` string map), then the raw little-endian data
region. Offsets are relative to the start of the data region.
"""

from __future__ import annotations

import enum
import json
import math
import mmap
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import (
    InvariantViolation,
    MalformedHeader,
    OffsetOverlap,
    TruncatedData,
    UnknownDType,
)
from .rng import fnv1a64

METADATA_KEY = "__metadata__"
MAX_HEADER_BYTES = 100 * 1024 * 1024
_ALIGN = 8


class DType(str, enum.Enum):
    F64 = "F64"
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def storage(self) -> np.dtype:
        """numpy dtype of the raw element buffer (BF16 is kept as bits)."""
        return _STORAGE[self]

    @property
    def is_float(self) -> bool:
        return True

    @classmethod
    def parse(cls, value: str) -> "DType":
        try:
            return cls(value)
        except ValueError:
            raise UnknownDType(f"unknown dtype {value!r}") from None


_ITEMSIZE = {DType.F64: 8, DType.F32: 4, DType.F16: 2, DType.BF16: 2}
_STORAGE = {
    DType.F64: np.dtype("<f8"),
    DType.F32: np.dtype("<f4"),
    DType.F16: np.dtype("<f2"),
    DType.BF16: np.dtype("<u2"),
}


# ---------------------------------------------------------------------------
# dtype conversion
# ---------------------------------------------------------------------------


def _f64_to_f32_round_to_odd(x: np.ndarray) -> np.ndarray:
    """binary64 -> binary32 with round-to-odd, returned as uint32 bits.

    Rounding to odd first and then to nearest-even at a narrower precision
    gives the same result as a single correct rounding, which is what the
    BF16 path needs.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        r = x.astype(np.float32)
    back = r.astype(np.float64)
    inexact = (back != x) & ~np.isnan(x)
    if inexact.any():
        overshoot = inexact & (np.abs(back) > np.abs(x))
        r[overshoot] = np.nextafter(r[overshoot], np.float32(0))
    bits = r.view(np.uint32).copy()
    bits[inexact] |= np.uint32(1)
    return bits


def _f64_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    bits = _f64_to_f32_round_to_odd(x)
    nan = np.isnan(x)
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
    out = rounded.astype(np.uint16)
    if nan.any():
        out[nan] = ((bits[nan] >> np.uint32(16)) & np.uint32(0x8000)).astype(np.uint16) | np.uint16(0x7FC0)
    return out


def _bf16_bits_to_f64(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32).astype(np.float64)


def to_f64(data: np.ndarray, dtype: DType) -> np.ndarray:
    """Exact widening of a storage array to binary64."""
    if dtype is DType.BF16:
        return _bf16_bits_to_f64(data)
    return data.astype(np.float64)


def from_f64(values: np.ndarray, dtype: DType) -> np.ndarray:
    """Round binary64 values into the storage representation of ``dtype``.

    Round-to-nearest-even; out-of-range values saturate to +/-infinity.
    """
    values = np.asarray(values, dtype=np.float64)
    if dtype is DType.F64:
        return values.copy()
    if dtype is DType.BF16:
        return _f64_to_bf16_bits(values)
    with np.errstate(over="ignore"):
        return values.astype(dtype.storage)


def cast_tensor(buffer, src: DType, dst: DType) -> np.ndarray:
    """Convert a raw element buffer from ``src`` to ``dst`` storage.

    ``buffer`` may be bytes-like or a numpy array already in ``src`` storage.
    """
    if isinstance(buffer, np.ndarray) and buffer.dtype == src.storage:
        data = buffer
    else:
        raw = memoryview(buffer).cast("B")
        if raw.nbytes % src.itemsize:
            raise InvariantViolation(
                f"buffer of {raw.nbytes} bytes is not a multiple of {src.value} size {src.itemsize}"
            )
        data = np.frombuffer(raw, dtype=src.storage)
    if src is dst:
        return data.copy()
    return from_f64(to_f64(data, src), dst)


# ---------------------------------------------------------------------------
# in-memory types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


class Tensor:
    """A typed, shaped element buffer. Treated as immutable."""

    __slots__ = ("dtype", "data")

    def __init__(self, dtype: DType, data: np.ndarray):
        dtype = DType(dtype)
        if data.dtype != dtype.storage:
            raise InvariantViolation(
                f"buffer dtype {data.dtype} does not match storage for {dtype.value}"
            )
        self.dtype = dtype
        self.data = data

    @classmethod
    def from_f64(cls, values, dtype: DType = DType.F64) -> "Tensor":
        values = np.asarray(values, dtype=np.float64)
        return cls(DType(dtype), from_f64(values, DType(dtype)).reshape(values.shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.itemsize

    def to_f64(self) -> np.ndarray:
        return to_f64(self.data, self.dtype)

    def astype(self, dtype: DType) -> "Tensor":
        dtype = DType(dtype)
        if dtype is self.dtype:
            return self
        return Tensor(dtype, from_f64(self.to_f64(), dtype))

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.data).tobytes()

    def bit_equal(self, other: "Tensor") -> bool:
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor({self.dtype.value}, shape={self.shape})"


@dataclass
class Checkpoint:
    """Named tensors plus a string->string metadata map.

    Iteration is always in ascending name order.
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tensors:
            if name == METADATA_KEY:
                raise InvariantViolation(f"{METADATA_KEY!r} is reserved")
        self.tensors = {k: self.tensors[k] for k in sorted(self.tensors)}
        self.metadata = {str(k): str(v) for k, v in sorted(self.metadata.items())}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: DType = DType.F32,
                    metadata: Mapping[str, str] | None = None) -> "Checkpoint":
        return cls({k: Tensor.from_f64(v, dtype) for k, v in arrays.items()}, dict(metadata or {}))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def num_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def header_json(self) -> bytes:
        """The unpadded header exactly as :func:`save_checkpoint` writes it."""
        return _encode_header(self)[0]

    def fingerprint(self) -> str:
        """64-bit FNV-1a of the serialized header, as 16 hex digits."""
        return f"{fnv1a64(self.header_json()):016x}"

    def bit_equal(self, other: "Checkpoint") -> bool:
        if self.names() != other.names() or self.metadata != other.metadata:
            return False
        return all(self[n].bit_equal(other[n]) for n in self)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _encode_header(ckpt: Checkpoint) -> tuple[bytes, list[tuple[str, Tensor]]]:
    header: dict = {}
    if ckpt.metadata:
        header[METADATA_KEY] = dict(ckpt.metadata)
    offset = 0
    order = []
    for name, tensor in ckpt.tensors.items():
        if tensor.data.size * tensor.dtype.itemsize != tensor.data.nbytes:
            raise InvariantViolation(f"buffer length mismatch for {name!r}")
        end = offset + tensor.nbytes
        header[name] = {
            "dtype": tensor.dtype.value,
            "shape": list(tensor.shape),
            "data_offsets": [offset, end],
        }
        order.append((name, tensor))
        offset = end
    return json.dumps(header, separators=(",", ":"), ensure_ascii=True).encode("ascii"), order


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write ``ckpt`` to ``path``; output bytes depend only on content.

    Tensors are streamed one at a time in ascending name order.
    """
    raw, order = _encode_header(ckpt)
    pad = (-(len(raw)) - 8) % _ALIGN
    raw += b" " * pad
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, tensor in order:
            fh.write(np.ascontiguousarray(tensor.data).reshape(-1).view(np.uint8).data)


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise MalformedHeader(f"duplicate key {key!r} in header")
        out[key] = value
    return out


def _is_uint(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def parse_header(raw: bytes) -> tuple[list[TensorMeta], dict[str, str]]:
    """Decode and validate header JSON (no data access)."""
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_no_duplicates)
    except MalformedHeader:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"invalid header JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header is not a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    metas = []
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeader(f"bad entry for tensor {name!r}")
        if not isinstance(entry["dtype"], str):
            raise MalformedHeader(f"bad dtype for tensor {name!r}")
        dtype = DType.parse(entry["dtype"])
        shape, offsets = entry["shape"], entry["data_offsets"]
        if not isinstance(shape, list) or not all(_is_uint(d) for d in shape):
            raise MalformedHeader(f"bad shape for tensor {name!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(_is_uint(o) for o in offsets)
            or offsets[1] < offsets[0]
        ):
            raise MalformedHeader(f"bad data_offsets for tensor {name!r}")
        expected = dtype.itemsize * math.prod(shape)
        if offsets[1] - offsets[0] != expected:
            raise MalformedHeader(
                f"tensor {name!r}: data_offsets span {offsets[1] - offsets[0]} bytes, "
                f"dtype/shape need {expected}"
            )
        metas.append(TensorMeta(name, dtype, tuple(shape), (offsets[0], offsets[1])))

    spans = sorted((m for m in metas if m.nbytes), key=lambda m: m.data_offsets)
    for prev, cur in zip(spans, spans[1:]):
        if cur.data_offsets[0] < prev.data_offsets[1]:
            raise OffsetOverlap(f"tensors {prev.name!r} and {cur.name!r} overlap")
    return metas, metadata


def read_header(fh, file_size: int) -> tuple[list[TensorMeta], dict[str, str], int]:
    prefix = fh.read(8)
    if len(prefix) < 8:
        raise MalformedHeader("file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", prefix)
    if n == 0:
        raise MalformedHeader("header length is zero")
    if n > MAX_HEADER_BYTES or 8 + n > file_size:
        raise MalformedHeader(f"header length {n} exceeds file or limit")
    metas, metadata = parse_header(fh.read(n))
    data_start = 8 + n
    need = max((m.data_offsets[1] for m in metas), default=0)
    if data_start + need > file_size:
        raise TruncatedData(
            f"data region holds {file_size - data_start} bytes, header needs {need}"
        )
    return metas, metadata, data_start


def load_checkpoint(path: str | os.PathLike, *, use_mmap: bool = False) -> Checkpoint:
    """Read a checkpoint, validating the whole header before touching data.

    With ``use_mmap`` the tensors are read-only views of a shared mapping;
    pages are faulted in on first access instead of being copied up front.
    """
    file_size = os.path.getsize(path)
    with open(path, "rb") as fh:
        metas, metadata, data_start = read_header(fh, file_size)
        tensors: dict[str, Tensor] = {}
        if use_mmap and file_size > data_start:
            mapped = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
            for m in metas:
                count = math.prod(m.shape)
                if count == 0:
                    arr = np.empty(m.shape, dtype=m.dtype.storage)
                else:
                    begin = data_start + m.data_offsets[0]
                    arr = np.frombuffer(mapped, dtype=m.dtype.storage, count=count, offset=begin)
                tensors[m.name] = Tensor(m.dtype, arr.reshape(m.shape))
        else:
            for m in sorted(metas, key=lambda m: m.data_offsets):
                fh.seek(data_start + m.data_offsets[0])
                arr = np.empty(m.shape, dtype=m.dtype.storage)
                got = fh.readinto(arr.reshape(-1).view(np.uint8)) if arr.nbytes else 0
                if got != arr.nbytes:
                    raise TruncatedData(f"short read for tensor {m.name!r}")
                tensors[m.name] = Tensor(m.dtype, arr)
    return Checkpoint(tensors, metadata)


def read_metas(path: str | os.PathLike) -> tuple[list[TensorMeta], dict[str, str]]:
    """Header-only inspection."""
    with open(path, "rb") as fh:
        metas, metadata, _ = read_header(fh, os.path.getsize(path))
    return metas, metadata
