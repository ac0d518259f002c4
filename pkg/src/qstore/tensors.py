"""Weight tensors and their interchange formats on disk.

A model is an ordered collection of named tensors.  Two bundle layouts are
supported and round-trip bit-exactly:

* directory bundle: ``manifest.json`` listing ``{name, dtype, shape, file}``
  entries, one raw little-endian data file per tensor;
* single-file container: an 8-byte little-endian header length, a JSON
  header mapping tensor name to ``{dtype, shape, data_offsets}``, then the
  packed data region.  The layout is interoperable with the common
  safetensors arrangement.

Weight bytes are treated as opaque: NaN/Inf payloads in FP16/BF16 data are
preserved verbatim, never canonicalized.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError

__all__ = [
    "DType",
    "Tensor",
    "ModelTensors",
    "load_tensor_bundle",
    "store_tensor_bundle",
    "pack_int4",
    "unpack_int4",
]


class DType(Enum):
    FP16 = "FP16"
    BF16 = "BF16"
    INT8 = "INT8"
    INT4_PACKED = "INT4_PACKED"

    @property
    def bits(self) -> int:
        return _BITS[self]

    @property
    def code(self) -> int:
        """Stable one-byte identifier used in binary headers."""
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "DType":
        try:
            return _FROM_CODE[code]
        except KeyError:
            raise FormatError(f"unknown dtype code {code}") from None

    @classmethod
    def parse(cls, label: str) -> "DType":
        try:
            return _ALIASES[label]
        except KeyError:
            raise FormatError(f"unknown dtype {label!r}") from None

    def byte_length(self, nelems: int) -> int:
        """On-disk byte count for ``nelems`` elements (INT4 rounds up)."""
        return (nelems * self.bits + 7) // 8


_BITS = {DType.FP16: 16, DType.BF16: 16, DType.INT8: 8, DType.INT4_PACKED: 4}
_CODES = {DType.FP16: 0, DType.BF16: 1, DType.INT8: 2, DType.INT4_PACKED: 3}
_FROM_CODE = {v: k for k, v in _CODES.items()}

# Container files accept the safetensors spellings alongside our own.
_ALIASES = {
    "FP16": DType.FP16,
    "F16": DType.FP16,
    "BF16": DType.BF16,
    "INT8": DType.INT8,
    "I8": DType.INT8,
    "INT4_PACKED": DType.INT4_PACKED,
    "I4P": DType.INT4_PACKED,
}
_CONTAINER_LABEL = {
    DType.FP16: "F16",
    DType.BF16: "BF16",
    DType.INT8: "I8",
    DType.INT4_PACKED: "I4P",
}


@dataclass(frozen=True)
class Tensor:
    """One named weight tensor: raw little-endian bytes plus geometry."""

    name: str
    dtype: DType
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if len(self.shape) == 0:
            raise GeometryError(f"tensor {self.name!r}: scalar shapes are not supported")
        if any(d < 0 for d in self.shape):
            raise GeometryError(f"tensor {self.name!r}: negative dimension in {self.shape}")
        expect = self.dtype.byte_length(self.nelems)
        if len(self.data) != expect:
            raise FormatError(
                f"tensor {self.name!r}: {len(self.data)} data bytes, expected "
                f"{expect} for shape {self.shape} {self.dtype.value}"
            )

    @property
    def nelems(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def as_uint8(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8)

    def as_uint16(self) -> np.ndarray:
        """Little-endian 16-bit view; valid for FP16/BF16 tensors."""
        if self.dtype not in (DType.FP16, DType.BF16):
            raise GeometryError(f"tensor {self.name!r} is {self.dtype.value}, not 16-bit")
        return np.frombuffer(self.data, dtype="<u2")

    def int_values(self) -> np.ndarray:
        """Quantized integer values as int8 (INT4 is unpacked)."""
        if self.dtype is DType.INT8:
            return np.frombuffer(self.data, dtype=np.int8)
        if self.dtype is DType.INT4_PACKED:
            return unpack_int4(self.data, self.nelems)
        raise GeometryError(f"tensor {self.name!r} is {self.dtype.value}, not an integer dtype")


def pack_int4(values: np.ndarray) -> bytes:
    """Pack int8 values in [-8, 7] two per byte.

    Low nibble holds the earlier element; each nibble stores value + 8.
    An odd element count leaves the final high nibble zero.
    """
    v = np.asarray(values, dtype=np.int8)
    if v.size and (v.min() < -8 or v.max() > 7):
        raise GeometryError("INT4 values out of range [-8, 7]")
    u = (v.astype(np.int16) + 8).astype(np.uint8)
    if u.size % 2:
        u = np.concatenate([u, np.zeros(1, np.uint8) - 8])  # pad nibble stays raw zero
        u[-1] = 0
    lo = u[0::2]
    hi = u[1::2]
    return ((hi << 4) | lo).tobytes()


def unpack_int4(data: bytes, nelems: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size != (nelems + 1) // 2:
        raise FormatError(f"INT4 buffer holds {raw.size} bytes, expected {(nelems + 1) // 2}")
    out = np.empty(raw.size * 2, np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return (out[:nelems].astype(np.int16) - 8).astype(np.int8)


class ModelTensors:
    """Immutable, name-ordered collection of tensors.

    Iteration order is always lexicographic by name, independent of the
    order tensors were supplied or stored, so load/save round trips
    enumerate identically.
    """

    def __init__(self, tensors):
        by_name = {}
        for t in tensors:
            if t.name in by_name:
                raise GeometryError(f"duplicate tensor name {t.name!r}")
            by_name[t.name] = t
        self._tensors = {name: by_name[name] for name in sorted(by_name)}

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelTensors):
            return NotImplemented
        return self.names == other.names and all(
            a.dtype is b.dtype and a.shape == b.shape and a.data == b.data
            for a, b in zip(self, other)
        )

    def __repr__(self) -> str:
        return f"ModelTensors({len(self)} tensors)"

    @property
    def total_elements(self) -> int:
        return sum(t.nelems for t in self)

    @property
    def total_bytes(self) -> int:
        return sum(t.nbytes for t in self)


def load_tensor_bundle(path) -> ModelTensors:
    """Load a directory bundle or single-file container, bit-exact."""
    p = Path(path)
    if p.is_dir():
        return _load_directory(p)
    if p.is_file():
        return _load_container(p.read_bytes(), p)
    raise FileNotFoundError(p)


def store_tensor_bundle(model: ModelTensors, path, format: str = "directory") -> None:
    """Store so that :func:`load_tensor_bundle` returns bit-identical tensors."""
    p = Path(path)
    if format == "directory":
        _store_directory(model, p)
    elif format == "single_file":
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(serialize_container(model))
    else:
        raise ValueError(f"unknown bundle format {format!r}")


# -- directory bundles -------------------------------------------------------

_SAFE_CHARS = re.compile(r"[^A-Za-z0-9._-]")


def _load_directory(root: Path) -> ModelTensors:
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise FormatError(f"no manifest.json in {root}")
    try:
        entries = json.loads(manifest.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed manifest.json: {e}") from None
    if not isinstance(entries, list):
        raise FormatError("manifest.json must be a list of tensor entries")
    tensors = []
    for e in entries:
        try:
            name, dtype, shape, file = e["name"], e["dtype"], e["shape"], e["file"]
        except (TypeError, KeyError) as exc:
            raise FormatError(f"manifest entry missing field: {exc}") from None
        data = (root / file).read_bytes()
        tensors.append(Tensor(name, DType.parse(dtype), tuple(shape), data))
    return ModelTensors(tensors)


def _store_directory(model: ModelTensors, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    used = set()
    for t in model:
        base = _SAFE_CHARS.sub("_", t.name) or "tensor"
        fname = base + ".bin"
        k = 1
        while fname in used:
            fname = f"{base}.{k}.bin"
            k += 1
        used.add(fname)
        (root / fname).write_bytes(t.data)
        entries.append(
            {"name": t.name, "dtype": t.dtype.value, "shape": list(t.shape), "file": fname}
        )
    (root / "manifest.json").write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")


# -- single-file containers --------------------------------------------------


def serialize_container(model: ModelTensors) -> bytes:
    header = {}
    offset = 0
    blobs = []
    for t in model:
        header[t.name] = {
            "dtype": _CONTAINER_LABEL[t.dtype],
            "shape": list(t.shape),
            "data_offsets": [offset, offset + t.nbytes],
        }
        blobs.append(t.data)
        offset += t.nbytes
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return len(hjson).to_bytes(8, "little") + hjson + b"".join(blobs)


def _load_container(blob: bytes, origin: Path) -> ModelTensors:
    if len(blob) < 8:
        raise FormatError(f"{origin}: truncated container header")
    hlen = int.from_bytes(blob[:8], "little")
    if 8 + hlen > len(blob):
        raise FormatError(f"{origin}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + hlen])
    except json.JSONDecodeError as e:
        raise FormatError(f"{origin}: malformed JSON header: {e}") from None
    if not isinstance(header, dict):
        raise FormatError(f"{origin}: container header must be an object")
    data = blob[8 + hlen :]
    tensors = []
    for name, meta in header.items():
        if name == "__metadata__":
            continue
        try:
            dtype = DType.parse(meta["dtype"])
            shape = tuple(meta["shape"])
            begin, end = meta["data_offsets"]
        except (TypeError, KeyError, ValueError) as exc:
            raise FormatError(f"{origin}: bad entry for {name!r}: {exc}") from None
        if not (0 <= begin <= end <= len(data)):
            raise FormatError(f"{origin}: data_offsets out of range for {name!r}")
        tensors.append(Tensor(name, dtype, shape, bytes(data[begin:end])))
    return ModelTensors(tensors)
