"""Reference block-wise round-to-nearest absmax quantizer.

The quantizer exists to generate realistic high/low pairs for tests and
benchmarks.  The archive accepts any block quantizer's output through
:class:`QuantSpec`, which just describes block geometry, scales, and the
clamp range of the integer values.

Arithmetic is pinned for reproducibility: weights widen exactly to float32,
``t = (K * w) / s`` is evaluated in float32, and ``t`` is rounded half away
from zero (exactly, not via the +0.5 float trick at single precision).
Non-finite weights quantize to 0 (NaN) or the clamp bound (+/-Inf) and
scales consider finite magnitudes only; losslessness never depends on this
because reconstruction stores the original bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError
from .tensors import DType, ModelTensors, Tensor, pack_int4

__all__ = [
    "QuantSpec",
    "QuantizedPair",
    "quantize_rtn",
    "dequantize",
    "save_spec_sidecar",
    "load_spec_sidecar",
    "f32_from_high",
    "high_from_f32",
]

BLOCK_AXES = ("per_row", "flat_groups")


def default_clamp(bit_width: int) -> tuple[int, int]:
    k = (1 << (bit_width - 1)) - 1
    return (-k, k)


@dataclass(frozen=True, eq=False)
class QuantSpec:
    """Block geometry and scales of one tensor's quantization.

    ``block_size`` is 0 for per_row (the block is one row of the tensor the
    spec is applied to).  Scales are finite positive float32; an all-zero
    block gets scale 1 by convention.
    """

    method: str
    bit_width: int
    block_axis: str
    block_size: int
    scales: np.ndarray
    rounding: str = "half_away_from_zero"
    clamp: tuple[int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.bit_width not in (4, 8):
            raise GeometryError(f"unsupported bit width {self.bit_width}")
        if self.block_axis not in BLOCK_AXES:
            raise GeometryError(f"unknown block axis {self.block_axis!r}")
        if self.block_axis == "flat_groups" and self.block_size < 1:
            raise GeometryError("flat_groups requires block_size >= 1")
        scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        object.__setattr__(self, "scales", scales)
        if scales.size and (not np.isfinite(scales).all() or (scales <= 0).any()):
            raise GeometryError("scales must be finite and > 0")
        if self.clamp is None:
            object.__setattr__(self, "clamp", default_clamp(self.bit_width))
        lo, hi = self.clamp
        if not (lo < 0 < hi):
            raise GeometryError(f"clamp range {self.clamp} must straddle zero")
        object.__setattr__(self, "clamp", (int(lo), int(hi)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantSpec):
            return NotImplemented
        return (
            self.method == other.method
            and self.bit_width == other.bit_width
            and self.block_axis == other.block_axis
            and self.block_size == other.block_size
            and self.rounding == other.rounding
            and self.clamp == other.clamp
            and self.scales.shape == other.scales.shape
            and bool(
                (self.scales.view(np.uint32) == other.scales.view(np.uint32)).all()
            )
        )

    @property
    def value_count(self) -> int:
        return self.clamp[1] - self.clamp[0] + 1

    def low_dtype(self) -> DType:
        return DType.INT8 if self.bit_width == 8 else DType.INT4_PACKED

    def block_count(self, shape: tuple[int, ...]) -> int:
        return block_count(shape, self.block_axis, self.block_size)

    def validate_geometry(self, shape: tuple[int, ...]) -> None:
        expect = self.block_count(shape)
        if self.scales.size != expect:
            raise GeometryError(
                f"{self.scales.size} scales for {expect} blocks of shape {shape}"
            )


@dataclass(frozen=True)
class QuantizedPair:
    high: Tensor
    low: Tensor
    spec: QuantSpec

    def __post_init__(self):
        if self.high.shape != self.low.shape:
            raise GeometryError("high/low shapes differ")


def block_count(shape: tuple[int, ...], block_axis: str, block_size: int) -> int:
    n = int(np.prod(shape, dtype=np.int64)) if shape else 0
    if block_axis == "per_row":
        width = shape[-1]
        if width == 0 and n == 0 and any(d == 0 for d in shape[:-1]):
            return 0
        if width == 0:
            raise GeometryError("per_row blocks of width 0")
        return n // width
    return (n + block_size - 1) // block_size if n else 0


def block_bounds(shape, block_axis, block_size) -> tuple[np.ndarray, np.ndarray]:
    """(starts, lengths) of each block in flat row-major element order."""
    n = int(np.prod(shape, dtype=np.int64)) if shape else 0
    nb = block_count(shape, block_axis, block_size)
    if block_axis == "per_row":
        width = shape[-1] if nb else 0
        starts = np.arange(nb, dtype=np.int64) * width
        lengths = np.full(nb, width, np.int64)
    else:
        starts = np.arange(nb, dtype=np.int64) * block_size
        lengths = np.minimum(starts + block_size, n) - starts
    return starts, lengths


def block_id_per_element(shape, block_axis, block_size) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64)) if shape else 0
    if block_axis == "per_row":
        width = shape[-1]
        if n == 0:
            return np.empty(0, np.int64)
        return np.repeat(np.arange(n // width, dtype=np.int64), width)
    return np.arange(n, dtype=np.int64) // block_size


# -- float conversions --------------------------------------------------------


def f32_from_high(t: Tensor) -> np.ndarray:
    """Exact float32 widening of FP16/BF16 tensor values."""
    u16 = t.as_uint16()
    if t.dtype is DType.FP16:
        return u16.view(np.float16).astype(np.float32)
    return (u16.astype(np.uint32) << 16).view(np.float32)


def high_from_f32(values: np.ndarray, dtype: DType) -> bytes:
    """Round float32 values to nearest-even FP16 or BF16 bytes."""
    v = np.ascontiguousarray(values, dtype=np.float32)
    if dtype is DType.FP16:
        return v.astype(np.float16).tobytes()
    if dtype is DType.BF16:
        bits = v.view(np.uint32)
        rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
        nan = ~np.isfinite(v) & (bits & np.uint32(0x007FFFFF) != 0)
        out = np.where(nan, (bits >> 16) | np.uint32(0x0040), rounded)
        return out.astype("<u2").tobytes()
    raise GeometryError(f"{dtype.value} is not a float dtype")


def _round_half_away(t32: np.ndarray) -> np.ndarray:
    t = t32.astype(np.float64)
    r = np.floor(np.abs(t) + 0.5)
    return np.where(t < 0, -r, r)


def quantize_rtn(
    high: Tensor,
    bit_width: int = 8,
    block_axis: str = "per_row",
    block_size: int = 0,
) -> QuantizedPair:
    """Quantize each block i by q = clamp(round(K * w / s_i)), s_i = absmax.

    K is 2^(bit_width-1) - 1 with a symmetric clamp, so the most negative
    integer never occurs.  Deterministic: identical inputs give bit-identical
    pairs regardless of parallelism.
    """
    if high.dtype not in (DType.FP16, DType.BF16):
        raise GeometryError(f"cannot quantize {high.dtype.value} input")
    if block_axis == "flat_groups" and block_size < 1:
        raise GeometryError("flat_groups requires block_size >= 1")
    k = (1 << (bit_width - 1)) - 1
    w = f32_from_high(high)
    starts, lengths = block_bounds(high.shape, block_axis, block_size)
    mags = np.abs(w)
    mags[~np.isfinite(w)] = 0.0
    if starts.size:
        absmax = np.maximum.reduceat(mags, starts)
        absmax[lengths == 0] = 0.0
    else:
        absmax = np.empty(0, np.float32)
    scales = np.where(absmax > 0, absmax, np.float32(1.0)).astype(np.float32)

    if w.size:
        per_elem_scale = np.repeat(scales, lengths)
        t = (np.float32(k) * w) / per_elem_scale
        t = np.nan_to_num(t, nan=0.0, posinf=float(k), neginf=float(-k))
        q = np.clip(_round_half_away(t), -k, k).astype(np.int8)
    else:
        q = np.empty(0, np.int8)

    spec = QuantSpec(
        method="rtn_absmax",
        bit_width=bit_width,
        block_axis=block_axis,
        block_size=block_size if block_axis == "flat_groups" else 0,
        scales=scales,
        clamp=(-k, k),
    )
    data = q.tobytes() if bit_width == 8 else pack_int4(q)
    low = Tensor(high.name, spec.low_dtype(), high.shape, data)
    return QuantizedPair(high, low, spec)


def dequantize(low: Tensor, spec: QuantSpec, dtype: DType = DType.FP16) -> Tensor:
    """Lossy inverse s_i * q / K, rounded to the nearest representable value."""
    spec.validate_geometry(low.shape)
    if spec.low_dtype() is not low.dtype:
        raise GeometryError(
            f"spec is {spec.bit_width}-bit but tensor is {low.dtype.value}"
        )
    q = low.int_values().astype(np.float32)
    _, lengths = block_bounds(low.shape, spec.block_axis, spec.block_size)
    k = np.float32((1 << (spec.bit_width - 1)) - 1)
    v = (np.repeat(spec.scales, lengths) * q) / k if q.size else np.empty(0, np.float32)
    return Tensor(low.name, dtype, low.shape, high_from_f32(v, dtype))


# -- sidecar files -------------------------------------------------------------
#
# A sidecar describes one whole bundle's quantization: shared geometry in
# JSON plus one raw little-endian float32 file holding every tensor's scales
# concatenated in lexicographic tensor-name order.


def save_spec_sidecar(
    specs: dict[str, QuantSpec], path, scales_file: str | None = None
) -> None:
    p = Path(path)
    if not specs:
        raise GeometryError("no specs to save")
    names = sorted(specs)
    first = specs[names[0]]
    for n in names:
        s = specs[n]
        if (s.method, s.bit_width, s.block_axis, s.block_size, s.rounding) != (
            first.method,
            first.bit_width,
            first.block_axis,
            first.block_size,
            first.rounding,
        ):
            raise GeometryError("sidecar requires one shared block geometry")
    if scales_file is None:
        scales_file = p.stem + ".scales.f32"
    blob = b"".join(specs[n].scales.astype("<f4").tobytes() for n in names)
    (p.parent / scales_file).write_bytes(blob)
    meta = {
        "method": first.method,
        "bit_width": first.bit_width,
        "block_axis": first.block_axis,
        "block_size": first.block_size,
        "rounding": first.rounding,
        "scales_file": scales_file,
    }
    p.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_spec_sidecar(path, model: ModelTensors) -> dict[str, QuantSpec]:
    """Rebuild per-tensor specs; block counts come from the model's shapes."""
    p = Path(path)
    try:
        meta = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed spec sidecar: {e}") from None
    try:
        axis = meta["block_axis"]
        bsize = int(meta["block_size"])
        scales = np.frombuffer((p.parent / meta["scales_file"]).read_bytes(), dtype="<f4")
        common = dict(
            method=meta["method"],
            bit_width=int(meta["bit_width"]),
            block_axis=axis,
            block_size=bsize,
            rounding=meta["rounding"],
        )
    except KeyError as e:
        raise FormatError(f"spec sidecar missing field {e}") from None
    specs = {}
    off = 0
    for name in model.names:
        t = model[name]
        nb = block_count(t.shape, axis, bsize)
        if off + nb > scales.size:
            raise FormatError("scales file shorter than the model's block count")
        specs[name] = QuantSpec(scales=scales[off : off + nb].copy(), **common)
        off += nb
    if off != scales.size:
        raise FormatError(f"scales file has {scales.size - off} trailing values")
    return specs
