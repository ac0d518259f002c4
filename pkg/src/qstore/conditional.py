"""Conditional coding of high-precision weights given their quantized form.

Blocks that were quantized with a bit-identical scale form a *group*;
within a group, elements sharing a post-quantization integer value form a
*subgroup*.  High-precision elements are routed to their subgroup in one
canonical scan, split into byte planes, and entropy-coded per plane: within
a subgroup the sign/exponent plane is near-constant while the mantissa
plane stays noisy, so separating planes is what lets the coder win.

No position mapping is stored.  The canonical scan is: groups in order of
first block appearance, member blocks ascending, elements row-major within
a block, and each subgroup queue drains strictly FIFO in that order.  The
quantized values replayed at decode select the same queues in the same
order, which *is* the position-inference contract; encoder and decoder must
never diverge from this scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._util import ragged_arange
from .entropy import (
    CHUNK_HEADER_BYTES,
    DEFAULT_CHUNK_SIZE,
    MIN_HUFFMAN_VIABLE,
    chunk_to_bytes,
    encode_chunk,
)
from .errors import CorruptionError, FormatError, GeometryError
from .quantize import QuantSpec, block_bounds
from .tensors import DType, Tensor

__all__ = [
    "Group",
    "GroupingPlan",
    "ConditionalStream",
    "build_grouping",
    "encode_conditional",
    "reconstruct_high",
    "serialization_order",
    "plane_count_for",
]


@dataclass(frozen=True)
class Group:
    key: int  # raw float32 bit pattern of the shared scale
    member_blocks: np.ndarray


@dataclass(frozen=True, eq=False)
class GroupingPlan:
    """Pure function of (spec, low geometry); never inspects weight bytes."""

    group_keys: np.ndarray  # uint32, one per group in plan order
    block_group: np.ndarray  # int64 plan-order group index per block
    value_min: int
    value_max: int

    @property
    def n_groups(self) -> int:
        return self.group_keys.size

    @property
    def value_count(self) -> int:
        return self.value_max - self.value_min + 1

    @property
    def n_subgroups(self) -> int:
        return self.n_groups * self.value_count

    @property
    def groups(self) -> tuple[Group, ...]:
        order = np.argsort(self.block_group, kind="stable")
        splits = np.cumsum(np.bincount(self.block_group, minlength=self.n_groups))[:-1]
        return tuple(
            Group(int(k), m)
            for k, m in zip(self.group_keys, np.split(order, splits))
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupingPlan):
            return NotImplemented
        return (
            (self.value_min, self.value_max) == (other.value_min, other.value_max)
            and np.array_equal(self.group_keys, other.group_keys)
            and np.array_equal(self.block_group, other.block_group)
        )


def plane_count_for(dtype: DType) -> int:
    if dtype in (DType.FP16, DType.BF16):
        return 2
    if dtype is DType.INT8:
        return 1
    raise GeometryError(f"{dtype.value} cannot be conditionally coded")


def build_grouping(spec: QuantSpec, low: Tensor) -> GroupingPlan:
    """Group blocks by bit-identical scale, ordered by first appearance."""
    spec.validate_geometry(low.shape)
    if spec.low_dtype() is not low.dtype:
        raise GeometryError(
            f"{spec.bit_width}-bit spec does not match tensor dtype {low.dtype.value}"
        )
    bits = spec.scales.view(np.uint32)
    vmin, vmax = spec.clamp
    if bits.size == 0:
        return GroupingPlan(np.empty(0, np.uint32), np.empty(0, np.int64), vmin, vmax)
    uniq, first, inverse = np.unique(bits, return_index=True, return_inverse=True)
    rank = np.empty(uniq.size, np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(uniq.size)
    keys = np.empty(uniq.size, np.uint32)
    keys[rank] = uniq
    return GroupingPlan(keys, rank[inverse.ravel()], vmin, vmax)


@dataclass(frozen=True, eq=False)
class ConditionalStream:
    """Wire-ready conditional information for one tensor.

    ``section`` holds the serialized subgroup records (already in group-major,
    ascending-value order); ``counts`` is the same element accounting in array
    form for validation and inspection.
    """

    tensor_name: str
    high_dtype: DType
    plane_count: int
    plan: GroupingPlan
    counts: np.ndarray  # int64 [n_groups, value_count]
    chunk_size: int
    section: bytes

    @property
    def total_elements(self) -> int:
        return int(self.counts.sum())


def _scan_arrays(plan: GroupingPlan, spec: QuantSpec, shape) -> tuple[np.ndarray, np.ndarray]:
    """(perm_scan, group index per scan position) for the canonical scan."""
    starts, lengths = block_bounds(shape, spec.block_axis, spec.block_size)
    order = np.argsort(plan.block_group, kind="stable")
    perm_scan = ragged_arange(starts[order], lengths[order])
    g_scan = np.repeat(plan.block_group[order], lengths[order])
    return perm_scan, g_scan


def _subgroup_keys(plan, spec, low) -> tuple[np.ndarray, np.ndarray]:
    v = low.int_values()
    if v.size and (v.min() < plan.value_min or v.max() > plan.value_max):
        raise GeometryError(
            f"quantized value outside subgroup domain [{plan.value_min}, {plan.value_max}]"
        )
    perm_scan, g_scan = _scan_arrays(plan, spec, low.shape)
    key = g_scan * plan.value_count + (v[perm_scan].astype(np.int64) - plan.value_min)
    return perm_scan, key


def _slots_and_counts(plan, key) -> tuple[np.ndarray, np.ndarray]:
    """FIFO serialized slot per scan position, plus per-subgroup counts."""
    counts = np.bincount(key, minlength=plan.n_subgroups).astype(np.int64)
    offsets = np.zeros(plan.n_subgroups, np.int64)
    if counts.size:
        np.cumsum(counts[:-1], out=offsets[1:])
    slots = _kernels.fifo_positions(key, offsets)
    return slots, counts


def serialization_order(spec: QuantSpec, low: Tensor) -> np.ndarray:
    """Flat element positions in serialized (group, subgroup, FIFO) order."""
    plan = build_grouping(spec, low)
    perm_scan, key = _subgroup_keys(plan, spec, low)
    slots, _ = _slots_and_counts(plan, key)
    order = np.empty(perm_scan.size, np.int64)
    order[slots] = perm_scan
    return order


def encode_conditional(
    high: Tensor,
    low: Tensor,
    spec: QuantSpec,
    plan: GroupingPlan | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> ConditionalStream:
    if high.shape != low.shape:
        raise GeometryError(f"shape mismatch: high {high.shape} vs low {low.shape}")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    pc = plane_count_for(high.dtype)
    if plan is None:
        plan = build_grouping(spec, low)
    perm_scan, key = _subgroup_keys(plan, spec, low)
    slots, counts = _slots_and_counts(plan, key)
    n = high.nelems
    if n:
        elem_src = np.empty(n, np.int64)
        elem_src[slots] = perm_scan
        planes = np.ascontiguousarray(high.as_uint8().reshape(n, pc)[elem_src].T)
    else:
        planes = np.zeros((pc, 0), np.uint8)
    section = _write_section(counts, planes, pc, chunk_size)
    return ConditionalStream(
        tensor_name=high.name,
        high_dtype=high.dtype,
        plane_count=pc,
        plan=plan,
        counts=counts.reshape(plan.n_groups, plan.value_count),
        chunk_size=chunk_size,
        section=section,
    )


def _write_section(counts: np.ndarray, planes: np.ndarray, pc: int, chunk_size: int) -> bytes:
    nsg = counts.size
    sg_start = np.zeros(nsg, np.int64)
    if nsg:
        cs = np.cumsum(counts)
        sg_start[1:] = cs[:-1]
    # Subgroups small enough that coding cannot beat RAW are written by the
    # kernel; the rest go through the full chunk encoder here.
    thresh = min(MIN_HUFFMAN_VIABLE - 1, chunk_size)
    big_off = np.zeros(nsg, np.int64)
    big_len = np.zeros(nsg, np.int64)
    blob_parts = []
    pos = 0
    for k in np.flatnonzero(counts > thresh):
        s = sg_start[k]
        e = s + counts[k]
        parts = []
        for p in range(pc):
            seg = planes[p, s:e]
            for o in range(0, seg.size, chunk_size):
                parts.append(chunk_to_bytes(encode_chunk(seg[o : o + chunk_size])))
        blob = b"".join(parts)
        big_off[k] = pos
        big_len[k] = len(blob)
        blob_parts.append(blob)
        pos += len(blob)
    big_blob = np.frombuffer(b"".join(blob_parts), np.uint8) if pos else np.zeros(0, np.uint8)
    small = (counts > 0) & (counts <= thresh)
    cap = 4 * nsg + pc * (CHUNK_HEADER_BYTES + 1) * int(small.sum()) + pc * int(counts[small].sum()) + pos
    out = np.empty(cap, np.uint8)
    size = _kernels.write_subgroups(counts, planes, sg_start, big_off, big_len, big_blob, out)
    return out[:size].tobytes()


def _read_section(section: bytes, counts: np.ndarray, pc: int) -> np.ndarray:
    buf = np.frombuffer(section, np.uint8)
    nsg = counts.size
    scanned = np.empty(nsg, np.int64)
    end, total, n_huff, _comp, status = _kernels.scan_subgroups(buf, 0, nsg, pc, scanned)
    if status == _kernels.TRUNCATED:
        raise CorruptionError("conditional section truncated")
    if status != _kernels.OK:
        raise CorruptionError("malformed chunk record in conditional section")
    if end != buf.size:
        raise CorruptionError("trailing bytes after conditional section")
    if not np.array_equal(scanned, counts):
        raise CorruptionError("stored subgroup counts disagree with section records")
    planes = np.zeros((pc, total), np.uint8)
    desc = np.zeros((n_huff, 5), np.int64)
    _kernels.read_subgroups(buf, 0, pc, counts, planes, desc)
    if n_huff:
        status = _kernels.decode_subgroup_huffman(buf, desc, planes)
        if status == _kernels.BAD_RECORD:
            raise FormatError("invalid code-length table in conditional section")
        if status != _kernels.OK:
            raise CorruptionError("corrupt HUFFMAN payload in conditional section")
    return planes


def reconstruct_high(low: Tensor, spec: QuantSpec, cond: ConditionalStream) -> Tensor:
    """Replay the canonical scan, popping each position's element from the
    subgroup queue selected by its quantized value.  Bit-exact inverse of
    :func:`encode_conditional` for matching (low, spec)."""
    plan = build_grouping(spec, low)
    if plan != cond.plan:
        raise CorruptionError("grouping plan mismatch: wrong scales or tampered stream")
    perm_scan, key = _subgroup_keys(plan, spec, low)
    slots, replayed = _slots_and_counts(plan, key)
    if not np.array_equal(replayed, cond.counts.ravel()):
        raise CorruptionError(
            "subgroup count mismatch: quantized values do not match this stream"
        )
    pc = cond.plane_count
    planes = _read_section(cond.section, cond.counts.ravel(), pc)
    n = low.nelems
    if planes.shape[1] != n:
        raise CorruptionError("conditional stream element total differs from tensor size")
    out = np.empty((n, pc), np.uint8)
    for p in range(pc):
        out[perm_scan, p] = planes[p, slots]
    return Tensor(cond.tensor_name, cond.high_dtype, low.shape, out.tobytes())
