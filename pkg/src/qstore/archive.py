"""The on-disk archive: a base stream file plus one conditional file per
higher precision level, tied together by a JSON manifest.

Files in an archive directory::

    manifest.json    levels, per-tensor index (offsets, sizes, CRC32s)
    model.qslo       base level: chunk-coded tensors + quantization scales
    <level>.qshi     each conditional level: group directory + subgroup data

All integers are little-endian.  Layouts:

qslo record   name_len u16, name, dtype u8, ndim u8, dims u64[ndim],
              block_axis u8 (0 per_row, 1 flat_groups, 255 none),
              block_size u32, scale_count u32, scales f32[],
              chunk_size u32, chunk_count u32, chunk records.
qshi record   name_len u16, name, high dtype u8, plane_count u8
              (0 marks a passthrough record), value_min i16, value_count u16,
              group_count u32; per group: group_key u32, member_count u32,
              member block indices u32[]; then per (group, ascending value):
              element_count u32 plus per-plane chunk records.  Passthrough
              records carry chunk records for the raw tensor bytes instead.
chunk record  mode u8 (0 RAW, 1 HUFFMAN, 2 RLE), raw_size u32,
              comp_size u32, payload.

Writes are atomic: data files and the manifest are staged as temp files and
renamed, manifest last, so a crashed pack never leaves a readable archive.
Packing the same inputs always produces byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .conditional import (
    ConditionalStream,
    GroupingPlan,
    encode_conditional,
    plane_count_for,
    reconstruct_high,
)
from .entropy import DEFAULT_CHUNK_SIZE, read_chunk
from .errors import CorruptionError, FormatError, GeometryError
from .lowstream import LowStream, decode_low, encode_low, encode_raw_stream
from .quantize import QuantSpec
from .tensors import DType, ModelTensors, Tensor

__all__ = [
    "MANIFEST_NAME",
    "BASE_FILE",
    "QuantMeta",
    "LevelInfo",
    "TensorRecord",
    "TensorEntry",
    "ArchiveManifest",
    "write_archive",
    "read_manifest",
    "load_model",
]

MANIFEST_NAME = "manifest.json"
BASE_FILE = "model.qslo"
QSLO_MAGIC = b"QSLO"
QSHI_MAGIC = b"QSHI"
FORMAT_VERSION = 1

_AXIS_CODE = {"per_row": 0, "flat_groups": 1, None: 255}
_AXIS_FROM_CODE = {0: "per_row", 1: "flat_groups", 255: None}


# -- manifest model -----------------------------------------------------------


@dataclass(frozen=True)
class QuantMeta:
    """Block geometry of one level's quantization; scales live in the files."""

    method: str
    bit_width: int
    block_axis: str
    block_size: int
    rounding: str
    clamp: tuple[int, int]

    @classmethod
    def from_spec(cls, spec: QuantSpec) -> "QuantMeta":
        return cls(
            spec.method, spec.bit_width, spec.block_axis, spec.block_size,
            spec.rounding, spec.clamp,
        )

    def to_spec(self, scales: np.ndarray) -> QuantSpec:
        return QuantSpec(
            method=self.method,
            bit_width=self.bit_width,
            block_axis=self.block_axis,
            block_size=self.block_size,
            scales=scales,
            rounding=self.rounding,
            clamp=self.clamp,
        )

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "bit_width": self.bit_width,
            "block_axis": self.block_axis,
            "block_size": self.block_size,
            "rounding": self.rounding,
            "clamp": list(self.clamp),
        }

    @classmethod
    def from_json(cls, d: dict) -> "QuantMeta":
        return cls(
            d["method"], int(d["bit_width"]), d["block_axis"], int(d["block_size"]),
            d["rounding"], (int(d["clamp"][0]), int(d["clamp"][1])),
        )


@dataclass(frozen=True)
class LevelInfo:
    name: str
    dtype: DType
    role: str  # "base" | "conditional"
    file: str
    depends_on: str | None
    chunk_size: int
    quant: QuantMeta | None


@dataclass(frozen=True)
class TensorRecord:
    offset: int
    size: int
    crc32: int
    dtype: DType
    kind: str  # "base" | "conditional" | "passthrough"


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    records: dict[str, TensorRecord] = field(default_factory=dict)


@dataclass(frozen=True)
class ArchiveManifest:
    format_version: int
    levels: tuple[LevelInfo, ...]
    tensors: tuple[TensorEntry, ...]

    @property
    def passthrough_tensors(self) -> list[str]:
        return sorted(
            e.name
            for e in self.tensors
            if any(r.kind == "passthrough" for r in e.records.values())
        )

    def level_index(self, name: str) -> int:
        for i, lv in enumerate(self.levels):
            if lv.name == name:
                return i
        raise FormatError(f"archive has no level {name!r}")

    def tensor(self, name: str) -> TensorEntry:
        for e in self.tensors:
            if e.name == name:
                return e
        raise FormatError(f"archive has no tensor {name!r}")

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise FormatError(f"unsupported format_version {self.format_version}")
        if not self.levels:
            raise FormatError("manifest lists no levels")
        names = [lv.name for lv in self.levels]
        if len(set(names)) != len(names):
            raise FormatError("duplicate level names")
        bases = [lv for lv in self.levels if lv.role == "base"]
        if len(bases) != 1 or self.levels[0].role != "base":
            raise FormatError("exactly one base level is required, first in the chain")
        for i, lv in enumerate(self.levels):
            if i == 0:
                if lv.depends_on is not None:
                    raise FormatError("base level cannot depend on another level")
            else:
                if lv.role != "conditional":
                    raise FormatError(f"level {lv.name!r}: non-base levels are conditional")
                if lv.depends_on != self.levels[i - 1].name:
                    raise FormatError(
                        f"level {lv.name!r} must depend on {self.levels[i - 1].name!r}"
                    )
        files = {lv.name: lv.file for lv in self.levels}
        per_file: dict[str, list[tuple[int, int]]] = {}
        for e in self.tensors:
            for lname, rec in e.records.items():
                if lname not in files:
                    raise FormatError(f"tensor {e.name!r} references unknown level {lname!r}")
                per_file.setdefault(files[lname], []).append((rec.offset, rec.size))
        for fname, spans in per_file.items():
            spans.sort()
            prev_end = 0
            for off, size in spans:
                if off < prev_end:
                    raise FormatError(f"{fname}: overlapping tensor records")
                prev_end = off + size

    def to_json(self) -> str:
        d = {
            "format_version": self.format_version,
            "levels": [
                {
                    "level_name": lv.name,
                    "dtype": lv.dtype.value,
                    "role": lv.role,
                    "file": lv.file,
                    "depends_on": lv.depends_on,
                    "chunk_size": lv.chunk_size,
                    "quant": lv.quant.to_json() if lv.quant else None,
                }
                for lv in self.levels
            ],
            "tensors": [
                {
                    "name": e.name,
                    "shape": list(e.shape),
                    "levels": {
                        lname: {
                            "offset": r.offset,
                            "size": r.size,
                            "crc32": r.crc32,
                            "dtype": r.dtype.value,
                            "kind": r.kind,
                        }
                        for lname, r in sorted(e.records.items())
                    },
                }
                for e in self.tensors
            ],
            "passthrough_tensors": self.passthrough_tensors,
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ArchiveManifest":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"malformed manifest: {e}") from None
        try:
            levels = tuple(
                LevelInfo(
                    name=lv["level_name"],
                    dtype=DType.parse(lv["dtype"]),
                    role=lv["role"],
                    file=lv["file"],
                    depends_on=lv["depends_on"],
                    chunk_size=int(lv["chunk_size"]),
                    quant=QuantMeta.from_json(lv["quant"]) if lv.get("quant") else None,
                )
                for lv in d["levels"]
            )
            tensors = tuple(
                TensorEntry(
                    name=t["name"],
                    shape=tuple(int(x) for x in t["shape"]),
                    records={
                        lname: TensorRecord(
                            offset=int(r["offset"]),
                            size=int(r["size"]),
                            crc32=int(r["crc32"]),
                            dtype=DType.parse(r["dtype"]),
                            kind=r["kind"],
                        )
                        for lname, r in t["levels"].items()
                    },
                )
                for t in d["tensors"]
            )
            m = cls(int(d["format_version"]), levels, tensors)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"manifest schema violation: {e}") from None
        m.validate()
        return m


# -- record serialization ------------------------------------------------------


def qslo_record_bytes(stream: LowStream) -> bytes:
    name = stream.tensor_name.encode()
    spec = stream.spec
    parts = [
        struct.pack("<H", len(name)),
        name,
        struct.pack("<BB", stream.dtype.code, len(stream.shape)),
        np.asarray(stream.shape, "<u8").tobytes(),
    ]
    if spec is None:
        parts.append(struct.pack("<BII", _AXIS_CODE[None], 0, 0))
    else:
        if spec.scales.size > 0xFFFFFFFF:
            raise GeometryError("more than 2^32 blocks in one tensor")
        parts.append(
            struct.pack(
                "<BII", _AXIS_CODE[spec.block_axis], spec.block_size, spec.scales.size
            )
        )
        parts.append(spec.scales.astype("<f4").tobytes())
    parts.append(struct.pack("<II", stream.chunk_size, len(stream.chunks)))
    for c in stream.chunks:
        parts.append(struct.pack("<BII", int(c.mode), c.raw_size, c.comp_size))
        parts.append(c.payload)
    return b"".join(parts)


def _read_name(buf: bytes, off: int) -> tuple[str, int]:
    if off + 2 > len(buf):
        raise CorruptionError("truncated record header")
    (nlen,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = buf[off : off + nlen].decode()
    return name, off + nlen


def parse_qslo_record(buf: bytes, off: int, *, decode: bool, threads: int = 1):
    """Returns (name, tensor|None, spec_parts|None, meta, next_off).

    meta: dict with dtype, shape, chunk stats for inspection.  ``spec_parts``
    is (axis, block_size, scales) or None for unquantized records.
    """
    try:
        return _parse_qslo_record(buf, off, decode=decode, threads=threads)
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as e:
        raise CorruptionError(f"malformed record: {e}") from None


def _parse_qslo_record(buf: bytes, off: int, *, decode: bool, threads: int = 1):
    name, off = _read_name(buf, off)
    dtype_code, ndim = struct.unpack_from("<BB", buf, off)
    off += 2
    dtype = DType.from_code(dtype_code)
    shape = tuple(int(x) for x in np.frombuffer(buf, "<u8", count=ndim, offset=off))
    off += 8 * ndim
    axis_code, block_size, scale_count = struct.unpack_from("<BII", buf, off)
    off += 9
    if axis_code not in _AXIS_FROM_CODE:
        raise FormatError(f"unknown block axis code {axis_code}")
    axis = _AXIS_FROM_CODE[axis_code]
    scales = np.frombuffer(buf, "<f4", count=scale_count, offset=off).copy()
    off += 4 * scale_count
    chunk_size, chunk_count = struct.unpack_from("<II", buf, off)
    off += 8
    chunks = []
    payload_bytes = 0
    raw_total = 0
    for _ in range(chunk_count):
        chunk, off = read_chunk(buf, off)
        payload_bytes += chunk.comp_size
        raw_total += chunk.raw_size
        chunks.append(chunk)
    meta = {
        "dtype": dtype,
        "shape": shape,
        "chunk_count": chunk_count,
        "payload_bytes": payload_bytes,
        "raw_bytes": raw_total,
    }
    spec_parts = None if axis is None else (axis, block_size, scales)
    tensor = None
    if decode:
        stream = LowStream(name, dtype, shape, chunk_size, tuple(chunks), None)
        tensor, _ = decode_low(stream, threads=threads)
    return name, tensor, spec_parts, meta, off


def qshi_conditional_bytes(cond: ConditionalStream) -> bytes:
    name = cond.tensor_name.encode()
    plan = cond.plan
    parts = [
        struct.pack("<H", len(name)),
        name,
        struct.pack(
            "<BBhHI",
            cond.high_dtype.code,
            cond.plane_count,
            plan.value_min,
            plan.value_count,
            plan.n_groups,
        ),
    ]
    if plan.block_group.size > 0xFFFFFFFF:
        raise GeometryError("more than 2^32 blocks in one tensor")
    order = np.argsort(plan.block_group, kind="stable")
    counts = np.bincount(plan.block_group, minlength=plan.n_groups)
    members = np.split(order, np.cumsum(counts)[:-1])
    for key, m in zip(plan.group_keys, members):
        parts.append(struct.pack("<II", int(key), m.size))
        parts.append(m.astype("<u4").tobytes())
    parts.append(cond.section)
    return b"".join(parts)


def qshi_passthrough_bytes(stream: LowStream) -> bytes:
    name = stream.tensor_name.encode()
    parts = [
        struct.pack("<H", len(name)),
        name,
        struct.pack("<BBhHI", stream.dtype.code, 0, 0, 0, 0),
    ]
    for c in stream.chunks:
        parts.append(struct.pack("<BII", int(c.mode), c.raw_size, c.comp_size))
        parts.append(c.payload)
    return b"".join(parts)


def parse_qshi_record(buf: bytes, off: int, *, expected_bytes: int | None = None):
    """Parse one record. Returns (name, payload, meta, next_off).

    For conditional records payload is (dtype, plane_count, value_min,
    value_count, group_keys, block_group, counts, section_bytes); for
    passthrough records it is the chunk list.  ``expected_bytes`` bounds the
    chunk walk of passthrough records (from the manifest's shape).
    """
    try:
        return _parse_qshi_record(buf, off, expected_bytes=expected_bytes)
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as e:
        raise CorruptionError(f"malformed record: {e}") from None


def _parse_qshi_record(buf: bytes, off: int, *, expected_bytes: int | None = None):
    name, off = _read_name(buf, off)
    dtype_code, pc, vmin, vcount, ngroups = struct.unpack_from("<BBhHI", buf, off)
    off += 10
    dtype = DType.from_code(dtype_code)
    if pc == 0:
        chunks = []
        raw_total = 0
        payload_bytes = 0
        if expected_bytes is None:
            raise FormatError("passthrough record needs the manifest's byte count")
        while raw_total < expected_bytes:
            chunk, off = read_chunk(buf, off)
            raw_total += chunk.raw_size
            payload_bytes += chunk.comp_size
            chunks.append(chunk)
        if raw_total != expected_bytes:
            raise CorruptionError(f"passthrough record for {name!r} overruns its size")
        meta = {"dtype": dtype, "kind": "passthrough", "payload_bytes": payload_bytes}
        return name, tuple(chunks), meta, off
    group_keys = np.empty(ngroups, np.uint32)
    members = []
    nblocks = 0
    for g in range(ngroups):
        key, mcount = struct.unpack_from("<II", buf, off)
        off += 8
        m = np.frombuffer(buf, "<u4", count=mcount, offset=off).astype(np.int64)
        off += 4 * mcount
        group_keys[g] = key
        members.append(m)
        nblocks += mcount
    block_group = np.full(nblocks, -1, np.int64)
    for g, m in enumerate(members):
        if m.size and m.max() >= nblocks:
            raise FormatError(f"group directory of {name!r} indexes past the block count")
        block_group[m] = g
    if nblocks and block_group.min() < 0:
        raise FormatError(f"group directory of {name!r} does not cover every block")
    nsg = ngroups * vcount
    counts = np.empty(nsg, np.int64)
    arr = np.frombuffer(buf, np.uint8)
    end, total, _nh, payload_bytes, status = _kernels.scan_subgroups(arr, off, nsg, pc, counts)
    if status != _kernels.OK:
        raise CorruptionError(f"malformed subgroup section in record {name!r}")
    section = buf[off:end]
    meta = {
        "dtype": dtype,
        "kind": "conditional",
        "payload_bytes": payload_bytes,
        "elements": total,
        "groups": ngroups,
    }
    payload = (dtype, pc, vmin, vcount, group_keys, block_group, counts, section)
    return name, payload, meta, end


def conditional_from_record(payload, name: str, chunk_size: int) -> tuple[ConditionalStream, GroupingPlan]:
    dtype, pc, vmin, vcount, group_keys, block_group, counts, section = payload
    plan = GroupingPlan(group_keys, block_group, vmin, vmin + vcount - 1)
    cond = ConditionalStream(
        tensor_name=name,
        high_dtype=dtype,
        plane_count=pc,
        plan=plan,
        counts=counts.reshape(max(plan.n_groups, 0), vcount) if vcount else counts.reshape(0, 0),
        chunk_size=chunk_size,
        section=section,
    )
    return cond, plan


def spec_from_record(plan: GroupingPlan, quant: QuantMeta) -> QuantSpec:
    """Rebuild the lower level's spec from a stored group directory."""
    scales = plan.group_keys.astype(np.uint32)[plan.block_group].view(np.float32).copy()
    return quant.to_spec(scales)


# -- header I/O -----------------------------------------------------------------


def file_header(magic: bytes, tensor_count: int) -> bytes:
    return magic + struct.pack("<HI", FORMAT_VERSION, tensor_count)


HEADER_SIZE = 10


def check_header(buf: bytes, magic: bytes, path) -> int:
    if len(buf) < HEADER_SIZE or buf[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic.decode()}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return count


# -- encoding one level ---------------------------------------------------------


def _level_records(
    level_idx: int,
    model: ModelTensors,
    lower: ModelTensors | None,
    lower_specs: dict[str, QuantSpec] | None,
    own_specs: dict[str, QuantSpec] | None,
    chunk_size: int,
    threads: int,
):
    """Yield (name, kind, record_bytes, crc32, dtype) for one level, in order."""
    for t in model:
        crc = zlib.crc32(t.data)
        if level_idx == 0:
            spec = (own_specs or {}).get(t.name)
            if spec is not None:
                stream = encode_low(t, spec, chunk_size, threads)
            else:
                stream = encode_raw_stream(t, chunk_size, threads)
            yield t.name, "base", qslo_record_bytes(stream), crc, t.dtype
        elif lower is not None and t.name in lower and (lower_specs or {}).get(t.name):
            cond = encode_conditional(
                t, lower[t.name], lower_specs[t.name], chunk_size=chunk_size
            )
            yield t.name, "conditional", qshi_conditional_bytes(cond), crc, t.dtype
        else:
            stream = encode_raw_stream(t, chunk_size, threads)
            yield t.name, "passthrough", qshi_passthrough_bytes(stream), crc, t.dtype


def _nominal_dtype(model: ModelTensors, specs: dict[str, QuantSpec] | None) -> DType:
    if specs:
        return next(iter(specs.values())).low_dtype()
    counts: dict[DType, int] = {}
    for t in model:
        counts[t.dtype] = counts.get(t.dtype, 0) + 1
    if not counts:
        return DType.FP16
    return max(counts, key=lambda d: (counts[d], d.value))


def _default_level_names(levels) -> list[str]:
    names = []
    for model, specs in levels:
        base = _nominal_dtype(model, specs).value.lower().replace("_packed", "")
        name = base
        k = 2
        while name in names:
            name = f"{base}-{k}"
            k += 1
        names.append(name)
    return names


def validate_levels(levels) -> None:
    if not levels:
        raise GeometryError("an archive needs at least one level")
    for i, (model, specs) in enumerate(levels):
        if specs:
            geo = {
                (s.method, s.bit_width, s.block_axis, s.block_size, s.rounding, s.clamp)
                for s in specs.values()
            }
            if len(geo) != 1:
                raise GeometryError(f"level {i}: specs must share one block geometry")
            for name, spec in specs.items():
                if name not in model:
                    raise GeometryError(f"level {i}: spec for unknown tensor {name!r}")
                low = model[name]
                if spec.low_dtype() is not low.dtype:
                    raise GeometryError(
                        f"level {i}: tensor {name!r} dtype {low.dtype.value} does not "
                        f"match {spec.bit_width}-bit spec"
                    )
                spec.validate_geometry(low.shape)
        if i == 0:
            continue
        lower_model, lower_specs = levels[i - 1]
        for t in model:
            if t.name in lower_model:
                lo = lower_model[t.name]
                if lo.shape != t.shape:
                    raise GeometryError(
                        f"tensor {t.name!r}: shape {t.shape} at level {i} vs "
                        f"{lo.shape} below"
                    )
                if (lower_specs or {}).get(t.name):
                    plane_count_for(t.dtype)  # raises for INT4_PACKED uppers


def write_archive(
    levels,
    out_dir,
    *,
    level_names: list[str] | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    threads: int = 1,
) -> ArchiveManifest:
    """Pack low-to-high precision levels into ``out_dir``.

    ``levels`` is an ordered list of (ModelTensors, specs) pairs where
    ``specs`` maps tensor names to the QuantSpec that produced that level
    (None for the unquantized top).  Files land atomically; on error no
    manifest is left behind.
    """
    levels = list(levels)
    validate_levels(levels)
    names = level_names or _default_level_names(levels)
    if len(names) != len(levels) or len(set(names)) != len(names):
        raise GeometryError("level names must be unique, one per level")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp_paths: list[Path] = []
    final_paths: list[Path] = []
    level_infos: list[LevelInfo] = []
    entries: dict[str, TensorEntry] = {}
    try:
        for i, (model, specs) in enumerate(levels):
            fname = BASE_FILE if i == 0 else f"{names[i]}.qshi"
            magic = QSLO_MAGIC if i == 0 else QSHI_MAGIC
            lower, lower_specs = (None, None) if i == 0 else levels[i - 1]
            tmp = out / (fname + ".tmp")
            tmp_paths.append(tmp)
            final_paths.append(out / fname)
            with open(tmp, "wb") as f:
                f.write(file_header(magic, len(model)))
                offset = HEADER_SIZE
                for name, kind, blob, crc, dtype in _level_records(
                    i, model, lower, lower_specs, specs, chunk_size, threads
                ):
                    f.write(blob)
                    entry = entries.setdefault(name, TensorEntry(name, model[name].shape))
                    if entry.shape != model[name].shape:
                        raise GeometryError(f"tensor {name!r} changes shape across levels")
                    entry.records[names[i]] = TensorRecord(offset, len(blob), crc, dtype, kind)
                    offset += len(blob)
            level_infos.append(
                LevelInfo(
                    name=names[i],
                    dtype=_nominal_dtype(model, specs),
                    role="base" if i == 0 else "conditional",
                    file=fname,
                    depends_on=None if i == 0 else names[i - 1],
                    chunk_size=chunk_size,
                    quant=QuantMeta.from_spec(next(iter(specs.values()))) if specs else None,
                )
            )
        manifest = ArchiveManifest(
            FORMAT_VERSION,
            tuple(level_infos),
            tuple(sorted(entries.values(), key=lambda e: e.name)),
        )
        manifest.validate()
        for tmp, final in zip(tmp_paths, final_paths):
            os.replace(tmp, final)
        tmp_paths.clear()
        mtmp = out / (MANIFEST_NAME + ".tmp")
        mtmp.write_text(manifest.to_json())
        os.replace(mtmp, out / MANIFEST_NAME)
        return manifest
    finally:
        for tmp in tmp_paths:
            tmp.unlink(missing_ok=True)


# -- reading --------------------------------------------------------------------


def read_manifest(archive_dir) -> ArchiveManifest:
    """Parse and validate manifest.json; referenced files must exist."""
    root = Path(archive_dir)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise FileNotFoundError(mpath)
    manifest = ArchiveManifest.from_json(mpath.read_text())
    for lv in manifest.levels:
        if not (root / lv.file).is_file():
            raise FileNotFoundError(root / lv.file)
    return manifest


def _verify_crc(t: Tensor, rec: TensorRecord, level: str) -> None:
    crc = zlib.crc32(t.data)
    if crc != rec.crc32:
        raise CorruptionError(
            f"CRC mismatch for tensor {t.name!r} at level {level!r}: "
            f"{crc:#010x} != {rec.crc32:#010x}"
        )


def level_spans(manifest: ArchiveManifest, level_idx: int) -> list[tuple[int, int, TensorEntry]]:
    """(offset, size, entry) for every record of one level, in file order."""
    lv = manifest.levels[level_idx]
    spans = [
        (e.records[lv.name].offset, e.records[lv.name].size, e)
        for e in manifest.tensors
        if lv.name in e.records
    ]
    spans.sort(key=lambda s: s[0])
    return spans


def decode_record(
    manifest: ArchiveManifest,
    level_idx: int,
    entry: TensorEntry,
    blob: bytes,
    lower: ModelTensors | None = None,
    lower_specs: dict[str, QuantSpec] | None = None,
    threads: int = 1,
) -> tuple[Tensor, QuantSpec | None]:
    """Decode one tensor record; returns (tensor, base spec when present).

    The same routine backs the serial and pipelined loaders, so their
    outputs are identical by construction.
    """
    lv = manifest.levels[level_idx]
    rec = entry.records[lv.name]
    if level_idx == 0:
        name, tensor, spec_parts, _meta, off = parse_qslo_record(
            blob, 0, decode=True, threads=threads
        )
        if name != entry.name:
            raise CorruptionError(f"record holds {name!r} where manifest says {entry.name!r}")
        if off != len(blob):
            raise CorruptionError(f"record for {name!r} has trailing bytes")
        spec = None
        if spec_parts is not None:
            if lv.quant is None:
                raise FormatError(f"{lv.file}: scales present but manifest has no quant block")
            axis, bsize, scales = spec_parts
            spec = QuantSpec(
                method=lv.quant.method,
                bit_width=lv.quant.bit_width,
                block_axis=axis,
                block_size=bsize,
                scales=scales,
                rounding=lv.quant.rounding,
                clamp=lv.quant.clamp,
            )
        _verify_crc(tensor, rec, lv.name)
        return tensor, spec

    lower_lv = manifest.levels[level_idx - 1]
    expected = rec.dtype.byte_length(int(np.prod(entry.shape, dtype=np.int64)))
    name, payload, meta, off = parse_qshi_record(blob, 0, expected_bytes=expected)
    if name != entry.name:
        raise CorruptionError(f"record holds {name!r} where manifest says {entry.name!r}")
    if off != len(blob):
        raise CorruptionError(f"record for {name!r} has trailing bytes")
    if meta["kind"] == "passthrough":
        stream = LowStream(name, meta["dtype"], entry.shape, lv.chunk_size, payload, None)
        tensor, _ = decode_low(stream, threads=threads)
    else:
        cond, plan = conditional_from_record(payload, name, lv.chunk_size)
        if lower_lv.quant is None:
            raise FormatError(
                f"level {lower_lv.name!r} has no quant geometry; cannot decode {name!r}"
            )
        spec = spec_from_record(plan, lower_lv.quant)
        known = (lower_specs or {}).get(name)
        if known is not None and known != spec:
            raise CorruptionError(
                f"stored group directory for {name!r} disagrees with the base scales"
            )
        if lower is None or name not in lower:
            raise FormatError(f"conditional tensor {name!r} missing from level below")
        tensor = reconstruct_high(lower[name], spec, cond)
    _verify_crc(tensor, rec, lv.name)
    return tensor, None


def load_model(archive_dir, level_name: str, threads: int = 1) -> ModelTensors:
    """Decode the base, then walk the chain upward to the requested level."""
    root = Path(archive_dir)
    manifest = read_manifest(root)
    target = manifest.level_index(level_name)
    model: ModelTensors | None = None
    specs: dict[str, QuantSpec] = {}
    for i in range(target + 1):
        lv = manifest.levels[i]
        buf = (root / lv.file).read_bytes()
        spans = level_spans(manifest, i)
        count = check_header(buf, QSLO_MAGIC if i == 0 else QSHI_MAGIC, lv.file)
        if count != len(spans):
            raise FormatError(f"{lv.file}: header lists {count} tensors, manifest {len(spans)}")
        tensors = []
        new_specs: dict[str, QuantSpec] = {}
        for offset, size, entry in spans:
            tensor, spec = decode_record(
                manifest, i, entry, buf[offset : offset + size], model, specs, threads
            )
            tensors.append(tensor)
            if spec is not None:
                new_specs[tensor.name] = spec
        model = ModelTensors(tensors)
        specs = new_specs
    assert model is not None
    return model
