"""Pipelined archive I/O: one thread owns the file, codec work overlaps it.

Loads run a reader stage (single thread, optionally bandwidth-throttled)
feeding a bounded queue of raw tensor records that the decode stage drains,
so one tensor's decompression overlaps the next tensor's read.  Saves
mirror this with an encode stage feeding a single writer thread.  Serial
mode runs the same per-record code inline; outputs are bit-identical across
modes, queue depths, and thread counts.
"""

from __future__ import annotations

import json
import math
import os
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .archive import (
    BASE_FILE,
    FORMAT_VERSION,
    HEADER_SIZE,
    MANIFEST_NAME,
    QSHI_MAGIC,
    QSLO_MAGIC,
    ArchiveManifest,
    LevelInfo,
    QuantMeta,
    TensorEntry,
    TensorRecord,
    _default_level_names,
    _level_records,
    _nominal_dtype,
    check_header,
    decode_record,
    file_header,
    level_spans,
    read_manifest,
    validate_levels,
)
from .entropy import DEFAULT_CHUNK_SIZE
from .errors import GeometryError
from .quantize import QuantSpec
from .tensors import ModelTensors

__all__ = [
    "PipelineConfig",
    "PipelineReport",
    "SaveReport",
    "pipelined_load",
    "pipelined_save",
    "throttled_reader",
    "ThrottledReader",
    "timed_bundle_load",
]

_READ_SLICE = 256 * 1024


@dataclass(frozen=True)
class PipelineConfig:
    io_threads: int = 1  # the shape of the pipeline: exactly one I/O thread
    codec_threads: int = 0  # 0 = hardware parallelism
    queue_depth: int = 2
    mode: str = "pipelined"  # "pipelined" | "serial"
    throttle_mbps: float | None = None
    # benchmarking/testing hooks: fixed extra latency per tensor record
    io_delay_s: float = 0.0
    codec_delay_s: float = 0.0

    def __post_init__(self):
        if self.io_threads != 1:
            raise ValueError("the pipeline uses exactly one I/O thread")
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")
        if self.mode not in ("pipelined", "serial"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def effective_codec_threads(self) -> int:
        return self.codec_threads or os.cpu_count() or 1


@dataclass
class PipelineReport:
    mode: str
    level: str
    read_seconds: float = 0.0
    decode_seconds: float = 0.0
    wall_seconds: float = 0.0
    bytes_read: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "level": self.level,
            "read_seconds": self.read_seconds,
            "decode_seconds": self.decode_seconds,
            "wall_seconds": self.wall_seconds,
            "bytes_read": self.bytes_read,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class SaveReport:
    mode: str
    encode_seconds: float = 0.0
    write_seconds: float = 0.0
    wall_seconds: float = 0.0
    bytes_written: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "encode_seconds": self.encode_seconds,
            "write_seconds": self.write_seconds,
            "wall_seconds": self.wall_seconds,
            "bytes_written": self.bytes_written,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# -- throttled reads -----------------------------------------------------------


class ThrottledReader:
    """File wrapper that paces reads to a byte rate (MB = 10^6 bytes).

    Pacing is cumulative: after serving N bytes the reader sleeps until
    N / rate seconds have elapsed since the first read, which holds the
    rate within a few percent over one-second windows.
    """

    def __init__(self, raw, mbps: float | None):
        self._raw = raw
        self._rate = None if (mbps is None or math.isinf(mbps)) else mbps * 1e6
        if self._rate is not None and self._rate <= 0:
            raise ValueError("throttle rate must be positive")
        self._t0: float | None = None
        self._served = 0

    def read(self, n: int = -1) -> bytes:
        if self._rate is None:
            return self._raw.read(n)
        out = []
        remaining = n
        while remaining != 0:
            step = _READ_SLICE if remaining < 0 else min(_READ_SLICE, remaining)
            data = self._raw.read(step)
            if not data:
                break
            out.append(data)
            if remaining > 0:
                remaining -= len(data)
            if self._t0 is None:
                self._t0 = time.monotonic()
            self._served += len(data)
            target = self._t0 + self._served / self._rate
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        return b"".join(out)

    def seek(self, offset: int, whence: int = 0):
        return self._raw.seek(offset, whence)

    def tell(self) -> int:
        return self._raw.tell()

    def close(self) -> None:
        self._raw.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def throttled_reader(path, mbps: float | None) -> ThrottledReader:
    """Open ``path`` for reading at a paced ``mbps`` rate.

    ``math.inf`` or ``None`` disables pacing and reads pass straight
    through."""
    return ThrottledReader(open(path, "rb"), mbps)


# -- pipelined load -------------------------------------------------------------


def _acquire_slot(slots, stop) -> bool:
    if slots is None:
        return True
    while not stop.is_set():
        if slots.acquire(timeout=0.05):
            return True
    return False


def _record_stream(root, manifest, target, config, report, stop, slots=None):
    """Yield ('header', i, bytes) and ('record', i, entry, bytes) items in
    chain order, accounting read time and bytes into ``report``.

    ``slots`` bounds resident record buffers: one slot is taken before each
    record is read and released by the consumer once it is decoded, so at
    most queue_depth records' raw bytes live in the pipeline at once (the
    assembled models themselves are the caller's).
    """
    for i in range(target + 1):
        lv = manifest.levels[i]
        spans = level_spans(manifest, i)
        with throttled_reader(root / lv.file, config.throttle_mbps) as f:
            t0 = time.perf_counter()
            header = f.read(HEADER_SIZE)
            report.read_seconds += time.perf_counter() - t0
            report.bytes_read += len(header)
            yield ("header", i, header)
            pos = HEADER_SIZE
            for offset, size, entry in spans:
                if not _acquire_slot(slots, stop) or stop.is_set():
                    return
                t0 = time.perf_counter()
                if offset != pos:
                    f.seek(offset)
                blob = f.read(size)
                pos = offset + size
                if config.io_delay_s:
                    time.sleep(config.io_delay_s)
                report.read_seconds += time.perf_counter() - t0
                report.bytes_read += len(blob)
                yield ("record", i, entry, blob)


class _LoadState:
    """Applies stream items in order; holds the levels decoded so far."""

    def __init__(self, manifest, config, report):
        self.manifest = manifest
        self.config = config
        self.report = report
        self.threads = config.effective_codec_threads
        self.model: ModelTensors | None = None
        self.specs: dict[str, QuantSpec] = {}
        self._tensors: list = []
        self._new_specs: dict[str, QuantSpec] = {}
        self._count = 0

    def apply(self, item):
        if item[0] == "header":
            _, i, header = item
            magic = QSLO_MAGIC if i == 0 else QSHI_MAGIC
            self._count = check_header(header, magic, self.manifest.levels[i].file)
            if self._count != len(level_spans(self.manifest, i)):
                raise GeometryError(
                    f"{self.manifest.levels[i].file}: tensor count disagrees with manifest"
                )
            self._tensors = []
            self._new_specs = {}
            if self._count == 0:
                self._finish_level()
            return
        _, i, entry, blob = item
        t0 = time.perf_counter()
        tensor, spec = decode_record(
            self.manifest, i, entry, blob, self.model, self.specs, self.threads
        )
        if self.config.codec_delay_s:
            time.sleep(self.config.codec_delay_s)
        self.report.decode_seconds += time.perf_counter() - t0
        self._tensors.append(tensor)
        if spec is not None:
            self._new_specs[tensor.name] = spec
        if len(self._tensors) == self._count:
            self._finish_level()

    def _finish_level(self):
        self.model = ModelTensors(self._tensors)
        self.specs = self._new_specs
        self._tensors = []
        self._new_specs = {}


def pipelined_load(
    archive_dir, level_name: str, config: PipelineConfig | None = None
) -> tuple[ModelTensors, PipelineReport]:
    """Load one level with read/decode overlap.

    Output is bit-identical to :func:`qstore.archive.load_model` for every
    config; the timing report rides along.  Decode or integrity errors abort
    the pipeline cleanly; no partial model is ever returned.
    """
    config = config or PipelineConfig()
    root = Path(archive_dir)
    manifest = read_manifest(root)
    target = manifest.level_index(level_name)
    report = PipelineReport(mode=config.mode, level=level_name)
    state = _LoadState(manifest, config, report)
    stop = threading.Event()
    wall0 = time.perf_counter()

    if config.mode == "serial":
        for item in _record_stream(root, manifest, target, config, report, stop):
            state.apply(item)
    else:
        out_q: queue.Queue = queue.Queue()
        slots = threading.BoundedSemaphore(config.queue_depth)

        def reader():
            try:
                for item in _record_stream(root, manifest, target, config, report, stop, slots):
                    out_q.put(item)
                    if stop.is_set():
                        return
                out_q.put(("done",))
            except BaseException as e:
                out_q.put(("error", e))

        thread = threading.Thread(target=reader, name="qstore-reader", daemon=True)
        thread.start()
        try:
            while True:
                item = out_q.get()
                if item[0] == "done":
                    break
                if item[0] == "error":
                    raise item[1]
                state.apply(item)
                if item[0] == "record":
                    slots.release()
        finally:
            stop.set()
            thread.join()

    report.wall_seconds = time.perf_counter() - wall0
    if state.model is None:
        raise GeometryError("archive contains no levels")
    return state.model, report


# -- timed bundle load (benchmark baseline) --------------------------------------


def timed_bundle_load(
    path, throttle_mbps: float | None = None
) -> tuple[ModelTensors, PipelineReport]:
    """Load an uncompressed tensor bundle through the same throttle,
    reporting the same timing schema as :func:`pipelined_load`."""
    from .tensors import DType, Tensor, _load_container

    p = Path(path)
    report = PipelineReport(mode="serial", level="bundle")
    wall0 = time.perf_counter()
    if p.is_file():
        with throttled_reader(p, throttle_mbps) as f:
            t0 = time.perf_counter()
            blob = f.read(-1)
            report.read_seconds += time.perf_counter() - t0
        report.bytes_read += len(blob)
        t0 = time.perf_counter()
        model = _load_container(blob, p)
        report.decode_seconds += time.perf_counter() - t0
    else:
        t0 = time.perf_counter()
        raw_manifest = (p / "manifest.json").read_bytes()
        report.read_seconds += time.perf_counter() - t0
        report.bytes_read += len(raw_manifest)
        tensors = []
        for e in json.loads(raw_manifest):
            with throttled_reader(p / e["file"], throttle_mbps) as f:
                t0 = time.perf_counter()
                data = f.read(-1)
                report.read_seconds += time.perf_counter() - t0
            report.bytes_read += len(data)
            t0 = time.perf_counter()
            tensors.append(Tensor(e["name"], DType.parse(e["dtype"]), tuple(e["shape"]), data))
            report.decode_seconds += time.perf_counter() - t0
        model = ModelTensors(tensors)
    report.wall_seconds = time.perf_counter() - wall0
    return model, report


# -- pipelined save --------------------------------------------------------------


class _WriterAbort(Exception):
    pass


def pipelined_save(
    levels,
    out_dir,
    *,
    config: PipelineConfig | None = None,
    level_names: list[str] | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> tuple[ArchiveManifest, SaveReport]:
    """Stage-parallel archive writer; byte-identical to the serial writer.

    The encode stage produces record blobs that a single writer thread
    appends to staged temp files; the manifest is renamed into place last,
    so an encoder failure leaves no readable archive behind.
    """
    config = config or PipelineConfig()
    levels = list(levels)
    validate_levels(levels)
    names = level_names or _default_level_names(levels)
    if len(names) != len(levels) or len(set(names)) != len(names):
        raise GeometryError("level names must be unique, one per level")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = SaveReport(mode=config.mode)
    wall0 = time.perf_counter()
    threads = config.effective_codec_threads

    state = {"f": None, "offset": 0}
    records: list[tuple] = []
    writer_error: list[BaseException] = []
    stop = threading.Event()

    def handle(item):
        kind = item[0]
        if kind == "open":
            _, tmp_path, header = item
            state["f"] = open(tmp_path, "wb")
            t0 = time.perf_counter()
            state["f"].write(header)
            report.write_seconds += time.perf_counter() - t0
            report.bytes_written += len(header)
            state["offset"] = len(header)
        elif kind == "record":
            _, level_name, name, rec_kind, blob, crc, dtype = item
            t0 = time.perf_counter()
            state["f"].write(blob)
            if config.io_delay_s:
                time.sleep(config.io_delay_s)
            report.write_seconds += time.perf_counter() - t0
            report.bytes_written += len(blob)
            records.append((level_name, name, rec_kind, state["offset"], len(blob), crc, dtype))
            state["offset"] += len(blob)
        elif kind == "close":
            state["f"].close()
            state["f"] = None

    serial = config.mode == "serial"
    if serial:
        emit = handle
        writer = None
        in_q = None
        slots = None
    else:
        in_q = queue.Queue()
        # resident-record bound: a slot is taken before a record is encoded
        # and freed once the writer has it on disk
        slots = threading.BoundedSemaphore(config.queue_depth)

        def writer_loop():
            try:
                while not stop.is_set():
                    try:
                        item = in_q.get(timeout=0.05)
                    except queue.Empty:
                        continue
                    if item[0] == "done":
                        return
                    handle(item)
                    if item[0] == "record":
                        slots.release()
            except BaseException as e:
                writer_error.append(e)
                stop.set()
            finally:
                if state["f"] is not None:
                    state["f"].close()
                    state["f"] = None

        def emit(item):
            if stop.is_set():
                raise _WriterAbort
            in_q.put(item)

        writer = threading.Thread(target=writer_loop, name="qstore-writer", daemon=True)
        writer.start()

    tmp_paths: list[Path] = []
    final_paths: list[Path] = []
    level_infos: list[LevelInfo] = []
    try:
        try:
            for i, (model, specs) in enumerate(levels):
                fname = BASE_FILE if i == 0 else f"{names[i]}.qshi"
                magic = QSLO_MAGIC if i == 0 else QSHI_MAGIC
                lower, lower_specs = (None, None) if i == 0 else levels[i - 1]
                tmp = out / (fname + ".tmp")
                tmp_paths.append(tmp)
                final_paths.append(out / fname)
                emit(("open", tmp, file_header(magic, len(model))))
                gen = _level_records(i, model, lower, lower_specs, specs, chunk_size, threads)
                while True:
                    # take a slot before encoding so at most queue_depth
                    # record blobs exist ahead of the writer
                    if slots is not None and not _acquire_slot(slots, stop):
                        raise _WriterAbort
                    t0 = time.perf_counter()
                    try:
                        rec = next(gen)
                    except StopIteration:
                        report.encode_seconds += time.perf_counter() - t0
                        if slots is not None:
                            slots.release()
                        break
                    if config.codec_delay_s:
                        time.sleep(config.codec_delay_s)
                    report.encode_seconds += time.perf_counter() - t0
                    emit(("record", names[i]) + rec)
                emit(("close",))
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
        except _WriterAbort:
            pass
        if writer is not None:
            in_q.put(("done",))
            writer.join()
        if writer_error:
            raise writer_error[0]

        entries: dict[str, TensorEntry] = {}
        shape_of = {t.name: t.shape for model, _ in levels for t in model}
        for level_name, name, kind, offset, size, crc, dtype in records:
            entry = entries.setdefault(name, TensorEntry(name, shape_of[name]))
            entry.records[level_name] = TensorRecord(offset, size, crc, dtype, kind)
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
    finally:
        if writer is not None and writer.is_alive():
            stop.set()
            writer.join()
        for tmp in tmp_paths:
            tmp.unlink(missing_ok=True)

    report.wall_seconds = time.perf_counter() - wall0
    return manifest, report
