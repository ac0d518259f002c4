import math
import time

import pytest

from qstore.archive import BASE_FILE, MANIFEST_NAME, load_model, write_archive
from qstore.errors import GeometryError
from qstore.pipeline import (
    PipelineConfig,
    pipelined_load,
    pipelined_save,
    throttled_reader,
    timed_bundle_load,
)
from qstore.quantize import quantize_rtn
from qstore.synthetic import synthetic_model
from qstore.tensors import DType, ModelTensors, store_tensor_bundle

from test_archive import make_pair_levels


def test_pipelined_load_matches_serial(tmp_path):
    levels = make_pair_levels(tensors=3, seed=2)
    write_archive(levels, tmp_path / "a")
    for level in ("int8", "bf16"):
        serial, _ = pipelined_load(tmp_path / "a", level, PipelineConfig(mode="serial"))
        piped, rep = pipelined_load(tmp_path / "a", level, PipelineConfig(mode="pipelined"))
        direct = load_model(tmp_path / "a", level)
        assert serial == piped == direct
        assert rep.bytes_read > 0 and rep.wall_seconds > 0


def test_queue_depth_one_still_correct(tmp_path):
    levels = make_pair_levels(tensors=4, seed=3)
    write_archive(levels, tmp_path / "a")
    cfg = PipelineConfig(queue_depth=1)
    out, _ = pipelined_load(tmp_path / "a", "bf16", cfg)
    assert out == levels[1][0]


def test_thread_count_does_not_change_results(tmp_path):
    levels = make_pair_levels(tensors=2, seed=4)
    write_archive(levels, tmp_path / "a")
    outs = [
        pipelined_load(tmp_path / "a", "bf16", PipelineConfig(codec_threads=t))[0]
        for t in (1, 4)
    ]
    assert outs[0] == outs[1]


def test_pipelined_save_byte_identical_to_serial(tmp_path):
    levels = make_pair_levels(tensors=3, seed=5)
    write_archive(levels, tmp_path / "serial")
    m, rep = pipelined_save(levels, tmp_path / "piped", config=PipelineConfig())
    for f in (MANIFEST_NAME, BASE_FILE, "bf16.qshi"):
        assert (tmp_path / "serial" / f).read_bytes() == (tmp_path / "piped" / f).read_bytes()
    m2, _ = pipelined_save(levels, tmp_path / "piped2", config=PipelineConfig(mode="serial"))
    for f in (MANIFEST_NAME, BASE_FILE, "bf16.qshi"):
        assert (tmp_path / "serial" / f).read_bytes() == (tmp_path / "piped2" / f).read_bytes()
    assert rep.bytes_written > 0


def test_pipeline_overlap_with_injected_delays(tmp_path):
    # 64 tiny tensors with 5 ms per stage per tensor: serial pays both
    # stages in sequence, the pipeline overlaps them.
    model = synthetic_model(4, 8, tensors=64, seed=6, dtype=DType.FP16)
    lows, specs = [], {}
    for t in model:
        p = quantize_rtn(t)
        lows.append(p.low)
        specs[t.name] = p.spec
    levels = [(ModelTensors(lows), specs), (model, None)]
    write_archive(levels, tmp_path / "a")
    delay = dict(io_delay_s=0.005, codec_delay_s=0.005)
    _, serial = pipelined_load(tmp_path / "a", "fp16", PipelineConfig(mode="serial", **delay))
    _, piped = pipelined_load(tmp_path / "a", "fp16", PipelineConfig(mode="pipelined", **delay))
    assert piped.wall_seconds < 0.75 * serial.wall_seconds


def test_save_overlap_with_injected_delays(tmp_path):
    model = synthetic_model(4, 8, tensors=48, seed=7, dtype=DType.FP16)
    levels = [(model, None)]
    delay = dict(io_delay_s=0.005, codec_delay_s=0.005)
    t0 = time.perf_counter()
    pipelined_save(levels, tmp_path / "s1", config=PipelineConfig(mode="serial", **delay))
    serial_wall = time.perf_counter() - t0
    t0 = time.perf_counter()
    pipelined_save(levels, tmp_path / "s2", config=PipelineConfig(mode="pipelined", **delay))
    piped_wall = time.perf_counter() - t0
    assert (tmp_path / "s1" / BASE_FILE).read_bytes() == (tmp_path / "s2" / BASE_FILE).read_bytes()
    assert piped_wall < 0.75 * serial_wall


def test_failed_save_leaves_no_manifest(tmp_path):
    levels = make_pair_levels(tensors=1)
    bad_high = synthetic_model(13, 64, 1, seed=0, dtype=DType.BF16)
    with pytest.raises(GeometryError):
        pipelined_save([levels[0], (bad_high, None)], tmp_path / "bad")
    assert not (tmp_path / "bad" / MANIFEST_NAME).exists()
    leftovers = list((tmp_path / "bad").glob("*.tmp")) if (tmp_path / "bad").exists() else []
    assert leftovers == []


def test_corrupt_archive_aborts_cleanly(tmp_path):
    levels = make_pair_levels(tensors=2, seed=8)
    write_archive(levels, tmp_path / "a")
    f = tmp_path / "a" / BASE_FILE
    blob = bytearray(f.read_bytes())
    blob[-1] ^= 0xFF
    f.write_bytes(bytes(blob))
    with pytest.raises(Exception):
        pipelined_load(tmp_path / "a", "int8")


def test_throttled_reader_rate(tmp_path):
    f = tmp_path / "blob.bin"
    f.write_bytes(bytes(20_000_000))
    t0 = time.perf_counter()
    with throttled_reader(f, 20.0) as r:
        data = r.read(-1)
    elapsed = time.perf_counter() - t0
    assert len(data) == 20_000_000
    assert 0.9 <= elapsed <= 1.35  # 1.0 s nominal at 20 MB/s


def test_throttled_reader_infinite_passthrough(tmp_path):
    f = tmp_path / "blob.bin"
    f.write_bytes(bytes(1_000_000))
    t0 = time.perf_counter()
    with throttled_reader(f, math.inf) as r:
        data = r.read(-1)
    assert len(data) == 1_000_000
    assert time.perf_counter() - t0 < 0.5


def test_throttle_error_on_bad_rate(tmp_path):
    f = tmp_path / "b"
    f.write_bytes(b"x")
    with pytest.raises(ValueError):
        throttled_reader(f, 0.0)


def test_timed_bundle_load_roundtrip(tmp_path):
    model = synthetic_model(16, 32, tensors=2, seed=9, dtype=DType.FP16)
    store_tensor_bundle(model, tmp_path / "b.qt", format="single_file")
    out, rep = timed_bundle_load(tmp_path / "b.qt")
    assert out == model
    assert rep.bytes_read == (tmp_path / "b.qt").stat().st_size
    store_tensor_bundle(model, tmp_path / "bd", format="directory")
    out2, _ = timed_bundle_load(tmp_path / "bd")
    assert out2 == model


def test_throttled_archive_load_matches(tmp_path):
    levels = make_pair_levels(tensors=1, seed=10)
    write_archive(levels, tmp_path / "a")
    out, rep = pipelined_load(
        tmp_path / "a", "bf16", PipelineConfig(throttle_mbps=200.0)
    )
    assert out == levels[1][0]
    assert rep.read_seconds > 0
