import json

import pytest

from qstore.archive import (
    ArchiveManifest,
    BASE_FILE,
    MANIFEST_NAME,
    load_model,
    read_manifest,
    write_archive,
)
from qstore.errors import CorruptionError, FormatError, GeometryError
from qstore.quantize import quantize_rtn
from qstore.synthetic import synthetic_model, synthetic_tensor
from qstore.tensors import DType, ModelTensors, Tensor


def make_pair_levels(rows=48, cols=64, tensors=2, seed=0, dtype=DType.BF16,
                     bit_width=8, block_axis="per_row", block_size=0, kind="gaussian"):
    high = synthetic_model(rows, cols, tensors, kind=kind, seed=seed, dtype=dtype)
    lows, specs = [], {}
    for t in high:
        pair = quantize_rtn(t, bit_width=bit_width, block_axis=block_axis, block_size=block_size)
        lows.append(pair.low)
        specs[t.name] = pair.spec
    return [(ModelTensors(lows), specs), (high, None)]


def test_pair_archive_files_and_roundtrip(tmp_path):
    levels = make_pair_levels()
    manifest = write_archive(levels, tmp_path / "a")
    assert (tmp_path / "a" / MANIFEST_NAME).is_file()
    assert (tmp_path / "a" / BASE_FILE).is_file()
    assert (tmp_path / "a" / "bf16.qshi").is_file()
    assert [lv.name for lv in manifest.levels] == ["int8", "bf16"]
    low = load_model(tmp_path / "a", "int8")
    assert low == levels[0][0]
    high = load_model(tmp_path / "a", "bf16")
    assert high == levels[1][0]


def test_three_level_chain(tmp_path):
    high = synthetic_model(16, 512, tensors=2, kind="clipped_gaussian", seed=3, dtype=DType.FP16)
    l8, s8, l4, s4 = [], {}, [], {}
    for t in high:
        p8 = quantize_rtn(t, bit_width=8, block_axis="flat_groups", block_size=512)
        p4 = quantize_rtn(t, bit_width=4, block_axis="flat_groups", block_size=512)
        l8.append(p8.low)
        s8[t.name] = p8.spec
        l4.append(p4.low)
        s4[t.name] = p4.spec
    levels = [(ModelTensors(l4), s4), (ModelTensors(l8), s8), (high, None)]
    manifest = write_archive(levels, tmp_path / "c")
    assert (tmp_path / "c" / "model.qslo").is_file()
    assert (tmp_path / "c" / "int8.qshi").is_file()
    assert (tmp_path / "c" / "fp16.qshi").is_file()
    assert [lv.depends_on for lv in manifest.levels] == [None, "int4", "int8"]
    # every level reconstructs bit-exactly, intermediates included
    assert load_model(tmp_path / "c", "int4") == levels[0][0]
    assert load_model(tmp_path / "c", "int8") == levels[1][0]
    assert load_model(tmp_path / "c", "fp16") == levels[2][0]


def test_single_level_archive_is_plain_store(tmp_path):
    model = synthetic_model(8, 16, tensors=2, seed=5, dtype=DType.FP16)
    write_archive([(model, None)], tmp_path / "s")
    assert load_model(tmp_path / "s", "fp16") == model


def test_load_base_touches_only_qslo(tmp_path):
    levels = make_pair_levels(tensors=1)
    write_archive(levels, tmp_path / "a")
    (tmp_path / "a" / "bf16.qshi").write_bytes(b"garbage")  # must stay unread
    assert load_model(tmp_path / "a", "int8") == levels[0][0]


def test_passthrough_tensor_only_in_high_level(tmp_path):
    levels = make_pair_levels(tensors=1)
    norm = synthetic_tensor("zz_norm", 1, 64, kind="uniform", seed=9, dtype=DType.BF16)
    high_model = ModelTensors(list(levels[1][0]) + [norm])
    levels = [levels[0], (high_model, None)]
    manifest = write_archive(levels, tmp_path / "p")
    assert manifest.passthrough_tensors == ["zz_norm"]
    high = load_model(tmp_path / "p", "bf16")
    assert high["zz_norm"].data == norm.data
    low = load_model(tmp_path / "p", "int8")
    assert "zz_norm" not in low


def test_low_only_tensor_stays_at_base(tmp_path):
    levels = make_pair_levels(tensors=1)
    extra = Tensor("aux", DType.INT8, (4, 4), bytes(range(16)))
    base_model = ModelTensors(list(levels[0][0]) + [extra])
    levels = [(base_model, levels[0][1]), levels[1]]
    write_archive(levels, tmp_path / "l")
    assert load_model(tmp_path / "l", "int8")["aux"].data == bytes(range(16))
    assert "aux" not in load_model(tmp_path / "l", "bf16")


def test_determinism_byte_identical_archives(tmp_path):
    levels = make_pair_levels(seed=11)
    write_archive(levels, tmp_path / "x")
    write_archive(levels, tmp_path / "y")
    for f in (MANIFEST_NAME, BASE_FILE, "bf16.qshi"):
        assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


def test_joint_storage_benefit(tmp_path):
    # big flat blocks so subgroups are large enough for coding to engage
    levels = make_pair_levels(
        rows=256, cols=1024, tensors=1, seed=7,
        block_axis="flat_groups", block_size=65536,
    )
    write_archive(levels, tmp_path / "jb")
    raw_low = levels[0][0].total_bytes
    raw_high = levels[1][0].total_bytes
    qslo = (tmp_path / "jb" / BASE_FILE).stat().st_size
    qshi = (tmp_path / "jb" / "bf16.qshi").stat().st_size
    manifest_sz = (tmp_path / "jb" / MANIFEST_NAME).stat().st_size
    assert qshi < raw_high
    assert qslo + qshi + manifest_sz < raw_low + raw_high


def test_shape_mismatch_rejected_before_writing(tmp_path):
    levels = make_pair_levels(tensors=1)
    bad_high = synthetic_model(13, 64, 1, seed=0, dtype=DType.BF16)
    with pytest.raises(GeometryError):
        write_archive([levels[0], (bad_high, None)], tmp_path / "bad")
    assert not (tmp_path / "bad" / MANIFEST_NAME).exists()
    assert not list((tmp_path / "bad").glob("*.tmp")) if (tmp_path / "bad").exists() else True


def test_mixed_geometry_specs_rejected(tmp_path):
    levels = make_pair_levels(tensors=2)
    specs = dict(levels[0][1])
    name = next(iter(specs))
    t = levels[0][0][name]
    alt = quantize_rtn(
        synthetic_model(48, 64, 1, seed=0, dtype=DType.BF16)["t000"],
        bit_width=8, block_axis="flat_groups", block_size=64,
    ).spec
    specs[name] = alt
    with pytest.raises(GeometryError):
        write_archive([(levels[0][0], specs), levels[1]], tmp_path / "bad2")


def test_crc_detects_flipped_payload_bit(tmp_path):
    levels = make_pair_levels(tensors=1)
    write_archive(levels, tmp_path / "a")
    f = tmp_path / "a" / BASE_FILE
    blob = bytearray(f.read_bytes())
    blob[-3] ^= 0x40
    f.write_bytes(bytes(blob))
    with pytest.raises((CorruptionError, FormatError)):
        load_model(tmp_path / "a", "int8")


def test_missing_dependency_file(tmp_path):
    levels = make_pair_levels(tensors=1)
    write_archive(levels, tmp_path / "a")
    (tmp_path / "a" / "bf16.qshi").unlink()
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "a")


def test_version_mismatch(tmp_path):
    levels = make_pair_levels(tensors=1)
    write_archive(levels, tmp_path / "a")
    m = json.loads((tmp_path / "a" / MANIFEST_NAME).read_text())
    m["format_version"] = 99
    (tmp_path / "a" / MANIFEST_NAME).write_text(json.dumps(m))
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "a")


def test_manifest_examples(tmp_path):
    levels = make_pair_levels(tensors=2)
    manifest = write_archive(levels, tmp_path / "m")
    # well-formed pair: 2 levels, one dependency edge
    assert len(manifest.levels) == 2
    assert sum(lv.depends_on is not None for lv in manifest.levels) == 1
    # two base levels: validation error
    m = json.loads(manifest.to_json())
    m["levels"][1]["role"] = "base"
    with pytest.raises(FormatError):
        ArchiveManifest.from_json(json.dumps(m))
    # dangling depends_on
    m = json.loads(manifest.to_json())
    m["levels"][1]["depends_on"] = "nope"
    with pytest.raises(FormatError):
        ArchiveManifest.from_json(json.dumps(m))
    # overlapping spans within one file
    m = json.loads(manifest.to_json())
    m["tensors"][1]["levels"]["int8"]["offset"] = m["tensors"][0]["levels"]["int8"]["offset"]
    with pytest.raises(FormatError):
        ArchiveManifest.from_json(json.dumps(m))


def test_unknown_level_name(tmp_path):
    levels = make_pair_levels(tensors=1)
    write_archive(levels, tmp_path / "a")
    with pytest.raises(FormatError):
        load_model(tmp_path / "a", "fp32")


def test_custom_level_names(tmp_path):
    levels = make_pair_levels(tensors=1)
    manifest = write_archive(levels, tmp_path / "a", level_names=["small", "big"])
    assert [lv.name for lv in manifest.levels] == ["small", "big"]
    assert (tmp_path / "a" / "big.qshi").is_file()
    assert load_model(tmp_path / "a", "big") == levels[1][0]


def test_int4_base_pair(tmp_path):
    levels = make_pair_levels(bit_width=4, block_axis="flat_groups", block_size=64,
                              kind="outlier_rows", tensors=1)
    write_archive(levels, tmp_path / "i4")
    assert load_model(tmp_path / "i4", "int4") == levels[0][0]
    assert load_model(tmp_path / "i4", "bf16") == levels[1][0]


def test_nan_payload_pair(tmp_path):
    levels = make_pair_levels(kind="with_nans", tensors=1, seed=23)
    write_archive(levels, tmp_path / "nn")
    assert load_model(tmp_path / "nn", "bf16") == levels[1][0]
