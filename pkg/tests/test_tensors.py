import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qstore.errors import FormatError, GeometryError
from qstore.tensors import (
    DType,
    ModelTensors,
    Tensor,
    load_tensor_bundle,
    pack_int4,
    store_tensor_bundle,
    unpack_int4,
)


def test_dtype_widths():
    assert DType.FP16.bits == 16
    assert DType.BF16.bits == 16
    assert DType.INT8.bits == 8
    assert DType.INT4_PACKED.bits == 4
    assert DType.INT4_PACKED.byte_length(5) == 3
    assert DType.FP16.byte_length(3) == 6


def test_fp16_bit_pattern_survives_roundtrip(tmp_path):
    # 27.25 in FP16 is the bit pattern 0100111011010000 -> bytes D0 4E.
    assert np.float16(27.25).tobytes() == b"\xd0\x4e"
    t = Tensor("w", DType.FP16, (1, 1), b"\xd0\x4e")
    store_tensor_bundle(ModelTensors([t]), tmp_path / "b")
    back = load_tensor_bundle(tmp_path / "b")
    assert back["w"].data == b"\xd0\x4e"


def test_identity_load_small_bundle(tmp_path):
    data = np.arange(4, dtype="<f2").tobytes()
    t = Tensor("w", DType.FP16, (2, 2), data)
    store_tensor_bundle(ModelTensors([t]), tmp_path / "b")
    m = load_tensor_bundle(tmp_path / "b")
    assert len(m) == 1
    assert m["w"].data == data
    assert m["w"].shape == (2, 2)


def test_byte_length_mismatch_raises():
    with pytest.raises(FormatError):
        Tensor("w", DType.FP16, (3, 3), bytes(10))


def test_manifest_byte_length_mismatch_raises(tmp_path):
    root = tmp_path / "b"
    root.mkdir()
    (root / "w.bin").write_bytes(bytes(10))
    (root / "manifest.json").write_text(
        json.dumps([{"name": "w", "dtype": "FP16", "shape": [3, 3], "file": "w.bin"}])
    )
    with pytest.raises(FormatError):
        load_tensor_bundle(root)


def test_unknown_dtype_raises(tmp_path):
    root = tmp_path / "b"
    root.mkdir()
    (root / "w.bin").write_bytes(bytes(4))
    (root / "manifest.json").write_text(
        json.dumps([{"name": "w", "dtype": "F64", "shape": [4], "file": "w.bin"}])
    )
    with pytest.raises(FormatError):
        load_tensor_bundle(root)


def test_empty_model_roundtrip(tmp_path):
    store_tensor_bundle(ModelTensors([]), tmp_path / "b")
    assert len(load_tensor_bundle(tmp_path / "b")) == 0
    store_tensor_bundle(ModelTensors([]), tmp_path / "c.qt", format="single_file")
    assert len(load_tensor_bundle(tmp_path / "c.qt")) == 0


def test_int4_single_element_pads_high_nibble():
    t = Tensor("w", DType.INT4_PACKED, (1, 1), pack_int4(np.array([0], np.int8)))
    assert t.nbytes == 1
    assert t.data[0] >> 4 == 0  # padding nibble stays zero
    assert t.data[0] & 0x0F == 8  # value 0 stores as nibble 8


def test_int4_pack_unpack_identity(rng):
    for n in (1, 2, 7, 64, 101):
        v = rng.integers(-8, 8, n).astype(np.int8)
        assert np.array_equal(unpack_int4(pack_int4(v), n), v)


def test_duplicate_names_rejected():
    a = Tensor("w", DType.INT8, (2,), bytes(2))
    with pytest.raises(GeometryError):
        ModelTensors([a, a])


def test_lexicographic_order_regardless_of_input_order():
    ts = [
        Tensor("b", DType.INT8, (1,), bytes(1)),
        Tensor("a", DType.INT8, (1,), bytes(1)),
        Tensor("a.b", DType.INT8, (1,), bytes(1)),
    ]
    assert ModelTensors(ts).names == ["a", "a.b", "b"]


def test_nan_inf_bytes_preserved(tmp_path):
    raw = np.array([0x7E00, 0xFC00, 0x7C00, 0x0001], dtype="<u2").tobytes()  # nan, -inf, inf, denormal
    t = Tensor("w", DType.FP16, (4,), raw)
    for fmt, path in (("directory", tmp_path / "d"), ("single_file", tmp_path / "s.qt")):
        store_tensor_bundle(ModelTensors([t]), path, format=fmt)
        assert load_tensor_bundle(path)["w"].data == raw


def test_single_file_container_accepts_safetensors_spellings(tmp_path):
    header = {
        "w": {"dtype": "F16", "shape": [2], "data_offsets": [0, 4]},
        "__metadata__": {"anything": "ignored"},
    }
    hjson = json.dumps(header).encode()
    blob = len(hjson).to_bytes(8, "little") + hjson + bytes(4)
    f = tmp_path / "m.st"
    f.write_bytes(blob)
    m = load_tensor_bundle(f)
    assert m["w"].dtype is DType.FP16


def test_single_file_truncated_header_raises(tmp_path):
    f = tmp_path / "bad.st"
    f.write_bytes((1000).to_bytes(8, "little") + b"{}")
    with pytest.raises(FormatError):
        load_tensor_bundle(f)


def test_awkward_tensor_names(tmp_path):
    ts = [
        Tensor("model.layers.0/attn weight", DType.INT8, (3,), bytes(3)),
        Tensor("model.layers.0/attn_weight", DType.INT8, (3,), bytes(range(3))),
    ]
    store_tensor_bundle(ModelTensors(ts), tmp_path / "b")
    back = load_tensor_bundle(tmp_path / "b")
    assert back["model.layers.0/attn_weight"].data == bytes(range(3))


@st.composite
def models(draw):
    names = draw(st.lists(st.text(min_size=1, max_size=12), min_size=0, max_size=4, unique=True))
    tensors = []
    for name in names:
        dtype = draw(st.sampled_from(list(DType)))
        shape = tuple(draw(st.lists(st.integers(0, 5), min_size=1, max_size=3)))
        n = int(np.prod(shape))
        data = draw(st.binary(min_size=dtype.byte_length(n), max_size=dtype.byte_length(n)))
        tensors.append(Tensor(name, dtype, shape, data))
    return ModelTensors(tensors)


@given(models(), st.sampled_from(["directory", "single_file"]))
def test_bundle_roundtrip_property(tmp_path_factory, model, fmt):
    path = tmp_path_factory.mktemp("bundle") / ("b" if fmt == "directory" else "b.qt")
    store_tensor_bundle(model, path, format=fmt)
    assert load_tensor_bundle(path) == model


def test_two_loads_identical_order(tmp_path):
    ts = [Tensor(n, DType.INT8, (2,), bytes([i, i])) for i, n in enumerate("zyx")]
    store_tensor_bundle(ModelTensors(ts), tmp_path / "b")
    m1 = load_tensor_bundle(tmp_path / "b")
    m2 = load_tensor_bundle(tmp_path / "b")
    assert m1.names == m2.names == ["x", "y", "z"]
