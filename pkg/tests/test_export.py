"""Quantization math and the two model file formats."""

import struct
import zlib
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitfed.export import (
    CHECKPOINT_MAGIC,
    FormatError,
    QuantizedTensor,
    load_checkpoint,
    load_quantized,
    merge,
    quantize_int8,
    quantize_tensor,
    quantized_infer,
    save_checkpoint,
    save_quantized,
)
from splitfed.models import build, prepare_input, split
from splitfed.nn import collect_params, forward_layers


def dequant_error(values, qt):
    real = np.float64(qt.scale) * (qt.codes.astype(np.float64) - qt.zero_point)
    return np.max(np.abs(values.astype(np.float64) - real))


# ---------------------------------------------------------------------------
# quantize_tensor


def test_unit_range_hand_values():
    values = np.array([-1.0, 1.0], dtype=np.float32)
    qt = quantize_tensor(values)
    # scale is 2/255 up to one float32 ulp, widened so 255 steps span the range
    assert abs(qt.scale - 2.0 / 255.0) <= 2 * np.spacing(np.float32(2.0 / 255.0))
    assert qt.scale * 255.0 >= 2.0
    # the minimum always lands on -128; the maximum lands on the nearest
    # code, which the error bound puts at 126 or 127
    assert qt.codes[0] == -128
    assert qt.codes[1] in (126, 127)
    assert dequant_error(values, qt) <= qt.scale / 2.0


def test_all_zero_tensor_is_exact():
    values = np.zeros((4, 3), dtype=np.float32)
    qt = quantize_tensor(values)
    assert qt.scale == 1.0 and qt.zero_point == 0
    assert np.all(qt.codes == 0)
    assert dequant_error(values, qt) == 0.0


def test_constant_tensor_is_exact():
    values = np.full(5, 3.5, dtype=np.float32)
    qt = quantize_tensor(values)
    assert dequant_error(values, qt) <= qt.scale / 2.0


def test_one_sided_tensors_keep_zero_point_in_range():
    # all-positive and all-negative ranges are anchored to zero, otherwise
    # the zero point would overflow int8
    pos = np.linspace(2.0, 10.0, 50, dtype=np.float32)
    neg = -pos
    for values in (pos, neg):
        qt = quantize_tensor(values)
        assert -128 <= qt.zero_point <= 127
        assert qt.codes.dtype == np.int8
        assert dequant_error(values, qt) <= qt.scale / 2.0
        # zero reconstructs exactly at the zero point
        zero = np.float64(qt.scale) * (qt.zero_point - qt.zero_point)
        assert zero == 0.0


def test_non_finite_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        quantize_tensor(np.array([1.0, np.nan], dtype=np.float32))
    with pytest.raises(ValueError, match="non-finite"):
        quantize_tensor(np.array([np.inf], dtype=np.float32))


@settings(max_examples=500, deadline=None)
@given(
    st.lists(
        st.floats(allow_nan=False, allow_infinity=False, width=32),
        min_size=1,
        max_size=20,
    )
)
def test_error_bound_holds_everywhere(vals):
    values = np.array(vals, dtype=np.float32)
    qt = quantize_tensor(values)
    assert -128 <= qt.zero_point <= 127
    assert qt.codes.dtype == np.int8
    assert dequant_error(values, qt) <= qt.scale / 2.0


def test_dequantize_is_exact_in_float64():
    # 8-bit codes times a 24-bit scale leave plenty of float64 mantissa,
    # so the product matches exact rational arithmetic
    rng = np.random.default_rng(12)
    values = rng.standard_normal(40).astype(np.float32)
    qt = quantize_tensor(values)
    real = qt.dequantize(dtype=np.float64)
    for code, got in zip(qt.codes.ravel(), real.ravel()):
        want = Fraction(qt.scale) * (int(code) - qt.zero_point)
        assert Fraction(got) == want


# ---------------------------------------------------------------------------
# whole-model quantization


def test_quantize_int8_layout():
    spec = build("model2_cnn", seed=8)
    q = quantize_int8("model2_cnn", spec.layers)
    assert q.model_name == "model2_cnn"
    assert q.split_index == spec.split_index
    assert len(q.tensors) == len(collect_params(spec.layers))
    for qt, p in zip(q.tensors, collect_params(spec.layers)):
        assert qt.codes.shape == p.shape


def test_quantize_int8_rejects_wrong_stack():
    with pytest.raises(ValueError, match="does not match"):
        quantize_int8("model1_mlp", build("model2_cnn", seed=0).layers)


def test_quantized_infer_tracks_float_model():
    spec = build("model1_mlp", seed=4)
    q = quantize_int8("model1_mlp", spec.layers)
    rng = np.random.default_rng(4)
    agree = 0
    for _ in range(50):
        feats = rng.standard_normal((50, 13)).astype(np.float32)
        ql = quantized_infer(q, feats)
        fl = forward_layers(spec.layers, prepare_input("model1_mlp", feats))
        assert ql.shape == (7,)
        agree += int(np.argmax(ql)) == int(np.argmax(fl))
    assert agree >= 45  # int8 noise may flip a rare near-tie


def test_merge_order():
    spec = build("model3_cnn", seed=2)
    merged = merge(split(spec))
    assert merged == spec.layers


# ---------------------------------------------------------------------------
# checkpoint files


def checkpoint_roundtrip(tmp_path, name="model1_mlp"):
    spec = build(name, seed=6)
    config = {"model": name, "seed": 6, "epochs": 3}
    summary = {"steps_total": 42, "final_train_loss": 0.125}
    path = tmp_path / "model.sflc"
    save_checkpoint(path, spec, config, summary)
    return spec, config, summary, path


def test_checkpoint_roundtrip(tmp_path):
    spec, config, summary, path = checkpoint_roundtrip(tmp_path)
    loaded, got_config, got_summary = load_checkpoint(path)
    assert got_config == config and got_summary == summary
    assert loaded.name == spec.name and loaded.split_index == spec.split_index
    for a, b in zip(collect_params(loaded.layers), collect_params(spec.layers)):
        assert np.array_equal(a, b)


def test_checkpoint_file_size_arithmetic(tmp_path):
    spec, config, summary, path = checkpoint_roundtrip(tmp_path)
    import json

    cfg_len = len(json.dumps(config, sort_keys=True, separators=(",", ":")))
    sum_len = len(json.dumps(summary, sort_keys=True, separators=(",", ":")))
    tensors = (
        (1 + 8 + 4 * 25 * 650)  # W1 rank+dims+data
        + (1 + 4 + 4 * 25)
        + (1 + 8 + 4 * 7 * 25)
        + (1 + 4 + 4 * 7)
    )
    expect = 4 + 1 + (1 + len("model1_mlp")) + 1 + (4 + cfg_len) + (4 + sum_len) + 1 + tensors + 4
    assert path.stat().st_size == expect


def test_checkpoint_rerun_is_byte_identical(tmp_path):
    spec, config, summary, first = checkpoint_roundtrip(tmp_path)
    again = tmp_path / "again.sflc"
    save_checkpoint(again, spec, config, summary)
    assert first.read_bytes() == again.read_bytes()


def test_checkpoint_crc_catches_flips(tmp_path):
    _, _, _, path = checkpoint_roundtrip(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.kind == "bad_crc"


def retag(path, mutate):
    """Apply `mutate` to the CRC-protected body and restamp the footer."""
    blob = bytearray(path.read_bytes())
    body = bytearray(blob[:-4])
    mutate(body)
    path.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))


def test_checkpoint_version_checked(tmp_path):
    _, _, _, path = checkpoint_roundtrip(tmp_path)

    def bump(body):
        body[4] = 9

    retag(path, bump)
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.kind == "bad_version"


def test_checkpoint_unknown_model(tmp_path):
    _, _, _, path = checkpoint_roundtrip(tmp_path)

    def rename(body):
        # name bytes sit after magic, version, and the length prefix
        assert body[6 : 6 + 10] == b"model1_mlp"
        body[6 : 6 + 10] = b"modelX_mlp"

    retag(path, rename)
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.kind == "unknown_model"


def test_checkpoint_split_index_checked(tmp_path):
    _, _, _, path = checkpoint_roundtrip(tmp_path)

    def flip_split(body):
        body[16] = 2  # right after the 10-byte name

    retag(path, flip_split)
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.kind == "bad_layout"


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    _, _, _, path = checkpoint_roundtrip(tmp_path)
    retag(path, lambda body: body.extend(b"JUNK"))
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.kind == "trailing_bytes"


def test_checkpoint_wrong_magic(tmp_path):
    p = tmp_path / "junk.sflc"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError) as e:
        load_checkpoint(p)
    assert e.value.kind == "bad_magic"
    with pytest.raises(FormatError) as e:
        load_checkpoint(tmp_path / "missing.sflc")
    assert e.value.kind == "unreadable"


# ---------------------------------------------------------------------------
# quantized files


def test_quantized_roundtrip(tmp_path):
    spec = build("model3_cnn", seed=11)
    q = quantize_int8("model3_cnn", spec.layers)
    path = tmp_path / "model.sflq"
    save_quantized(path, q)
    back = load_quantized(path)
    assert back.model_name == q.model_name
    assert back.split_index == q.split_index
    assert len(back.tensors) == len(q.tensors)
    for a, b in zip(q.tensors, back.tensors):
        assert a.scale == b.scale  # scale is f32-exact, so the field is lossless
        assert a.zero_point == b.zero_point
        assert np.array_equal(a.codes, b.codes)
    feats = np.random.default_rng(0).standard_normal((50, 13)).astype(np.float32)
    assert np.array_equal(quantized_infer(q, feats), quantized_infer(back, feats))


def test_quantized_file_smaller_than_checkpoint(tmp_path):
    spec = build("model2_cnn", seed=1)
    cpt, qf = tmp_path / "m.sflc", tmp_path / "m.sflq"
    save_checkpoint(cpt, spec, {}, {})
    save_quantized(qf, quantize_int8("model2_cnn", spec.layers))
    # int8 codes are a quarter the size of f32 weights
    assert qf.stat().st_size < cpt.stat().st_size / 3.5


def test_quantized_crc_and_magic(tmp_path):
    spec = build("model1_mlp", seed=0)
    path = tmp_path / "m.sflq"
    save_quantized(path, quantize_int8("model1_mlp", spec.layers))
    blob = bytearray(path.read_bytes())
    blob[30] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as e:
        load_quantized(path)
    assert e.value.kind == "bad_crc"


def test_format_cross_loading_rejected(tmp_path):
    spec = build("model1_mlp", seed=0)
    cpt, qf = tmp_path / "m.sflc", tmp_path / "m.sflq"
    save_checkpoint(cpt, spec, {}, {})
    save_quantized(qf, quantize_int8("model1_mlp", spec.layers))
    with pytest.raises(FormatError) as e:
        load_checkpoint(qf)
    assert e.value.kind == "bad_magic"
    with pytest.raises(FormatError) as e:
        load_quantized(cpt)
    assert e.value.kind == "bad_magic"


def test_checkpoint_magic_constant():
    assert CHECKPOINT_MAGIC == b"SFLC"
