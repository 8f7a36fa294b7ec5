import numpy as np
import pytest

from pqlab.io import MAGIC, ModelFormatError, load_model, save_model
from pqlab.nn import build_model
from pqlab.quant import QuantizedModel, quantize_model


@pytest.fixture
def model():
    return build_model("tiny-cnn", (8, 8, 1), 3, seed=4)


def test_float_round_trip(tmp_path, model):
    path = save_model(model, tmp_path / "m.pqm")
    back = load_model(path)
    assert back.architecture_id == "tiny-cnn"
    assert back.input_shape == model.input_shape
    assert [type(a) for a in back.layers] == [type(b) for b in model.layers]
    for group in ("weights", "biases"):
        ours, theirs = getattr(model, group), getattr(back, group)
        assert ours.keys() == theirs.keys()
        for k in ours:
            assert theirs[k].data.dtype == ours[k].data.dtype
            assert theirs[k].data.tobytes() == ours[k].data.tobytes()


def test_quantized_round_trip(tmp_path, model):
    calib = np.random.default_rng(0).random((20, 8, 8, 1)).astype(np.float32)
    qm = quantize_model(model, calib)
    back = load_model(save_model(qm, tmp_path / "q.pqm"))
    assert isinstance(back, QuantizedModel)
    for k in qm.weights:
        assert back.weights[k].dtype == np.int8
        assert np.array_equal(back.weights[k], qm.weights[k])
        assert back.weight_params[k] == qm.weight_params[k]
    for k in qm.biases:
        assert back.biases[k].dtype == np.int32
        assert np.array_equal(back.biases[k], qm.biases[k])
    assert back.activation_params == qm.activation_params
    assert back.profile == qm.profile


def test_truncated_file_rejected(tmp_path, model):
    path = save_model(model, tmp_path / "m.pqm")
    raw = path.read_bytes()
    for cut in (4, 30, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(ModelFormatError):
            load_model(path)


def test_bad_magic_and_version(tmp_path, model):
    path = save_model(model, tmp_path / "m.pqm")
    raw = bytearray(path.read_bytes())
    assert raw[:8] == MAGIC
    bad = bytearray(raw)
    bad[0] ^= 0xFF
    path.write_bytes(bytes(bad))
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(path)
    bad = bytearray(raw)
    bad[8] = 99
    path.write_bytes(bytes(bad))
    with pytest.raises(ModelFormatError, match="version"):
        load_model(path)


def test_flipped_payload_byte_detected(tmp_path, model):
    path = save_model(model, tmp_path / "m.pqm")
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ModelFormatError, match="digest"):
        load_model(path)
