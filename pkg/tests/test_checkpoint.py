import struct

import numpy as np
import pytest

from caveseg import checkpoint as C
from caveseg import model as M
from caveseg.errors import FormatError
from caveseg.tensor import Tensor

TINY = M.PRESETS["tiny"]


@pytest.fixture(scope="module")
def tiny_model():
    return M.CaveSegModel.initialize(TINY, seed=2)


def test_round_trip_bit_identical_logits(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    size = C.save_checkpoint(tiny_model, path, meta={"seed": 2})
    assert size == path.stat().st_size
    back = C.load_checkpoint(path)
    assert back.config == tiny_model.config
    for k, v in tiny_model.weights.items():
        np.testing.assert_array_equal(back.weights[k].data, v.data)
    x = Tensor(np.random.default_rng(0).standard_normal((3, 40, 36)))
    np.testing.assert_array_equal(back(x).data, tiny_model(x).data)
    assert C.read_meta(path) == {"seed": 2}


def test_size_is_parameters_times_eight_plus_header(tiny_model):
    blob = C.encode_checkpoint(tiny_model)
    data = 8 * tiny_model.num_parameters()
    head_len = struct.unpack_from("<I", blob, 12)[0]
    assert len(blob) == 16 + head_len + data
    assert abs(len(blob) - data) / data < 0.05


def test_encoding_is_deterministic(tiny_model):
    assert C.encode_checkpoint(tiny_model, {"a": 1}) == C.encode_checkpoint(tiny_model, {"a": 1})


def test_bad_magic(tiny_model):
    blob = bytearray(C.encode_checkpoint(tiny_model))
    blob[0:8] = b"NOTCAVE\0"
    with pytest.raises(FormatError, match="magic"):
        C.decode_checkpoint(bytes(blob))


def test_version_mismatch(tiny_model):
    blob = bytearray(C.encode_checkpoint(tiny_model))
    blob[8:12] = struct.pack("<I", 99)
    with pytest.raises(FormatError, match="version"):
        C.decode_checkpoint(bytes(blob))


@pytest.mark.parametrize("cut", [4, 20, -8])
def test_truncated(tiny_model, cut):
    blob = C.encode_checkpoint(tiny_model)
    with pytest.raises(FormatError):
        C.decode_checkpoint(blob[:cut])


def test_trailing_garbage(tiny_model):
    with pytest.raises(FormatError):
        C.decode_checkpoint(C.encode_checkpoint(tiny_model) + b"\0" * 8)


def test_shape_mismatch_rejected(tiny_model):
    weights = dict(tiny_model.weights)
    weights["classifier.bias"] = Tensor(np.zeros(5))
    blob = C.encode_checkpoint(M.CaveSegModel(tiny_model.config, weights))
    with pytest.raises(FormatError, match="shapes"):
        C.decode_checkpoint(blob)
