import json

import numpy as np
import pytest

from conftest import random_model
from studentflow.checkpoint import (
    CheckpointError,
    decode_array,
    encode_array,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
)
from studentflow.special import make_rng


@pytest.mark.parametrize("arr", [
    np.array([0.1, -0.0, np.pi, 1e-310, np.inf]),
    np.arange(12, dtype=np.int64).reshape(3, 4),
    np.zeros((0, 3)),
    np.array([[1.5]], dtype=">f8"),
])
def test_array_encoding_bitwise(arr):
    back = decode_array(json.loads(json.dumps(encode_array(arr))))
    assert back.shape == arr.shape
    assert back.tobytes() == arr.astype(arr.dtype.newbyteorder("=")).tobytes()


@pytest.mark.parametrize("shape,L,base,nu", [((2,), 1, "student_t", 50.0), ((3,), 1, "gaussian", None),
                                             ((1, 4, 4), 2, "laplace", None), ((2,), 1, "student_t", float("inf"))])
def test_model_round_trip_bitwise(tmp_path, shape, L, base, nu):
    model = random_model(shape, base, nu, K=2, L=L, seed=3)
    path = save_model(model, tmp_path / "m.json")
    back = load_model(path)
    orig, new = model.parameters(), back.parameters()
    assert list(orig) == list(new)
    for k in orig:
        assert orig[k].tobytes() == new[k].tobytes(), k
    x = np.random.default_rng(0).standard_normal((20,) + shape)
    np.testing.assert_array_equal(model.log_likelihood(x), back.log_likelihood(x))
    np.testing.assert_array_equal(model.sample(5, make_rng(1)), back.sample(5, make_rng(1)))
    # saving the loaded model reproduces the same file
    assert save_model(back, tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_uninitialized_model_round_trip(tmp_path):
    from studentflow.flow import build_flow
    model = build_flow((2,), "student_t", 20.0, K=1)
    back = load_model(save_model(model, tmp_path / "m.json"))
    assert not back.initialized


def test_bad_documents_rejected(tmp_path):
    model = random_model((2,), seed=1)
    doc = model_to_dict(model)
    with pytest.raises(CheckpointError):
        model_from_dict({**doc, "format": "something-else"})
    with pytest.raises(CheckpointError):
        model_from_dict({**doc, "version": 99})
    broken = json.loads(json.dumps(doc))
    broken["layers"][0]["kind"] = "mystery"
    with pytest.raises(CheckpointError, match="mystery"):
        model_from_dict(broken)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_model(bad)
