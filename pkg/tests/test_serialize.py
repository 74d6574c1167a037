import numpy as np
import pytest

from modalseg.serialize import ContainerError, decode, encode, load_bundle, save_bundle


@pytest.mark.parametrize("dtype", ["float32", "float64", "int32", "int64", "uint8"])
def test_round_trip(rng, dtype):
    a = (rng.normal(size=(2, 3, 4)) * 10).astype(dtype)
    b = decode(encode(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_scalar_round_trip():
    assert decode(encode(np.array(3.5))) == 3.5


def test_rejects_corruption(rng):
    blob = encode(rng.normal(size=4))
    with pytest.raises(ContainerError):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(ContainerError):
        decode(blob[:-1])
    with pytest.raises(ContainerError):
        decode(blob + b"\0")
    with pytest.raises(ContainerError):
        encode(np.array(["a"]))


def test_bundle(tmp_path, rng):
    tensors = {"b.weight": rng.normal(size=(2, 2)), "a.bias": np.zeros(3, np.float32)}
    save_bundle(tmp_path, tensors, {"step": 4})
    loaded, meta = load_bundle(tmp_path)
    assert meta["step"] == 4
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].tobytes() == tensors[k].tobytes()
