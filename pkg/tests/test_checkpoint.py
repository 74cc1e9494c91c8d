import numpy as np
import pytest

from supernet_search.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from supernet_search.errors import FormatError


def test_names_order_and_dtypes_survive(tmp_path, rng):
    tensors = {
        "layer1/conv/storage": rng.standard_normal((4, 1, 5, 5)),
        "layer1/conv/bias_storage": rng.standard_normal(4).astype(np.float32),
        "arch/layer1/kernel": np.array([0.1, -0.2, 0.3]),
        "scalar": np.array(2.5),
    }
    path = save_checkpoint(tmp_path / "supernet.tnas", tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name, array in tensors.items():
        assert loaded[name].dtype == array.dtype
        np.testing.assert_array_equal(loaded[name], array)


def test_header_starts_with_magic(tmp_path):
    path = save_checkpoint(tmp_path / "a.tnas", {"x": np.zeros(2)})
    assert path.read_bytes()[:4] == MAGIC


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.tnas"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = save_checkpoint(tmp_path / "t.tnas", {"x": np.arange(10.0)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError, match="Truncated"):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path):
    path = save_checkpoint(tmp_path / "t.tnas", {"x": np.arange(3.0)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="Trailing"):
        load_checkpoint(path)


def test_integer_tensors_rejected(tmp_path):
    with pytest.raises(FormatError):
        save_checkpoint(tmp_path / "i.tnas", {"ids": np.arange(3)})
