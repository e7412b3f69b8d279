import numpy as np
import pytest

from planact.io_bundle import read_bundle, write_bundle

MAGIC = b"TEST1"


def test_roundtrip(tmp_path):
    path = str(tmp_path / "b.bin")
    meta = {"alpha": 0.3, "name": "thing", "nested": {"k": [1, 2]}}
    arrays = {
        "a": np.arange(12, dtype=np.float64).reshape(3, 4),
        "b": np.array([[1, 2]], dtype=np.int32),
        "empty": np.zeros((0, 2), dtype=np.float64),
    }
    write_bundle(path, MAGIC, meta, arrays)
    meta2, arrays2 = read_bundle(path, MAGIC)
    assert meta2 == meta
    assert set(arrays2) == set(arrays)
    for k in arrays:
        assert arrays2[k].dtype == arrays[k].dtype
        assert arrays2[k].shape == arrays[k].shape
        assert np.array_equal(arrays2[k], arrays[k])


def test_wrong_magic(tmp_path):
    path = str(tmp_path / "b.bin")
    write_bundle(path, MAGIC, {}, {})
    with pytest.raises(ValueError, match="magic"):
        read_bundle(path, b"OTHER")


def test_truncated(tmp_path):
    path = str(tmp_path / "b.bin")
    write_bundle(path, MAGIC, {}, {"a": np.ones(8)})
    blob = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(blob[:-4])
    with pytest.raises(ValueError, match="truncat"):
        read_bundle(path, MAGIC)


def test_trailing_garbage(tmp_path):
    path = str(tmp_path / "b.bin")
    write_bundle(path, MAGIC, {}, {"a": np.ones(3)})
    with open(path, "ab") as f:
        f.write(b"xx")
    with pytest.raises(ValueError, match="trailing"):
        read_bundle(path, MAGIC)


def test_array_order_preserved(tmp_path):
    # header records order; values land back under the right names
    path = str(tmp_path / "b.bin")
    a = np.full((2, 2), 7.0)
    b = np.full(3, -1.0)
    write_bundle(path, MAGIC, {}, {"second": b, "first": a})
    _, arrays = read_bundle(path, MAGIC)
    assert np.array_equal(arrays["first"], a)
    assert np.array_equal(arrays["second"], b)
