import json
import os

import numpy as np
import pytest

from ncssdu import datastore
from ncssdu.errors import CorruptStoreError, MissingArrayError, UnsupportedVersionError


@pytest.fixture
def arrays(rng):
    return {
        "img": (rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))).astype(np.complex64),
        "w": rng.standard_normal(7).astype(np.float32),
        "idx": np.arange(5, dtype=np.int32),
    }


def test_roundtrip_bitwise(tmp_path, arrays):
    datastore.save(tmp_path, arrays, {"seed": 3})
    out, manifest = datastore.load(tmp_path)
    for k, v in arrays.items():
        assert out[k].dtype == v.dtype and out[k].tobytes() == v.tobytes()
    assert manifest["provenance"]["seed"] == 3
    assert manifest["format_version"] == datastore.FORMAT_VERSION


def test_complex_two_by_two_is_32_bytes(tmp_path):
    datastore.save(tmp_path, {"c": np.ones((2, 2), complex)})
    assert os.path.getsize(tmp_path / "c.bin") == 32
    raw = np.fromfile(tmp_path / "c.bin", dtype="<f4")
    assert list(raw[:2]) == [1.0, 0.0]  # interleaved real, imag


def test_wrong_checksum(tmp_path, arrays):
    datastore.save(tmp_path, arrays)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["entries"]["w"]["sha256"] = "0" * 64
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorruptStoreError):
        datastore.load(tmp_path)


def test_tampered_blob(tmp_path, arrays):
    datastore.save(tmp_path, arrays)
    with open(tmp_path / "img.bin", "r+b") as f:
        f.write(b"\x01")
    with pytest.raises(CorruptStoreError):
        datastore.load(tmp_path, ["img"])


def test_version_mismatch(tmp_path, arrays):
    datastore.save(tmp_path, arrays)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(UnsupportedVersionError):
        datastore.load(tmp_path)


def test_unknown_dtype_rejected(tmp_path, arrays):
    datastore.save(tmp_path, arrays)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["entries"]["w"]["dtype"] = "float16"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorruptStoreError):
        datastore.load(tmp_path)


def test_missing_array_is_named(tmp_path, arrays):
    datastore.save(tmp_path, arrays)
    with pytest.raises(MissingArrayError, match="kspace"):
        datastore.load(tmp_path, ["kspace"])


def test_save_is_deterministic(tmp_path, arrays):
    datastore.save(tmp_path / "a", arrays, {"seed": 1})
    datastore.save(tmp_path / "b", arrays, {"seed": 1})
    for name in ("manifest.json", "img.bin", "w.bin", "idx.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_hash_is_order_free():
    assert datastore.config_hash({"a": 1, "b": 2}) == datastore.config_hash({"b": 2, "a": 1})
    assert datastore.config_hash({"a": 1}) != datastore.config_hash({"a": 2})


def test_bad_names_and_ranges(tmp_path):
    with pytest.raises(ValueError):
        datastore.save(tmp_path, {"../x": np.zeros(1)})
    with pytest.raises(ValueError):
        datastore.save(tmp_path, {"big": np.array([2**40])})
