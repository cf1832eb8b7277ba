import io
import json
import struct

import numpy as np
import pytest

from unified_reasoner.autograd import serialize


def test_round_trip_preserves_values_and_meta(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32), "ids": np.arange(5, dtype=np.int64),
               "img": rng.integers(0, 255, size=(2, 2), dtype=np.uint8)}
    serialize.save(tmp_path / "x.urt", tensors, {"step": 7, "name": "a"}, dtype=None)
    out, meta = serialize.load(tmp_path / "x.urt")
    assert meta == {"step": 7, "name": "a"}
    for k, v in tensors.items():
        assert out[k].dtype == v.dtype
        np.testing.assert_array_equal(out[k], v)


def test_layout_magic_length_manifest_payload():
    blob = serialize.dumps({"a": np.array([1.0, 2.0], dtype=np.float32)}, {"k": 1})
    assert blob[:8] == b"URTENSOR"
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + n])
    assert manifest["version"] == "1"
    entry = manifest["tensors"][0]
    assert entry == {"name": "a", "dtype": "float32", "shape": [2], "offset": 0, "nbytes": 8}
    assert blob[16 + n:] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_identical_inputs_identical_bytes():
    t = {"b": np.ones(3), "a": np.zeros(2)}
    assert serialize.dumps(t, {"z": 1, "y": 2}) == serialize.dumps(dict(t), {"y": 2, "z": 1})


def test_default_storage_is_float32():
    out, _ = serialize.loads(serialize.dumps({"x": np.array([0.1], dtype=np.float64)}))
    assert out["x"].dtype == np.float32


def test_bad_magic_and_version():
    with pytest.raises(serialize.FormatError):
        serialize.loads(b"NOTATENS" + b"\0" * 16)
    blob = serialize.dumps({}, {})
    (n,) = struct.unpack("<Q", blob[8:16])
    m = json.loads(blob[16:16 + n])
    m["version"] = "9"
    raw = json.dumps(m).encode()
    with pytest.raises(serialize.FormatError):
        serialize.loads(blob[:8] + struct.pack("<Q", len(raw)) + raw)


def test_truncated_payload_detected():
    blob = serialize.dumps({"x": np.ones(10)})
    with pytest.raises(serialize.FormatError):
        serialize.loads(blob[:-4])


def test_record_stream():
    buf = io.BytesIO()
    for k in range(3):
        serialize.write_record(buf, serialize.dumps({"v": np.full(2, k)}, {"k": k}))
    buf.seek(0)
    metas = [serialize.loads(b)[1]["k"] for b in serialize.read_records(buf)]
    assert metas == [0, 1, 2]
    buf = io.BytesIO(buf.getvalue()[:-3])
    with pytest.raises(serialize.FormatError):
        list(serialize.read_records(buf))
