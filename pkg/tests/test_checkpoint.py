import struct

import numpy as np
import pytest

from decision_nce.checkpoint import MAGIC, load_arrays, save_arrays
from decision_nce.errors import CheckpointFormatError


@pytest.fixture
def saved(tmp_path, rng):
    path = tmp_path / "arrays.ckpt"
    arrays = [("a", rng.normal(size=(3, 4))), ("b", rng.normal(size=5))]
    save_arrays(path, "encoders", {"note": "x", "n": 2}, arrays)
    return path, arrays


class TestArrayContainer:
    def test_round_trip_is_bit_exact(self, saved):
        path, arrays = saved
        kind, metadata, loaded = load_arrays(path)
        assert kind == "encoders"
        assert metadata == {"note": "x", "n": 2}
        assert [n for n, _ in loaded] == ["a", "b"]
        for (_, want), (_, got) in zip(arrays, loaded):
            assert want.tobytes() == got.tobytes()

    def test_layout_prefix(self, saved):
        path, _ = saved
        magic, version, header_len = struct.unpack_from("<8sIQ", path.read_bytes())
        assert magic == MAGIC == b"DNCECKPT"
        assert version == 1
        assert path.stat().st_size == 20 + header_len + 8 * (12 + 5)

    def test_corrupted_magic(self, saved):
        path, _ = saved
        blob = bytearray(path.read_bytes())
        blob[0:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_arrays(path)

    def test_unsupported_version(self, saved):
        path, _ = saved
        blob = bytearray(path.read_bytes())
        blob[8:12] = struct.pack("<I", 2)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_arrays(path)

    @pytest.mark.parametrize("keep", [0, 10, 30, -8])
    def test_truncation(self, saved, keep):
        path, _ = saved
        blob = path.read_bytes()
        path.write_bytes(blob[:keep])
        with pytest.raises(CheckpointFormatError):
            load_arrays(path)

    def test_trailing_bytes(self, saved):
        path, _ = saved
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(CheckpointFormatError, match="trailing"):
            load_arrays(path)

    def test_bad_shape_in_header(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        header = b'{"arrays": [{"name": "a", "shape": [0, 3]}], "kind": "encoders", "metadata": {}}'
        path.write_bytes(struct.pack("<8sIQ", MAGIC, 1, len(header)) + header)
        with pytest.raises(CheckpointFormatError, match="shape"):
            load_arrays(path)

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        header = b"{not json"
        path.write_bytes(struct.pack("<8sIQ", MAGIC, 1, len(header)) + header)
        with pytest.raises(CheckpointFormatError, match="corrupt"):
            load_arrays(path)

    def test_integer_arrays_are_stored_as_float(self, tmp_path):
        path = tmp_path / "ints.ckpt"
        save_arrays(path, "policy", {}, [("w", np.arange(6).reshape(2, 3))])
        _, _, loaded = load_arrays(path)
        assert loaded[0][1].dtype == np.float64
        np.testing.assert_array_equal(loaded[0][1], np.arange(6).reshape(2, 3))
