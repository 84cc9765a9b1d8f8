"""Checkpoint container round-trip and validation."""

import struct

import numpy as np
import pytest

from mixprec.checkpoint import CheckpointError, MAGIC, load_checkpoint, save_checkpoint


def test_round_trip_preserves_names_shapes_values(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "conv1.w": rng.standard_normal((4, 3, 3, 3)),
        "bn.gamma": rng.standard_normal(4),
        "scalar": np.array(3.25),
        "alpha": np.array([0.01, 0.01, 0.01, 0.01]),
    }
    path = tmp_path / "model.edmp"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], arr)
        assert loaded[name].dtype == np.float64


def test_float32_width_round_trip(tmp_path):
    tensors = {"w": np.linspace(-1, 1, 12, dtype=np.float32).reshape(3, 4)}
    path = tmp_path / "m32.edmp"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert loaded["w"].dtype == np.float32
    np.testing.assert_array_equal(loaded["w"], tensors["w"])


def test_header_layout(tmp_path):
    path = tmp_path / "m.edmp"
    save_checkpoint(path, {"x": np.zeros(2)})
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    version, vwidth = struct.unpack_from("<IB", blob, 4)
    assert (version, vwidth) == (1, 8)
    (name_len,) = struct.unpack_from("<I", blob, 9)
    assert blob[13 : 13 + name_len] == b"x"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.edmp"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "trunc.edmp"
    save_checkpoint(path, {"x": np.zeros(100)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-12])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_mixed_widths_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="width"):
        save_checkpoint(
            tmp_path / "m.edmp",
            {"a": np.zeros(2, dtype=np.float32), "b": np.zeros(2, dtype=np.float64)},
        )


def test_empty_checkpoint_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="empty"):
        save_checkpoint(tmp_path / "m.edmp", {})
