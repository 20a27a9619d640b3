from __future__ import annotations

import numpy as np
import pytest

from dstrack import autodiff as ad
from dstrack.checkpoint import CheckpointFormatError, load_tensors, save_tensors


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "enc.w": rng.normal(size=(7, 3)).astype(np.float32),
        "enc.b": rng.normal(size=(7, 1)).astype(np.float32),
        "dec.embed": rng.normal(size=(11, 5)).astype(np.float32),
        "step": np.array([42.0], dtype=np.float32),
    }
    path = tmp_path / "model.ckpt"
    save_tensors(path, arrays)
    back = load_tensors(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == np.float32
        assert back[k].tobytes() == arrays[k].tobytes()


def test_paramset_round_trip(tmp_path):
    ps = ad.ParamSet(seed=5)
    ps.param("a", (3, 4))
    ps.param("b", (2,))
    path = tmp_path / "p.ckpt"
    save_tensors(path, ps.state_arrays())

    ps2 = ad.ParamSet(seed=99)
    ps2.param("a", (3, 4))
    ps2.param("b", (2,))
    ps2.load_arrays(load_tensors(path))
    for k in ("a", "b"):
        assert ps2[k].data.tobytes() == ps[k].data.tobytes()


def test_corrupted_header_is_format_error(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_tensors(path)


def test_truncated_file_is_format_error(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_tensors(path, {"w": np.ones((4, 4), dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 7])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_tensors(path)


def test_version_mismatch_is_format_error(tmp_path):
    import struct

    path = tmp_path / "ver.ckpt"
    path.write_bytes(b"DSTK" + struct.pack("<II", 999, 0))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_tensors(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "trail.ckpt"
    save_tensors(path, {"w": np.ones(2, dtype=np.float32)})
    with open(path, "ab") as f:
        f.write(b"junk")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_tensors(path)
