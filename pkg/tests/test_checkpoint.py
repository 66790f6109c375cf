"""Checkpoint binary format: round trips, magic, corruption handling."""

from collections import OrderedDict

import numpy as np
import pytest

from cosynorm.checkpoint import (MAGIC, CheckpointError, load_checkpoint,
                                 save_checkpoint)
from cosynorm.seeding import derive_rng


def random_state(rng):
    return OrderedDict([
        ("enc.w", rng.standard_normal((4, 6)).astype(np.float32)),
        ("enc.b", rng.standard_normal(6).astype(np.float32)),
        ("dec.layer0.attn", rng.standard_normal((2, 3, 4)).astype(np.float32)),
        ("scalar", np.float32(rng.standard_normal())),
    ])


def test_round_trip_bit_exact(tmp_path):
    rng = derive_rng(0, "ckpt")
    state = random_state(rng)
    path = tmp_path / "model.bin"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(state)
    for name in state:
        assert np.asarray(loaded[name]).tobytes() == np.asarray(state[name]).tobytes()
        assert loaded[name].shape == np.asarray(state[name]).shape


def test_save_is_deterministic(tmp_path):
    rng = derive_rng(1, "ckpt")
    state = random_state(rng)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, state)
    save_checkpoint(p2, state)
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_header(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, OrderedDict())
    assert path.read_bytes().startswith(MAGIC)
    assert MAGIC == b"COSYNORM1"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC!" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path):
    rng = derive_rng(2, "ckpt")
    path = tmp_path / "t.bin"
    save_checkpoint(path, random_state(rng))
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    rng = derive_rng(3, "ckpt")
    path = tmp_path / "x.bin"
    save_checkpoint(path, random_state(rng))
    path.write_bytes(path.read_bytes() + b"\x01")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_float64_downcast_to_float32(tmp_path):
    path = tmp_path / "d.bin"
    state = OrderedDict([("w", np.array([1.0, 2.0], dtype=np.float64))])
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    assert loaded["w"].dtype == np.dtype("<f4")
