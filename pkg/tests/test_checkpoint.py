"""Checkpoint binary format: bit-exact round trips and corruption guards."""

import struct

import numpy as np
import pytest

from unitforge.checkpoint import (MAGIC, assign_parameters, load_checkpoint,
                                  save_checkpoint)
from unitforge.errors import DataError
from unitforge.tensor import AdamW, Tensor


def make_params(rng):
    return {
        "layer.w": Tensor(rng.normal(0.0, 1.0, (4, 3)), requires_grad=True),
        "layer.b": Tensor(rng.normal(0.0, 1.0, 3), requires_grad=True),
        "emb.table": Tensor(rng.normal(0.0, 1.0, (7, 4)), requires_grad=True),
    }


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = make_params(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded, opt = load_checkpoint(path)
    assert opt == {}
    assert set(loaded) == set(params)
    for name, p in params.items():
        assert loaded[name].tobytes() == p.data.tobytes()


def test_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    params = make_params(rng)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, params)
    save_checkpoint(p2, params)
    assert p1.read_bytes() == p2.read_bytes()


def test_optimizer_state_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    params = make_params(rng)
    opt = AdamW(params, lr=1e-3)
    for p in params.values():
        p.grad = rng.normal(0.0, 1.0, p.data.shape)
    opt.step()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, opt.state)
    _, state = load_checkpoint(path)
    assert set(state) == set(params)
    for name, (m, v) in opt.state.items():
        assert state[name][0].tobytes() == m.tobytes()
        assert state[name][1].tobytes() == v.tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": Tensor(np.zeros((2, 2)))})
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    version, count = struct.unpack_from("<II", blob, 4)
    assert (version, count) == (1, 1)
    (nlen,) = struct.unpack_from("<H", blob, 12)
    assert blob[14:14 + nlen] == b"w"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": Tensor(np.zeros(2))})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_incomplete_optimizer_state_rejected(tmp_path):
    rng = np.random.default_rng(3)
    path = tmp_path / "model.ckpt"
    # hand-roll a record stream with a .m but no .v
    params = {"w": Tensor(rng.normal(0.0, 1.0, 2)),
              "w.m": Tensor(np.zeros(2))}
    save_checkpoint(path, params)
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_assign_parameters_guards():
    rng = np.random.default_rng(4)
    params = make_params(rng)
    loaded = {name: p.data.copy() for name, p in params.items()}
    with pytest.raises(DataError):
        assign_parameters(params, {k: v for k, v in loaded.items()
                                   if k != "layer.b"})
    with pytest.raises(DataError):
        assign_parameters(params, {**loaded, "rogue": np.zeros(1)})
    bad = dict(loaded)
    bad["layer.w"] = np.zeros((3, 4))
    with pytest.raises(DataError):
        assign_parameters(params, bad)
    assign_parameters(params, loaded)
    for name, p in params.items():
        assert np.array_equal(p.data, loaded[name])
