#!/usr/bin/env python3
"""Parameter store, Adam and the TCKP checkpoint format."""
import numpy as np
import pytest

from tctr.errors import CheckpointLoadError, ContractError, FormatError, ShapeError
from tctr.numerics import CHECK_DTYPE, Tape, backward, mul, sum_all
from tctr.params import (
    Adam, ParamStore, checkpoint_bytes, load_checkpoint, make_rng, parse_checkpoint, save_checkpoint,
)


def build_store(seed=0):
    params = ParamStore(seed)
    params.add_linear("attn.wq", 6, 4)
    params.add_conv("conv.w", 3, 2, 3)
    params.add_zeros("conv.b", (3,))
    params.add("stats", np.array([[4.2, 1.9, 1.6, -1.0]]), trainable=False)
    return params


def test_initializers():
    params = build_store()
    w = params["attn.wq"].data
    assert w.dtype == np.float32
    assert np.max(np.abs(w)) <= 2.0 * 0.02 + 1e-7
    assert np.all(params["conv.b"].data == 0.0)
    assert params.names() == sorted(params.names())
    assert params.trainable_names() == ["attn.wq", "conv.b", "conv.w"]
    assert not params.is_trainable("stats")
    assert params.num_values() == 24 + 54 + 3 + 4


def test_initialization_is_seeded():
    a, b, c = build_store(1), build_store(1), build_store(2)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_make_rng_streams_are_independent():
    assert make_rng(5, 1).random() == make_rng(5, 1).random()
    assert make_rng(5, 1).random() != make_rng(5, 2).random()


def test_store_errors():
    params = build_store()
    with pytest.raises(ContractError):
        params["missing"]
    with pytest.raises(ContractError):
        params.add("conv.b", np.zeros(3))
    with pytest.raises(ShapeError):
        params.set("conv.b", np.zeros(4))


def test_adam_first_step_moves_by_lr():
    params = ParamStore(0, CHECK_DTYPE)
    x = params.add("x", np.array([1.0, -2.0]))
    params.add("frozen", np.ones(2), trainable=False)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    backward(loss, tape, params)
    Adam(params, lr=0.1).step()
    # bias-corrected first step is lr·sign(g)
    assert np.allclose(params["x"].data, [0.9, -1.9], atol=1e-6)
    assert params["frozen"].data.tolist() == [1.0, 1.0]


def test_adam_minimizes_a_quadratic():
    params = ParamStore(0, CHECK_DTYPE)
    params.add("x", np.array([3.0, -4.0]))
    opt = Adam(params, lr=0.1)
    for _ in range(300):
        with Tape() as tape:
            loss = sum_all(mul(params["x"], params["x"]))
        backward(loss, tape, params)
        opt.step()
    assert np.max(np.abs(params["x"].data)) < 0.05


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    params = build_store(3)
    path = save_checkpoint(tmp_path / "model.tckp", params)
    fresh = build_store(9)
    load_checkpoint(path, fresh)
    assert checkpoint_bytes(fresh) == checkpoint_bytes(params)
    assert path.read_bytes() == checkpoint_bytes(params)
    assert not fresh.is_trainable("stats")


def test_checkpoint_layout():
    params = ParamStore(0)
    params.add("b", np.array([1.5, 2.5]))
    data = checkpoint_bytes(params)
    assert data[:4] == b"TCKP"
    # magic, version, count, name len, "b", ndim, dim, 2 floats
    assert len(data) == 4 + 4 + 4 + 4 + 1 + 4 + 4 + 8
    assert parse_checkpoint(data)["b"].tolist() == [1.5, 2.5]


def test_checkpoint_format_errors():
    data = checkpoint_bytes(build_store())
    with pytest.raises(FormatError) as exc:
        parse_checkpoint(b"XXXX" + data[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError):
        parse_checkpoint(data[:-3])
    with pytest.raises(FormatError):
        parse_checkpoint(data + b"\0")


def test_checkpoint_mismatch_lists_every_name(tmp_path):
    path = save_checkpoint(tmp_path / "a.tckp", build_store())
    other = ParamStore(0)
    other.add_linear("attn.wq", 6, 5)
    other.add_zeros("conv.b", (3,))
    other.add_zeros("extra", (2,))
    before = checkpoint_bytes(other)
    with pytest.raises(CheckpointLoadError) as exc:
        load_checkpoint(path, other)
    assert set(exc.value.names) == {"attn.wq", "extra", "conv.w", "stats"}
    assert "attn.wq" in str(exc.value)
    assert checkpoint_bytes(other) == before


if __name__ == "__main__":
    test_initializers()
    test_adam_first_step_moves_by_lr()
    test_checkpoint_layout()
    print("Parameter tests passed.")
