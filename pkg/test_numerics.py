#!/usr/bin/env python3
"""Tensor ops, the tape, and per-op gradients against finite differences."""
import math

import numpy as np
import pytest

from tctr.errors import ContractError, NonFiniteError, ShapeError
from tctr.gradcheck import check_gradients
from tctr.head import softmax_cross_entropy
from tctr.numerics import (
    CHECK_DTYPE, Tape, Tensor, add, backward, channels_to_rows, concat, constant, conv2d,
    layer_norm, matmul, max_over_points, maxpool2d, mean_all, mul, relu, scatter_to_grid,
    sigmoid, slice_axis, softmax_rows, sum_all, take_rows, transpose, upsample2x_nearest,
)
from tctr.params import ParamStore


def t64(data):
    return constant(np.asarray(data, dtype=np.float64), dtype=CHECK_DTYPE)


def op_gradcheck(build, *shapes, seed=0):
    """Max relative error of d(Σ R ⊙ build(inputs))/d(inputs) over every coordinate."""
    rng = np.random.default_rng(seed)
    params = ParamStore(seed, CHECK_DTYPE)
    names = [f"in{i}" for i in range(len(shapes))]
    for name, shape in zip(names, shapes):
        params.add(name, rng.standard_normal(shape))
    readout = {}

    def loss_fn(p):
        out = build(*[p[n] for n in names])
        if "r" not in readout:
            readout["r"] = rng.standard_normal(out.dims)
        return sum_all(mul(out, constant(readout["r"], like=out)))

    return check_gradients(loss_fn, params, h=1e-5, samples_per_param=10_000).max_rel_err


def direct_conv(x, w, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i * stride:i * stride + k, j * stride:j * stride + k] * w[o])
    return out


def test_tensor_is_read_only():
    t = Tensor([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0
    copy = t.numpy()
    copy[0, 0] = 5.0
    assert t.data[0, 0] == 1.0
    assert t.dims == (2, 2)
    assert t.dtype == np.float32


def test_matmul_examples():
    a = np.random.default_rng(1).standard_normal((3, 3))
    assert np.allclose(matmul(t64(a), t64(np.eye(3))).data, a)
    assert matmul(t64([[2.0]]), t64([[3.0]])).data.tolist() == [[6.0]]

    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    oracle = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for p in range(4):
                oracle[i, j] += a[i, p] * b[p, j]
    assert np.max(np.abs(matmul(t64(a), t64(b)).data - oracle)) < 1e-12


def test_matmul_dim_mismatch_reports_both_dims():
    with pytest.raises(ShapeError) as exc:
        matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))
    assert exc.value.dims == [[2, 3], [2, 3]]


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        add(t64(np.zeros((2, 3))), t64(np.zeros((1, 3))))
    with pytest.raises(ShapeError):
        mul(t64(np.zeros(3)), t64(np.zeros((3, 1))))


def test_softmax_examples():
    assert np.allclose(softmax_rows(t64(np.full((1, 4), 2.5))).data, 0.25, atol=1e-12)
    assert np.allclose(softmax_rows(t64([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-12)
    x = np.random.default_rng(3).standard_normal((4, 6))
    assert np.allclose(softmax_rows(t64(x + 1000.0)).data, softmax_rows(t64(x)).data, atol=1e-6)
    big = np.random.default_rng(4).uniform(-1e4, 1e4, (8, 5))
    rows = softmax_rows(t64(big)).data.sum(axis=1)
    assert np.all(np.abs(rows - 1.0) < 1e-6)


def test_conv2d_examples():
    x = np.random.default_rng(5).standard_normal((1, 5, 6))
    ident = np.ones((1, 1, 1, 1))
    assert np.allclose(conv2d(t64(x), t64(ident)).data, x)
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    assert np.allclose(conv2d(t64(x), t64(delta), pad=1).data, x)

    rng = np.random.default_rng(6)
    x, w = rng.standard_normal((3, 7, 7)), rng.standard_normal((4, 3, 3, 3))
    for stride, pad in ((1, 1), (2, 0), (2, 1), (1, 0)):
        got = conv2d(t64(x), t64(w), stride=stride, pad=pad).data
        assert np.max(np.abs(got - direct_conv(x, w, stride, pad))) < 1e-10


def test_conv2d_rejects_non_integral_extent():
    with pytest.raises(ShapeError):
        conv2d(t64(np.zeros((1, 6, 6))), t64(np.zeros((1, 1, 3, 3))), stride=2, pad=0)
    with pytest.raises(ShapeError):
        conv2d(t64(np.zeros((1, 6, 6))), t64(np.zeros((1, 1, 2, 2))))


def test_maxpool_examples():
    out = maxpool2d(t64(np.full((2, 4, 6), 3.0)))
    assert out.dims == (2, 2, 3)
    assert np.all(out.data == 3.0)
    assert maxpool2d(t64([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [[[4.0]]]
    with pytest.raises(ShapeError):
        maxpool2d(t64(np.zeros((1, 3, 4))))


def test_maxpool_tie_routes_gradient_to_first_index():
    params = ParamStore(0, CHECK_DTYPE)
    params.add("x", np.ones((1, 2, 2)))
    with Tape() as tape:
        loss = sum_all(maxpool2d(params["x"]))
    backward(loss, tape, params)
    assert params.grad("x").tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_upsample_examples():
    out = upsample2x_nearest(t64([[[7.0]]]))
    assert out.data.tolist() == [[[7.0, 7.0], [7.0, 7.0]]]
    x = np.random.default_rng(7).standard_normal((2, 3, 4))
    assert math.isclose(float(upsample2x_nearest(t64(x)).data.sum()), 4 * float(x.sum()), rel_tol=1e-12)


def test_layer_norm_examples():
    ones, zeros = t64(np.ones(2)), t64(np.zeros(2))
    assert np.allclose(layer_norm(t64([[1.0, 1.0]]), ones, zeros).data, 0.0)
    assert np.allclose(layer_norm(t64([[-1.0, 1.0]]), ones, zeros).data, [[-1.0, 1.0]], atol=1e-5)
    with pytest.raises(ShapeError):
        layer_norm(t64([[1.0]]), t64(np.ones(1)), t64(np.zeros(1)))


def test_backward_square():
    params = ParamStore(0, CHECK_DTYPE)
    x = params.add("x", np.array(3.0))
    params.add("unused", np.ones(3))
    with Tape() as tape:
        loss = mul(x, x)
    backward(loss, tape, params)
    assert float(params.grad("x")) == pytest.approx(6.0)
    assert np.all(params.grad("unused") == 0.0)


def test_backward_softmax_cross_entropy_is_p_minus_onehot():
    logits = np.array([[0.2, -1.0, 0.7]])
    params = ParamStore(0, CHECK_DTYPE)
    params.add("z", logits)
    with Tape() as tape:
        loss = softmax_cross_entropy(params["z"], np.array([2]))
    backward(loss, tape, params)
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.allclose(params.grad("z"), p - np.array([[0.0, 0.0, 1.0]]), atol=1e-12)


def test_backward_needs_scalar_loss():
    params = ParamStore(0, CHECK_DTYPE)
    x = params.add("x", np.ones(3))
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ContractError):
        backward(y, tape, params)


def test_shared_input_gradients_accumulate():
    params = ParamStore(0, CHECK_DTYPE)
    x = params.add("x", np.array([[1.0, 2.0]]))
    with Tape() as tape:
        loss = sum_all(add(mul(x, x), x))
    backward(loss, tape, params)
    assert params.grad("x").tolist() == [[3.0, 5.0]]


def test_tape_records_only_differentiable_ops():
    params = ParamStore(0, CHECK_DTYPE)
    w = params.add("w", np.ones((2, 2)))
    c = t64(np.ones((2, 2)))
    with Tape() as tape:
        add(c, c)
        matmul(c, w)
    assert tape.op_names() == ["matmul"]


def test_non_finite_output_raises():
    big = constant(np.full(2, 1e30, dtype=np.float32))
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError) as exc:
            mul(big, big)
    assert exc.value.op == "mul"


def test_structural_ops_layout():
    x = np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2 * 3, 2, 2)  # A=2 anchors of width 3
    rows = channels_to_rows(t64(x), 3).data
    assert rows.shape == (2 * 2 * 2, 3)
    # row (h·W + w)·A + a holds x[a·3 + j, h, w]
    h, w, a = 1, 0, 1
    assert rows[(h * 2 + w) * 2 + a].tolist() == [x[a * 3 + j, h, w] for j in range(3)]

    grid = scatter_to_grid(t64([[1.0, 2.0], [3.0, 4.0]]), np.array([0, 2]), np.array([1, 0]), 3, 2).data
    assert grid.shape == (2, 3, 2)
    assert grid[:, 0, 1].tolist() == [1.0, 2.0]
    assert grid[:, 2, 0].tolist() == [3.0, 4.0]
    assert grid.sum() == 10.0


@pytest.mark.parametrize("name, build, shapes", [
    ("matmul", lambda a, b: matmul(a, b), [(3, 4), (4, 2)]),
    ("softmax", lambda a: softmax_rows(a), [(3, 5)]),
    ("sigmoid", lambda a: sigmoid(a), [(4, 3)]),
    ("layer_norm", lambda x, g, b: layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    ("conv2d", lambda x, w, b: conv2d(x, w, b, pad=1), [(2, 5, 5), (3, 2, 3, 3), (3,)]),
    ("conv2d_stride", lambda x, w: conv2d(x, w, stride=2, pad=1), [(2, 5, 5), (2, 2, 3, 3)]),
    ("maxpool", lambda x: maxpool2d(x), [(2, 4, 4)]),
    ("upsample", lambda x: upsample2x_nearest(x), [(2, 3, 2)]),
    ("transpose", lambda x: transpose(x), [(3, 4)]),
    ("concat", lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 4)]),
    ("slice", lambda a: slice_axis(a, 1, 1, 3), [(3, 4)]),
    ("take_rows", lambda a: take_rows(a, np.array([2, 0, 2])), [(3, 2)]),
    ("max_over_points", lambda a: max_over_points(a), [(3, 4, 2)]),
    ("channels_to_rows", lambda a: channels_to_rows(a, 3), [(6, 2, 2)]),
    ("mean_relu", lambda a: mean_all(relu(a)), [(4, 4)]),
])
def test_op_gradients_match_finite_differences(name, build, shapes):
    assert op_gradcheck(build, *shapes) < 1e-5, name


def test_identical_inputs_give_identical_gradients():
    def run():
        params = ParamStore(11, CHECK_DTYPE)
        params.add_linear("w", 4, 3)
        x = constant(np.random.default_rng(0).standard_normal((5, 4)), dtype=CHECK_DTYPE)
        with Tape() as tape:
            loss = mean_all(softmax_rows(matmul(x, params["w"])))
        backward(loss, tape, params)
        return params.grad("w").tobytes()

    assert run() == run()


if __name__ == "__main__":
    test_matmul_examples()
    test_softmax_examples()
    test_conv2d_examples()
    test_backward_square()
    print("Numerics tests passed.")
