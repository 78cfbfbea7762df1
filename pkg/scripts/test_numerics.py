#!/usr/bin/env python3
"""
Tests for the autodiff engine, Adam and the masked MSE
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from kgfm import numerics as nx
from kgfm.decoder import init_lstm, lstm_cell, run_lstm
from kgfm.encoder import gru_cell, init_gru
from kgfm.errors import KGFMError, NonFiniteError, ShapeError
from kgfm.numerics import Tape, Tensor

GRAD_TOL = 1e-4


def param(rng, *shape, name="p"):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def test_forward_op_examples():
    assert_array_equal(nx.forward_op("add", [1, 2], [3, 4]).data, [4, 6])
    assert_array_equal(nx.forward_op("softmax_rows", [0.0, 0.0]).data, [0.5, 0.5])
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert_array_equal(nx.forward_op("matmul", m, np.eye(2)).data, m)


def test_forward_op_errors_name_the_op():
    with pytest.raises(ShapeError, match="matmul"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        nx.add(np.ones(3), np.ones(4))
    with pytest.raises(KGFMError):
        nx.forward_op("conv2d", np.ones(2))


def test_ops_refuse_non_finite():
    with pytest.raises(NonFiniteError, match="mul"):
        nx.mul([1e308], [1e308])


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.sum_(nx.mul(x, x))
        grads = nx.backward(loss, {"x": x}, tape)
    assert_allclose(grads["x"], [2.0, 4.0, 6.0])


def test_backward_mse_at_minimum_is_zero():
    x = Tensor([0.5, -1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        grads = nx.backward(nx.mse(x, x.data.copy()), {"x": x}, tape)
    assert_array_equal(grads["x"], np.zeros(3))


def test_backward_non_participating_gets_zero_and_non_scalar_fails():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([[3.0]], requires_grad=True)
    with Tape() as tape:
        out = nx.mul(x, 2.0)
        grads = nx.backward(nx.sum_(out), {"x": x, "unused": unused}, tape)
        with pytest.raises(ShapeError):
            nx.backward(out, {"x": x}, tape)
    assert_array_equal(grads["unused"], np.zeros((1, 1)))


def test_concat_splits_gradients_exactly():
    rng = np.random.default_rng(1)
    a, b = param(rng, 3, 2, name="a"), param(rng, 3, 4, name="b")
    w = rng.normal(size=(3, 6))
    with Tape() as tape:
        both = nx.backward(nx.sum_(nx.mul(nx.concat([a, b], axis=1), w)), {"a": a}, tape)
    with Tape() as tape:
        alone = nx.backward(nx.sum_(nx.mul(a, w[:, :2])), {"a": a}, tape)
    assert_array_equal(both["a"], alone["a"])


def test_softmax_rows_sum_to_one():
    s = nx.softmax_rows(np.random.default_rng(2).normal(scale=5.0, size=(7, 5))).data
    assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-12
    assert ((s > 0) & (s < 1)).all()


@pytest.mark.parametrize("op", ["add", "sub", "mul", "matmul", "sigmoid", "tanh", "softmax_rows", "concat",
                                "stack", "slice", "mean", "reshape", "transpose", "gather_rows"])
def test_every_op_gradcheck(op):
    rng = np.random.default_rng(3)
    a, b = param(rng, 3, 4, name="a"), param(rng, 3, 4, name="b")
    params = {"a": a, "b": b}
    build = {
        "add": lambda: nx.add(a, b),
        "sub": lambda: nx.sub(a, b),
        "mul": lambda: nx.mul(a, b),
        "matmul": lambda: nx.matmul(a, nx.transpose(b)),
        "sigmoid": lambda: nx.sigmoid(a),
        "tanh": lambda: nx.tanh(a),
        "softmax_rows": lambda: nx.softmax_rows(a),
        "concat": lambda: nx.concat([a, b], axis=0),
        "stack": lambda: nx.stack([a, b], axis=1),
        "slice": lambda: nx.slice_(a, (slice(1, 3), slice(None))),
        "mean": lambda: nx.mean(a, axis=0, keepdims=True),
        "reshape": lambda: nx.reshape(a, (4, 3)),
        "transpose": lambda: nx.transpose(a),
        "gather_rows": lambda: nx.gather_rows(a, np.array([2, 0, 2])),
    }[op]

    def loss():
        out = build()
        weights = np.cos(np.arange(out.size)).reshape(out.shape)
        return nx.sum_(nx.mul(nx.tanh(out), weights))

    assert nx.gradcheck(loss, params) < GRAD_TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_randomized_three_layer_net_gradcheck(seed):
    rng = np.random.default_rng(seed)
    params = {}
    nx.init_linear(rng, params, "l1", 5, 7)
    nx.init_linear(rng, params, "l2", 7, 6)
    nx.init_linear(rng, params, "l3", 6, 3)
    x = rng.normal(size=(4, 5))
    y = rng.normal(size=(4, 3))

    def loss():
        h = nx.tanh(nx.linear(Tensor(x), params, "l1"))
        h = nx.sigmoid(nx.linear(h, params, "l2"))
        return nx.mse(nx.linear(h, params, "l3"), y)

    assert nx.gradcheck(loss, params) < GRAD_TOL


def test_relu_mlp_gradcheck():
    rng = np.random.default_rng(4)
    params = {}
    nx.init_linear(rng, params, "hidden", 4, 6)
    nx.init_linear(rng, params, "out", 6, 8)
    x = rng.normal(size=(3, 4))

    def loss():
        return nx.mean(nx.mul(nx.linear(nx.relu(nx.linear(Tensor(x), params, "hidden")), params, "out"), 0.7))

    assert nx.gradcheck(loss, params) < GRAD_TOL


def test_gru_cell_gradcheck():
    rng = np.random.default_rng(5)
    params = {}
    init_gru(rng, params, "gru", 3, 4)
    x = rng.normal(size=(2, 3))
    h = Tensor(rng.uniform(-0.5, 0.5, size=(2, 4)), requires_grad=True)

    def loss():
        return nx.sum_(nx.mul(gru_cell(x, h, params, "gru"), 1.3))

    assert nx.gradcheck(loss, {**params, "h": h}) < GRAD_TOL


def test_lstm_sequence_gradcheck():
    rng = np.random.default_rng(6)
    params = {}
    init_lstm(rng, params, "lstm", 3, 4)
    xs = Tensor(rng.normal(size=(2, 5, 3)))
    y = rng.normal(size=(2, 5, 4))

    def loss():
        return nx.mse(run_lstm(xs, params, "lstm", 4), y)

    assert nx.gradcheck(loss, params) < GRAD_TOL


def test_lstm_cell_rejects_bad_shapes():
    rng = np.random.default_rng(7)
    params = {}
    init_lstm(rng, params, "lstm", 3, 4)
    with pytest.raises(ShapeError, match="lstm_cell"):
        lstm_cell(np.ones((1, 2)), (np.zeros((1, 4)), np.zeros((1, 4))), params)


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = nx.AdamState(learning_rate=0.1)
    nx.adam_step(state, {"p": p}, {"p": np.zeros(2)})
    assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_single_step_hand_value():
    p = Tensor([0.0], requires_grad=True)
    nx.adam_step(nx.AdamState(learning_rate=0.1), {"p": p}, {"p": np.ones(1)})
    assert p.data[0] == pytest.approx(-0.1, abs=1e-7)


def test_adam_converges_on_convex_scalar():
    p = Tensor([0.0], requires_grad=True)
    opt = nx.Adam({"p": p}, learning_rate=0.1)
    for _ in range(200):
        nx.fit_step(lambda: nx.sum_(nx.mul(nx.sub(p, 3.0), nx.sub(p, 3.0))), opt)
    assert abs(p.data[0] - 3.0) < 0.05


def test_adam_key_mismatch():
    p = Tensor([0.0], requires_grad=True)
    with pytest.raises(KGFMError, match="gradient keys"):
        nx.adam_step(nx.AdamState(), {"p": p}, {"q": np.ones(1)})


def test_mse_examples():
    assert nx.mse(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert nx.mse(Tensor([1.0, 2.0]), [2.0, 4.0]).item() == pytest.approx(2.5)
    assert nx.mse(Tensor([1.0, 9.0]), [2.0, np.nan], mask=np.array([1, 0])).item() == pytest.approx(1.0)
    with pytest.raises(KGFMError, match="masked"):
        nx.mse(Tensor([1.0]), [2.0], mask=np.zeros(1))


def test_make_rng_streams_are_reproducible_and_independent():
    a = nx.make_rng(7, 1).normal(size=5)
    assert_array_equal(a, nx.make_rng(7, 1).normal(size=5))
    assert not np.array_equal(a, nx.make_rng(7, 2).normal(size=5))


def test_init_uniform_bounds():
    t = nx.init_uniform(nx.make_rng(0), (50, 10), 25, "w")
    assert t.requires_grad and np.abs(t.data).max() <= 1.0 / 5.0


def test_standardizer_ignores_nan_and_floors_std():
    rows = np.array([[1.0, 5.0, np.nan], [3.0, 5.0, 2.0]])
    s = nx.Standardizer.fit(rows)
    assert_allclose(s.mean, [2.0, 5.0, 2.0])
    assert_allclose(s.std, [1.0, 1.0, 1.0])
    assert_allclose(s.invert(s.apply(rows[1])), rows[1])
