import math

import numpy as np
import pytest

from geoswc.binio import FormatError
from geoswc.numerics import (
    NonFinite,
    OptimizerState,
    Schedule,
    ShapeMismatch,
    ZeroVector,
    checkpoint_bytes,
    grad_check,
    l2_normalize,
    l2_normalize_backward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    load_checkpoint,
    log_softmax,
    log_sum_exp,
    optimizer_step,
    parse_checkpoint,
    relu,
    relu_backward,
    save_checkpoint,
    softmax,
    softmax_backward,
)


def test_identity_linear():
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(linear_forward(np.eye(3), np.zeros(3), X), X)


def test_scalar_linear():
    W, b, X = np.array([[3.0]]), np.array([0.5]), np.array([[2.0]])
    assert linear_forward(W, b, X)[0, 0] == 6.5
    dW, db, dX = linear_backward(W, X, np.array([[1.0]]))
    assert (dW[0, 0], db[0], dX[0, 0]) == (2.0, 1.0, 3.0)


def test_linear_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    params = {"W": rng.standard_normal((3, 4)), "b": rng.standard_normal(3), "X": rng.standard_normal((5, 4))}
    R = rng.standard_normal((5, 3))

    def f(p):
        Y = linear_forward(p["W"], p["b"], p["X"])
        dW, db, dX = linear_backward(p["W"], p["X"], R)
        return float(np.sum(R * Y)), {"W": dW, "b": db, "X": dX}

    assert grad_check(f, params).passed


def test_layer_norm_gradients():
    rng = np.random.default_rng(1)
    params = {"X": rng.standard_normal((4, 6)), "g": rng.standard_normal(6), "b": rng.standard_normal(6)}
    R = rng.standard_normal((4, 6))

    def f(p):
        Y, cache = layer_norm_forward(p["X"], p["g"], p["b"])
        dX, dg, db = layer_norm_backward(R, cache)
        return float(np.sum(R * Y)), {"X": dX, "g": dg, "b": db}

    assert grad_check(f, params).passed


def test_layer_norm_statistics():
    X = np.array([[1.0, 2.0, 3.0, 4.0]])
    Y, _ = layer_norm_forward(X, np.ones(4), np.zeros(4))
    var = np.var(X)
    np.testing.assert_allclose(Y, (X - 2.5) / math.sqrt(var + 1e-5), rtol=1e-14)
    with pytest.raises(ShapeMismatch):
        layer_norm_forward(np.ones((2, 1)), np.ones(1), np.zeros(1))


def test_l2_and_relu_gradients():
    rng = np.random.default_rng(2)
    X0 = rng.standard_normal((3, 5))
    R = rng.standard_normal((3, 5))

    def f(p):
        A = relu(p["X"])
        Y, n = l2_normalize(A + 2.0)
        dA = l2_normalize_backward(R, Y, n)
        return float(np.sum(R * Y)), {"X": relu_backward(dA, p["X"])}

    assert grad_check(f, {"X": X0}).passed
    with pytest.raises(ZeroVector):
        l2_normalize(np.zeros((1, 3)))


def test_softmax_family():
    rng = np.random.default_rng(3)
    X0 = rng.standard_normal((2, 5)) * 3
    R = rng.standard_normal((2, 5))

    def f(p):
        S = softmax(p["X"])
        return float(np.sum(R * S)), {"X": softmax_backward(R, S)}

    assert grad_check(f, {"X": X0}).passed
    np.testing.assert_allclose(np.exp(log_softmax(X0)).sum(axis=1), 1.0, rtol=1e-14)
    big = np.array([1000.0, 1000.0])
    assert log_sum_exp(big) == pytest.approx(1000.0 + math.log(2.0), rel=1e-15)
    assert log_sum_exp(np.array([-np.inf, 0.0])) == 0.0
    assert log_sum_exp(np.array([-np.inf, -np.inf])) == -np.inf


def test_shape_and_finite_guards():
    with pytest.raises(ShapeMismatch):
        linear_forward(np.ones((2, 3)), np.ones(2), np.ones((4, 2)))
    with pytest.raises(NonFinite):
        linear_forward(np.ones((1, 1)), np.zeros(1), np.array([[np.inf]]))


def test_grad_check_rejects_wrong_gradient():
    def f(p):
        x = p["x"]
        return float(np.sum(x**3)), {"x": 3 * x**2 * 1.001}

    report = grad_check(f, {"x": np.array([0.5, -1.5, 2.0])})
    assert not report.passed and report.worst[0] == "x"


def test_schedules():
    s = Schedule("step", step_size=10, gamma=0.1)
    assert [s.lr_at(1.0, t) for t in (0, 9, 10, 25)] == pytest.approx([1.0, 1.0, 0.1, 0.01])
    c = Schedule("cosine", total_steps=100)
    assert c.lr_at(2.0, 0) == 2.0
    assert c.lr_at(2.0, 50) == pytest.approx(1.0)
    assert c.lr_at(2.0, 100) == pytest.approx(0.0, abs=1e-15)
    assert c.lr_at(2.0, 150) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        Schedule("linear").lr_at(1.0, 0)


def test_adamw_matches_hand_trace():
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
    state = OptimizerState("adamw", lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps)
    p = {"w": np.array([1.0])}
    grads = [0.5, -0.2, 0.3]
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        optimizer_step(state, p, {"w": np.array([g])})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd)
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p["w"][0] == pytest.approx(w, rel=1e-14)
    assert state.step == 3


def test_sgd_momentum_with_coupled_decay():
    state = OptimizerState("sgd", lr=0.1, weight_decay=0.5, momentum=0.9)
    p = {"w": np.array([2.0])}
    w, buf = 2.0, None
    for g in (1.0, -3.0, 0.25):
        optimizer_step(state, p, {"w": np.array([g])})
        d = g + 0.5 * w
        buf = d if buf is None else 0.9 * buf + d
        w -= 0.1 * buf
        assert p["w"][0] == pytest.approx(w, rel=1e-14)


def test_step_schedule_inside_optimizer():
    state = OptimizerState("sgd", lr=1.0, momentum=0.0, schedule=Schedule("step", step_size=1, gamma=0.5))
    p = {"w": np.array([0.0])}
    for _ in range(3):
        optimizer_step(state, p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-(1 + 0.5 + 0.25))


def test_optimizer_shape_check():
    with pytest.raises(ShapeMismatch):
        optimizer_step(OptimizerState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    params = {"W": rng.standard_normal((3, 2)), "b": rng.standard_normal(3), "s": np.array(2.5)}
    meta = {"kind": "flat", "partition_hash": "ab" * 32}
    sha = save_checkpoint(tmp_path / "c.gpnn", params, meta)
    back, meta2 = load_checkpoint(tmp_path / "c.gpnn")
    assert meta2 == meta and sorted(back) == sorted(params)
    for k in params:
        assert back[k].shape == np.shape(params[k]) and np.array_equal(back[k], params[k])
    assert len(sha) == 64
    assert checkpoint_bytes(params, meta) == checkpoint_bytes(dict(reversed(list(params.items()))), meta)


@pytest.mark.parametrize("cut", [b"GPNX", b"trunc", b"badver"])
def test_checkpoint_corruption(cut):
    data = checkpoint_bytes({"w": np.ones(3)}, {"a": 1})
    bad = {b"GPNX": b"GPNX" + data[4:], b"trunc": data[:-5], b"badver": data[:4] + b"\x07\x00" + data[6:]}[cut]
    with pytest.raises(FormatError):
        parse_checkpoint(bad)
