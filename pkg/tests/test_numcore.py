import math

import numpy as np
import pytest

from doclab import numcore as nc
from doclab.errors import DegenerateInputError, NonFiniteError, ShapeError, UsageError
from gradcases import LOSSES, PRIMITIVES


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    for i in range(20):
        build, params = PRIMITIVES[name](np.random.default_rng([1, i]))
        assert nc.gradcheck(build, params) <= 1e-4


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_loss_gradients_match_finite_differences(name):
    for i in range(5):
        build, params = LOSSES[name](np.random.default_rng([2, i]))
        assert nc.gradcheck(build, params) <= 1e-4


def test_matmul_examples():
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    assert np.array_equal(nc.matmul(np.eye(2), x).data, x)
    assert nc.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]
    assert not nc.matmul(np.zeros((2, 2)), x).data.any()
    with pytest.raises(ShapeError):
        nc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_cross_entropy_closed_forms():
    uniform = nc.Tensor(np.zeros((1, 4)))
    assert nc.softmax_cross_entropy(uniform, [2], [True]).item() == pytest.approx(math.log(4))
    sharp = nc.Tensor(np.array([[0.0, 80.0, 0.0]]))
    assert nc.softmax_cross_entropy(sharp, [1], [True]).item() < 1e-30
    with pytest.raises(DegenerateInputError):
        nc.softmax_cross_entropy(uniform, [0], [False])


def test_cross_entropy_mask_drops_position():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 6))
    targets = rng.integers(0, 6, size=5)
    mask = np.array([True, True, False, True, True])
    full = nc.softmax_cross_entropy(nc.Tensor(logits), targets, mask).item()
    keep = mask.nonzero()[0]
    dropped = nc.softmax_cross_entropy(nc.Tensor(logits[keep]), targets[keep], np.ones(4, bool)).item()
    assert full == dropped


def test_masked_positions_get_zero_gradient():
    logits = nc.Tensor(np.random.default_rng(1).normal(size=(4, 5)), requires_grad=True)
    mask = [True, False, True, False]
    with nc.Tape() as tape:
        loss = nc.softmax_cross_entropy(logits, [0, 1, 2, 3], mask)
    nc.backward(loss, tape)
    assert not logits.grad[1].any() and not logits.grad[3].any()
    assert logits.grad[0].any()


def test_backward_trivial_cases():
    w = nc.Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
    with nc.Tape() as tape:
        loss = nc.sum(w)
    nc.backward(loss, tape)
    assert np.array_equal(w.grad, np.ones((3, 4)))

    w.grad = None
    with nc.Tape() as tape:
        loss = nc.scale(nc.sum(nc.exp(w)), 0.0)
    nc.backward(loss, tape)
    assert not w.grad.any()


def test_unreachable_leaf_gets_zero_grad():
    a = nc.Tensor(np.ones(3), requires_grad=True)
    b = nc.Tensor(np.ones(3), requires_grad=True)
    with nc.Tape() as tape:
        nc.exp(b)
        loss = nc.sum(a)
    nc.backward(loss, tape)
    assert np.array_equal(b.grad, np.zeros(3))


def test_backward_errors():
    a = nc.Tensor(np.ones(3), requires_grad=True)
    with nc.Tape() as tape:
        vec = nc.exp(a)
    with pytest.raises(ShapeError):
        nc.backward(vec, tape)
    loss = nc.sum(a)  # computed off-tape
    with pytest.raises(UsageError):
        nc.backward(loss, tape)


def test_non_finite_forward_is_caught():
    with pytest.raises(DegenerateInputError):
        nc.log(nc.Tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        nc.exp(nc.Tensor(np.array([1000.0])))


def test_optimizer_zero_grad_leaves_params():
    p = nc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    nc.optimizer_step({"p": p}, nc.OptimizerState(lr=0.1))
    assert p.data.tolist() == [1.0, -2.0]
    assert p.grad is None


def test_optimizer_constant_gradient_step_tends_to_lr():
    # with g = 1 every step, bias-corrected m/sqrt(v) is exactly 1, so each
    # step moves by lr / (1 + eps)
    lr = 0.01
    p = nc.Tensor(np.array([0.0]), requires_grad=True)
    state = nc.OptimizerState(lr=lr)
    prev = 0.0
    for _ in range(50):
        p.grad = np.ones(1)
        nc.optimizer_step({"p": p}, state)
        step = prev - float(p.data[0])
        prev = float(p.data[0])
        assert step == pytest.approx(lr, rel=1e-6)


def test_optimizer_identical_params_identical_updates():
    a = nc.Tensor(np.array([0.3, 0.4]), requires_grad=True)
    b = nc.Tensor(np.array([0.3, 0.4]), requires_grad=True)
    state = nc.OptimizerState(lr=0.05)
    for g in ([1.0, -2.0], [0.5, 0.1], [-3.0, 0.0]):
        a.grad, b.grad = np.array(g), np.array(g)
        nc.optimizer_step({"a": a, "b": b}, state)
    assert np.array_equal(a.data, b.data)


def test_optimizer_nan_gradient_names_tensor():
    p = nc.Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError, match="weird"):
        nc.optimizer_step({"weird": p}, nc.OptimizerState())


def test_gradient_clipping_scales_update():
    p = nc.Tensor(np.zeros(1), requires_grad=True)
    p.grad = np.array([100.0])
    state = nc.OptimizerState(lr=0.1, max_grad_norm=1.0)
    nc.optimizer_step({"p": p}, state)
    # Adam normalises the magnitude so the step is still lr, but the moments
    # record the clipped gradient
    assert state.m["p"][0] == pytest.approx(0.1 * 1.0)
