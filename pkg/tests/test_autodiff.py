import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from twinnet import autodiff as ad
from twinnet.autodiff import AutodiffError, NonFiniteError, ShapeError, Tape, Tensor
from twinnet.checks import OP_NAMES, op_battery

finite = st.floats(-3, 3, allow_nan=False, width=64)


def grads_of(fn, *tensors):
    with Tape() as tape:
        loss = fn()
    g = tape.backward(loss)
    return [g[t] for t in tensors]


# ------------------------------------------------------------------ op battery

@pytest.mark.parametrize("op", OP_NAMES)
def test_op_matches_central_differences(op):
    err = op_battery(seed=0, ops=[op])[op]
    assert err < 1e-6, f"{op}: rel. error {err:.2e}"


def test_battery_covers_every_faultable_op():
    # the two NLL cases exercise the *_rows primitives
    covered = set(OP_NAMES) | {"softmax_nll_rows", "sigmoid_nll_rows"}
    assert set(ad.FAULTABLE_OPS) <= covered


@pytest.mark.parametrize("op", ["tanh", "matmul", "lstm_sequence"])
def test_injected_fault_is_detected(op):
    with ad.inject_fault(op, 1.5):
        err = op_battery(seed=0, ops=[op])[op]
    assert err > 0.1


def test_inject_fault_rejects_unknown_op():
    with pytest.raises(ValueError):
        with ad.inject_fault("softplus"):
            pass


# ------------------------------------------------------------------ hand-derived gradients

def test_product_rule_example():
    a = Tensor([2.0, -1.0], True)
    b = Tensor([3.0, 4.0], True)
    ga, gb = grads_of(lambda: ad.total(ad.mul(a, b)), a, b)
    np.testing.assert_array_equal(ga, [3.0, 4.0])
    np.testing.assert_array_equal(gb, [2.0, -1.0])


def test_matmul_gradient_formula():
    rng = np.random.default_rng(0)
    A, B, W = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    a, b = Tensor(A, True), Tensor(B, True)
    ga, gb = grads_of(lambda: ad.total(ad.mul(ad.matmul(a, b), Tensor(W))), a, b)
    np.testing.assert_allclose(ga, W @ B.T, rtol=1e-14)
    np.testing.assert_allclose(gb, A.T @ W, rtol=1e-14)


def test_sigmoid_tanh_derivatives_at_zero():
    x = Tensor([0.0], True)
    (g,) = grads_of(lambda: ad.total(ad.sigmoid(x)), x)
    assert g[0] == pytest.approx(0.25, abs=1e-15)
    (g,) = grads_of(lambda: ad.total(ad.tanh(x)), x)
    assert g[0] == pytest.approx(1.0, abs=1e-15)


def test_softmax_nll_value_and_gradient():
    logits = Tensor([[1.0, 2.0, 3.0]], True)
    with Tape() as tape:
        loss = ad.softmax_cross_entropy(logits, np.array([2]))
    g = tape.backward(loss)[logits]
    p = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    assert float(loss.data) == pytest.approx(-math.log(p[2]), rel=1e-14)
    np.testing.assert_allclose(g[0], p - np.array([0, 0, 1.0]), atol=1e-15)


def test_masked_rows_carry_no_gradient():
    logits = Tensor(np.ones((3, 4)), True)
    mask = np.array([1.0, 0.0, 1.0])
    (g,) = grads_of(lambda: ad.softmax_cross_entropy(logits, np.array([0, 1, 2]), mask), logits)
    assert np.all(g[1] == 0.0)
    assert np.any(g[0] != 0.0)


def test_row_distance_gradient_is_unit_direction():
    a = Tensor([[3.0, 4.0]], True)
    b = Tensor([[0.0, 0.0]])
    (g,) = grads_of(lambda: ad.total(ad.row_distances(a, b)), a)
    np.testing.assert_allclose(g, [[0.6, 0.8]], rtol=1e-15)


def test_stop_gradient_blocks_flow():
    x = Tensor([1.0, 2.0], True)
    (g,) = grads_of(lambda: ad.total(ad.mul(ad.stop_gradient(x), x)), x)
    np.testing.assert_array_equal(g, [1.0, 2.0])


def test_lstm_sequence_matches_stepwise_cells():
    from twinnet.cells import CellParams, lstm_step
    rng = np.random.default_rng(3)
    B, T, H = 2, 4, 3
    pre = rng.normal(size=(B, T, 4 * H))
    w_h = rng.normal(size=(H, 4 * H)) * 0.5
    seq, hT, cT = ad.lstm_sequence(Tensor(pre), Tensor(w_h), Tensor(np.zeros((B, H))),
                                   Tensor(np.zeros((B, H))), np.ones((B, T)))
    # identity input weights so the step sees the same pre-activation
    cell = CellParams("lstm", Tensor(np.eye(4 * H)), Tensor(w_h), Tensor(np.zeros(4 * H)))
    h = c = Tensor(np.zeros((B, H)))
    for t in range(T):
        h, c = lstm_step(cell, Tensor(pre[:, t]), (h, c))
        np.testing.assert_allclose(seq.data[:, t], h.data, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(hT.data, h.data, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(cT.data, c.data, rtol=1e-12, atol=1e-14)


# ------------------------------------------------------------------ tape contracts

def test_backward_twice_requires_zero_grad():
    x = Tensor([1.0], True)
    with Tape() as tape:
        y = ad.total(ad.mul(x, x))
    tape.backward(y)
    with pytest.raises(AutodiffError):
        tape.backward(y)
    tape.zero_grad()
    assert tape.backward(y)[x][0] == 2.0


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_zero_distance_has_zero_subgradient():
    a = Tensor([[0.0, 0.0]], True)
    (g,) = grads_of(lambda: ad.total(ad.row_distances(a, Tensor([[0.0, 0.0]]))), a)
    np.testing.assert_array_equal(g, [[0.0, 0.0]])


def test_non_finite_forward_value_raises():
    big = Tensor([1e308], True)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ad.mul(big, big)


def test_non_finite_adjoint_raises():
    # forward value 1e200 is finite, but d/dy = 1e200 * 1e200 overflows
    x, y = Tensor([1e200], True), Tensor([1e-200], True)
    with Tape() as tape:
        z = ad.scale(ad.total(ad.mul(x, y)), 1e200)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        tape.backward(z)


def test_alternative_topological_order_gives_same_gradients():
    a, b = Tensor([1.5, -0.5], True), Tensor([0.3, 2.0], True)
    with Tape() as tape:
        u = ad.tanh(a)           # op 0
        v = ad.sigmoid(b)        # op 1
        loss = ad.total(ad.mul(u, v))
    g1 = tape.backward(loss)
    r1 = (g1[a].copy(), g1[b].copy())
    tape.zero_grad()
    g2 = tape.backward(loss, order=[1, 0, 2, 3])
    np.testing.assert_array_equal(r1[0], g2[a])
    np.testing.assert_array_equal(r1[1], g2[b])
    tape.zero_grad()
    with pytest.raises(AutodiffError):
        tape.backward(loss, order=[2, 0, 1, 3])


def test_no_tape_means_no_recording():
    x = Tensor([1.0], True)
    y = ad.mul(x, x)
    assert y._tape is None


def test_grad_check_refuses_float32():
    x = Tensor(np.ones(2, dtype=np.float32), True, "x")
    with pytest.raises(AutodiffError):
        ad.grad_check(lambda: ad.total(x), {"x": x})


# ------------------------------------------------------------------ properties

@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=4), elements=finite))
def test_gradient_of_sum_is_ones(x):
    t = Tensor(x, True)
    (g,) = grads_of(lambda: ad.total(t), t)
    np.testing.assert_array_equal(g, np.ones_like(x))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 2), elements=finite), hnp.arrays(np.float64, (3, 2), elements=finite))
def test_gradients_are_linear_in_the_loss(x, w):
    t = Tensor(x, True)
    (g1,) = grads_of(lambda: ad.total(ad.mul(ad.tanh(t), Tensor(w))), t)
    (g2,) = grads_of(lambda: ad.scale(ad.total(ad.mul(ad.tanh(t), Tensor(w))), 2.0), t)
    np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (2, 3), elements=finite))
def test_fan_out_accumulates(x, w):
    # d/dx sum(w * (x + x)) == 2w
    t = Tensor(x, True)
    (g,) = grads_of(lambda: ad.total(ad.mul(ad.add(t, t), Tensor(w))), t)
    np.testing.assert_allclose(g, 2 * w, rtol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_composite_passes_grad_check(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3)), True, "a")
    b = Tensor(rng.normal(size=(3, 3)), True, "b")
    c = Tensor(rng.normal(size=(3,)), True, "c")

    def loss():
        h = ad.tanh(ad.add_bias(ad.matmul(a, b), c))
        return ad.total(ad.mul(ad.sigmoid(h), h))

    assert ad.grad_check(loss, {"a": a, "b": b, "c": c}).max_rel_error < 1e-6
