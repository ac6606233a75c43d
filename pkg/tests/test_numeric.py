import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdgnn import autodiff as ad
from xdgnn.autodiff import (NumericalError, ShapeError, Tensor, adam_step, backward, bce_loss,
                            concat, gather_rows, grad_check, layer_norm, matmul, mean, mul,
                            parameter, relu, scaled_dot_product_attention, segment_sum, sigmoid,
                            softmax, sum_, tanh)


def rnd(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_softmax_symmetry():
    out = softmax(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-7)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(0)
    x = rnd(rng, 6, 9)
    s = softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(6), atol=1e-6)
    s_shift = softmax(Tensor(x + 3.7)).data
    np.testing.assert_allclose(s, s_shift, atol=1e-6)


def test_sigmoid_analytic():
    assert sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)
    assert sigmoid(Tensor([-100.0])).data[0] >= 0.0
    assert sigmoid(Tensor([100.0])).data[0] <= 1.0


def test_matmul_identity():
    rng = np.random.default_rng(1)
    a = rnd(rng, 3, 3)
    out = matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_layer_norm_moments():
    rng = np.random.default_rng(2)
    x = rnd(rng, 12, 16) * 5 + 3
    g = Tensor(np.ones(16, dtype=np.float32))
    b = Tensor(np.zeros(16, dtype=np.float32))
    out = layer_norm(Tensor(x), g, b).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


# ---------------------------------------------------------------------------
# bce_loss
# ---------------------------------------------------------------------------

def test_bce_analytic_ln2():
    loss = bce_loss(Tensor([0.5]), np.array([1.0]), np.array([1.0]))
    assert loss.item() == pytest.approx(math.log(2.0), rel=1e-6)


def test_bce_all_masked_out_is_zero_with_zero_grad():
    p = parameter(np.array([0.3, 0.8], dtype=np.float32))
    loss = bce_loss(sigmoid(p), np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert loss.item() == 0.0
    backward(loss)
    np.testing.assert_array_equal(p.grad, np.zeros(2, dtype=np.float32))


def bce_scalar_oracle(preds, labels, mask):
    # naive per-element loop, the independent reference for the batched op
    eps = 1e-7
    total, n = 0.0, 0.0
    for p, y, m in zip(preds, labels, mask):
        if m == 0:
            continue
        pc = min(max(p, eps), 1 - eps)
        total += -(y * math.log(pc) + (1 - y) * math.log(1 - pc))
        n += 1
    return total / n if n else 0.0


def test_bce_matches_scalar_loop_oracle():
    rng = np.random.default_rng(3)
    preds = rng.uniform(0.01, 0.99, size=64).astype(np.float32)
    labels = (rng.uniform(size=64) < 0.4).astype(np.float32)
    mask = (rng.uniform(size=64) < 0.8).astype(np.float32)
    expect = bce_scalar_oracle(preds.tolist(), labels.tolist(), mask.tolist())
    got = bce_loss(Tensor(preds), labels, mask).item()
    assert got == pytest.approx(expect, abs=1e-6)


def test_bce_rejects_out_of_range():
    with pytest.raises(NumericalError):
        bce_loss(Tensor([1.5]), np.array([1.0]), np.array([1.0]))
    with pytest.raises(NumericalError):
        bce_loss(Tensor([float("nan")]), np.array([1.0]), np.array([1.0]))


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = parameter(np.array([1.0, -2.0], dtype=np.float32))
    before = p.data.copy()
    adam_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, {})
    np.testing.assert_array_equal(p.data, before)


def test_adam_descends_on_quadratic():
    p = parameter(np.array([1.0], dtype=np.float32))
    adam_step({"p": p}, {"p": np.array([2.0], dtype=np.float32)}, {}, lr=0.1)
    assert p.data[0] < 1.0


def adam_scalar_oracle(x0, grads, lr, b1, b2, eps):
    # hand-rolled scalar Adam with bias correction
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x -= lr * mhat / (math.sqrt(vhat) + eps)
    return x


def test_adam_matches_scalar_oracle_over_ten_steps():
    rng = np.random.default_rng(4)
    grads = rng.standard_normal(10).tolist()
    x0 = 0.7
    expect = adam_scalar_oracle(x0, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8)
    p = parameter(np.array([x0], dtype=np.float32))
    state = {}
    for g in grads:
        adam_step({"p": p}, {"p": np.array([g], dtype=np.float32)}, state, lr=0.01)
    assert p.data[0] == pytest.approx(expect, abs=1e-6)


# ---------------------------------------------------------------------------
# gradients: per-op checks via the finite-difference oracle
# ---------------------------------------------------------------------------

def check(f, params, tol=2e-3):
    report = grad_check(f, params, eps=1e-3, tol=tol)
    assert report.passed, report
    return report


def param64(arr):
    # same backward rules, double precision: finite differences become exact
    # enough to verify at 1e-6 instead of fighting f32 roundoff
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, dtype=np.float64)


def check64(f, params, tol=1e-6):
    report = grad_check(f, params, eps=1e-4, tol=tol, floor=1e-6)
    assert report.passed, report
    return report


def test_grad_quadratic_analytic():
    # f(x) = x^2 at x=3: analytic gradient 6
    p = parameter(np.array([3.0], dtype=np.float32))
    loss = sum_(mul(p, p))
    backward(loss)
    assert p.grad[0] == pytest.approx(6.0, rel=1e-5)
    check(lambda: sum_(mul(p, p)), {"p": p})


def test_grad_matmul_add_relu_tanh_sigmoid():
    rng = np.random.default_rng(5)
    w = parameter(rnd(rng, 4, 3))
    b = parameter(rnd(rng, 3))
    x = Tensor(rnd(rng, 5, 4) + 0.3)  # offset keeps relu away from its kink

    def f():
        h = relu(ad.add(matmul(x, w), b))
        return mean(mul(sigmoid(h), tanh(h)))

    check(f, {"w": w, "b": b})


def test_grad_softmax_layernorm():
    rng = np.random.default_rng(6)
    x = param64(rng.standard_normal((3, 6)))
    g = param64(np.ones(6))
    b = param64(np.zeros(6))

    def f():
        return mean(mul(softmax(x), layer_norm(x, g, b)))

    check64(f, {"x": x, "g": g, "b": b})


def test_grad_concat_gather_segment():
    rng = np.random.default_rng(7)
    a = param64(rng.standard_normal((4, 3)))
    b = param64(rng.standard_normal((4, 2)))
    idx = np.array([0, 2, 2, 3, 1])
    seg = np.array([0, 1, 1, 0, 2])

    def f():
        cat = concat([a, b], axis=-1)
        rows = gather_rows(cat, idx)
        return mean(segment_sum(mul(rows, rows), seg, 3))

    check64(f, {"a": a, "b": b})


def test_grad_attention():
    rng = np.random.default_rng(8)
    q = param64(rng.standard_normal((2, 2, 3, 4)))
    k = param64(rng.standard_normal((2, 2, 3, 4)))
    v = param64(rng.standard_normal((2, 2, 3, 4)))
    mask = np.zeros((2, 1, 1, 3), dtype=np.float64)
    mask[:, :, :, -1] = -1e9

    def f():
        return mean(scaled_dot_product_attention(q, k, v, mask))

    check64(f, {"q": q, "k": k, "v": v})


def test_attention_masked_position_ignored():
    rng = np.random.default_rng(18)
    q = Tensor(rnd(rng, 1, 1, 2, 4))
    k = rnd(rng, 1, 1, 3, 4)
    v = rnd(rng, 1, 1, 3, 4)
    mask = np.zeros((1, 1, 1, 3), dtype=np.float32)
    mask[..., -1] = -1e9
    base = scaled_dot_product_attention(q, Tensor(k), Tensor(v), mask).data
    k2, v2 = k.copy(), v.copy()
    k2[..., -1, :] += 5.0  # perturb only the masked token
    v2[..., -1, :] -= 3.0
    pert = scaled_dot_product_attention(q, Tensor(k2), Tensor(v2), mask).data
    np.testing.assert_allclose(base, pert, atol=1e-6)


def test_grad_bce_through_sigmoid():
    rng = np.random.default_rng(9)
    w = parameter(rnd(rng, 3, 1))
    x = Tensor(rnd(rng, 6, 3))
    y = (rng.uniform(size=(6, 1)) < 0.5).astype(np.float32)
    m = np.ones((6, 1), dtype=np.float32)

    def f():
        return bce_loss(sigmoid(matmul(x, w)), y, m)

    check(f, {"w": w})


def test_gradient_accumulates_additively_on_reuse():
    # the same tensor feeding two paths must sum both contributions
    p = parameter(np.array([2.0], dtype=np.float32))
    loss = sum_(ad.add(mul(p, p), scale(p := p, 3.0) if False else ad.scale(p, 3.0)))
    backward(loss)
    assert p.grad[0] == pytest.approx(2 * 2.0 + 3.0)


def test_grad_check_negative_control():
    # a deliberately corrupted backward rule must fail the check
    p = parameter(np.array([1.5], dtype=np.float32))

    def bad_square(t):
        out = Tensor(t.data * t.data)
        out.requires_grad = True
        out._parents = (t,)

        def wrong():
            t.accumulate(out.grad * 3.0 * t.data)  # should be 2x

        out._backward = wrong
        return out

    report = grad_check(lambda: sum_(bad_square(p)), {"p": p}, eps=1e-3, tol=1e-3)
    assert not report.passed


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.floats(-50, 50))
def test_softmax_shift_invariance_property(xs, c):
    x = np.array([xs], dtype=np.float32)
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x + np.float32(c))).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert abs(a.sum() - 1.0) < 1e-6
