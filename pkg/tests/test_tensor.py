"""Tensor and tape checks: forward values, gradients against central
finite differences, and the documented error behavior."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_check
from crosscoord.tensor import Tape, Tensor, concat, minimum, no_tape_guard


# -- matmul -------------------------------------------------------------------


def test_matmul_identity_is_exact():
    a = np.random.default_rng(0).normal(size=(3, 3))
    out = Tensor(np.eye(3)).matmul(Tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_scalar_case():
    out = Tensor(np.array([[2.0]])).matmul(Tensor(np.array([[3.0]])))
    assert out.data == np.array([[6.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(42)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    want = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                want[i, j] += a[i, k] * b[k, j]
    got = Tensor(a).matmul(Tensor(b)).data
    assert np.max(np.abs(got - want)) <= 1e-12


def test_matmul_batched_matches_per_slice():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(3, 4, 5))
    got = Tensor(a).matmul(Tensor(b)).data
    for i in range(3):
        assert np.max(np.abs(got[i] - a[i] @ b[i])) <= 1e-12
    # shared right operand broadcasts over the batch
    c = rng.normal(size=(4, 5))
    got2 = Tensor(a).matmul(Tensor(c)).data
    for i in range(3):
        assert np.max(np.abs(got2[i] - a[i] @ c)) <= 1e-12


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError) as exc:
        Tensor(np.zeros((4, 5))).matmul(Tensor(np.zeros((4, 3))))
    assert "(4, 5)" in str(exc.value) and "(4, 3)" in str(exc.value)


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform_on_equal_scores():
    out = Tensor(np.zeros(3)).softmax(axis=-1).data
    assert np.max(np.abs(out - 1.0 / 3.0)) <= 1e-15


def test_softmax_closed_form_two_elements():
    out = Tensor(np.array([0.0, math.log(2.0)])).softmax(axis=-1).data
    assert np.max(np.abs(out - np.array([1 / 3, 2 / 3]))) <= 1e-12


def test_softmax_matches_direct_exponential_oracle():
    x = np.random.default_rng(3).normal(size=8)
    want = np.exp(x) / np.sum(np.exp(x))
    got = Tensor(x).softmax(axis=-1).data
    assert np.max(np.abs(got - want)) <= 1e-12


def test_softmax_rows_normalized_at_large_magnitude():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1e3, 1e3, size=(20, 9))
    out = Tensor(x).softmax(axis=-1).data
    assert np.all(out >= 0.0)
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) <= 1e-9


def test_softmax_empty_axis_errors():
    with pytest.raises(ValueError):
        Tensor(np.zeros((3, 0))).softmax(axis=-1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1, max_size=12))
def test_softmax_normalization_property(values):
    out = Tensor(np.array(values)).softmax(axis=-1).data
    assert np.all(out >= 0.0)
    assert abs(float(out.sum()) - 1.0) <= 1e-9


# -- backward -----------------------------------------------------------------


def test_backward_square_closed_form():
    x = Tensor.param(np.array(3.0))
    with Tape() as tape:
        loss = x.square()
    tape.backward(loss)
    assert float(x.grad) == pytest.approx(6.0, abs=1e-12)


def test_backward_constant_loss_gives_zero_grads():
    x = Tensor.param(np.array([1.5, -2.0, 0.3]))
    with Tape() as tape:
        loss = x.mul(Tensor(np.zeros(3))).sum()
    tape.backward(loss)
    assert np.array_equal(x.grad, np.zeros(3))


def test_backward_rejects_non_scalar_loss():
    with Tape() as tape:
        y = Tensor.param(np.array([1.0, 2.0])).square()
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_rejects_detached_loss():
    x = Tensor.param(np.array(3.0))
    loss = x.square()  # built with no tape recording
    with Tape() as tape:
        x.square()
    with pytest.raises(ValueError, match="not connected"):
        tape.backward(loss)


def test_backward_fanout_accumulates_additively():
    x = Tensor.param(np.array(2.0))
    with Tape() as tape:
        y = x.square()          # used twice below
        loss = y.add(y)
    tape.backward(loss)
    assert float(x.grad) == pytest.approx(8.0, abs=1e-12)


def test_grad_accumulates_across_backward_calls():
    x = Tensor.param(np.array(2.0))
    for _ in range(2):
        with Tape() as tape:
            loss = x.square()
        tape.backward(loss)
    assert float(x.grad) == pytest.approx(8.0, abs=1e-12)


def test_nested_tape_rejected():
    with Tape():
        with pytest.raises(RuntimeError, match="already active"):
            with Tape():
                pass


def test_no_tape_guard_blocks_inside_tape_only():
    no_tape_guard()  # fine outside
    with Tape():
        with pytest.raises(RuntimeError):
            no_tape_guard()


# -- elementwise suite ----------------------------------------------------------


def test_elementwise_closed_forms():
    assert Tensor(np.array(0.0)).tanh().data == 0.0
    assert Tensor(np.array(1.5)).clamp(0.8, 1.2).data == 1.2
    assert Tensor(np.array([-1.0, 2.0])).relu().data.tolist() == [0.0, 2.0]
    assert Tensor(np.array(1.0)).exp().data == pytest.approx(math.e)
    assert Tensor(np.array(math.e)).log().data == pytest.approx(1.0)


def test_relu_backward_dead_at_negative_input():
    x = Tensor.param(np.array(-1.0))
    with Tape() as tape:
        loss = x.relu().sum()
    tape.backward(loss)
    assert float(x.grad) == 0.0


def test_clamp_backward_passes_only_strict_interior():
    x = Tensor.param(np.array([0.5, 0.8, 1.0, 1.2, 1.5]))
    with Tape() as tape:
        loss = x.clamp(0.8, 1.2).sum()
    tape.backward(loss)
    # boundary points take the subgradient 0
    assert x.grad.tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]


def test_broadcast_mismatch_errors():
    with pytest.raises(ValueError, match="suffix"):
        Tensor(np.zeros((2, 3))).add(Tensor(np.zeros((3, 2))))


def test_suffix_broadcast_forward_and_backward():
    x = Tensor.param(np.arange(6.0).reshape(2, 3))
    b = Tensor.param(np.array([1.0, 2.0, 3.0]))
    with Tape() as tape:
        out = x.add(b)
        loss = out.sum()
    tape.backward(loss)
    assert np.array_equal(out.data, x.data + b.data)
    assert np.array_equal(x.grad, np.ones((2, 3)))
    assert np.array_equal(b.grad, np.full(3, 2.0))  # summed over the batch axis


def test_minimum_routes_tied_gradient_to_first_input():
    a = Tensor.param(np.array([1.0]))
    b = Tensor.param(np.array([1.0]))
    with Tape() as tape:
        loss = minimum(a, b).sum()
    tape.backward(loss)
    assert a.grad.tolist() == [1.0]
    assert b.grad.tolist() == [0.0]


def test_concat_forward_and_gradient_split():
    a = Tensor.param(np.array([[1.0, 2.0]]))
    b = Tensor.param(np.array([[3.0]]))
    with Tape() as tape:
        out = concat([a, b], axis=-1)
        loss = out.mul(Tensor(np.array([[1.0, 10.0, 100.0]]))).sum()
    tape.backward(loss)
    assert out.data.tolist() == [[1.0, 2.0, 3.0]]
    assert a.grad.tolist() == [[1.0, 10.0]]
    assert b.grad.tolist() == [[100.0]]


def test_view_ops_shapes_and_values():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert x.swap_last2().data.tolist() == np.arange(6.0).reshape(2, 3).T.tolist()
    assert x.narrow(1, 1, 2).data.tolist() == [[1.0, 2.0], [4.0, 5.0]]
    assert x.reshape(3, 2).data.shape == (3, 2)
    y = Tensor(np.array([[1.0, 2.0, 3.0]])).expand(4, 3)
    assert np.array_equal(y.data, np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_detach_blocks_gradient_flow():
    x = Tensor.param(np.array(2.0))
    with Tape() as tape:
        loss = x.square().detach().mul(x)  # d/dx = x^2 only, detached factor is constant
    tape.backward(loss)
    assert float(x.grad) == pytest.approx(4.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-10, max_value=10), min_size=1, max_size=8),
       st.floats(min_value=-2, max_value=0), st.floats(min_value=0.1, max_value=2))
def test_clamp_output_within_bounds_property(values, lo, span):
    hi = lo + span
    out = Tensor(np.array(values)).clamp(lo, hi).data
    assert np.all(out >= lo) and np.all(out <= hi)


# -- finite differences -----------------------------------------------------------


def _rand(rng, *shape):
    return Tensor.param(rng.normal(size=shape))


def test_fd_arithmetic_chain():
    rng = np.random.default_rng(10)
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    fd_check(lambda: a.mul(b).sub(a.div(b.square().add(1.0))).add(b.neg()).sum(),
             [("a", a), ("b", b)])


def test_fd_transcendentals():
    rng = np.random.default_rng(11)
    x = _rand(rng, 2, 5)
    pos = Tensor.param(np.abs(rng.normal(size=(2, 5))) + 0.5)
    fd_check(lambda: x.tanh().add(x.exp()).sum().add(pos.log().mean()),
             [("x", x), ("pos", pos)])


def test_fd_relu_clamp_away_from_kinks():
    rng = np.random.default_rng(12)
    # keep every element at least 1e-3 from 0 and from the clamp bounds
    raw = rng.uniform(0.05, 1.0, size=12) * rng.choice([-1.0, 1.0], size=12)
    raw[np.abs(np.abs(raw) - 0.5) < 5e-3] += 0.02
    x = Tensor.param(raw)
    fd_check(lambda: x.relu().sum().add(x.clamp(-0.5, 0.5).square().sum()),
             [("x", x)])


def test_fd_softmax_weighted():
    rng = np.random.default_rng(13)
    x = _rand(rng, 4, 6)
    w = Tensor(rng.normal(size=(4, 6)))
    fd_check(lambda: x.softmax(axis=-1).mul(w).sum(), [("x", x)])


def test_fd_matmul_and_views():
    rng = np.random.default_rng(14)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 5)
    fd_check(lambda: a.matmul(b).swap_last2().narrow(0, 1, 3).square().mean(),
             [("a", a), ("b", b)])


def test_fd_reductions_and_expand():
    rng = np.random.default_rng(15)
    x = _rand(rng, 2, 3)
    fd_check(lambda: x.reshape(1, 6).expand(4, 6).mean(axis=0).square().sum()
             .add(x.sum(axis=1, keepdims=True).mean()),
             [("x", x)])


def test_fd_concat_minimum():
    rng = np.random.default_rng(16)
    a, b = _rand(rng, 5), _rand(rng, 5)
    # separate values by >= 0.1 so the min has no ties anywhere near h
    b.data = a.data + np.where(rng.uniform(size=5) < 0.5, 0.5, -0.5)
    fd_check(lambda: concat([a.reshape(5, 1), b.reshape(5, 1)], axis=1).sum()
             .add(minimum(a, b).square().sum()),
             [("a", a), ("b", b)])


@pytest.mark.parametrize("seed", range(10))
def test_fd_mlp_every_parameter(seed):
    """Two-layer tanh MLP gradient check, the composed-network criterion."""
    rng = np.random.default_rng(seed)
    w1, b1 = _rand(rng, 4, 6), _rand(rng, 6)
    w2, b2 = _rand(rng, 6, 3), _rand(rng, 3)
    x = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 3))

    def loss():
        h = Tensor(x).matmul(w1).add(b1).tanh()
        out = h.matmul(w2).add(b2)
        return out.sub(Tensor(target)).square().mean()

    fd_check(loss, [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)])


# -- determinism ------------------------------------------------------------------


def _forward_backward_bytes(seed):
    rng = np.random.default_rng(seed)
    w = Tensor.param(rng.normal(size=(6, 6)))
    x = rng.normal(size=(3, 6))
    with Tape() as tape:
        loss = Tensor(x).matmul(w).tanh().softmax(axis=-1).square().mean()
    tape.backward(loss)
    return loss.data.tobytes(), w.grad.tobytes()


def test_forward_backward_bitwise_deterministic():
    assert _forward_backward_bytes(123) == _forward_backward_bytes(123)
