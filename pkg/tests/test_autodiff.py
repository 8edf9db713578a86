import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from practinv import autodiff as ad
from practinv.autodiff import ConfigError, DimensionError, NonFiniteError, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_tanh_value_and_derivative():
    x = leaf([0.5])
    y = ad.total(ad.activation(x, "tanh"))
    ad.backward(y)
    assert y.item() == pytest.approx(0.46211716, abs=1e-8)
    assert x.grad[0] == pytest.approx(1 - math.tanh(0.5) ** 2, abs=1e-12)


def test_bce_known_value():
    # mean(log(1 + e^-1), log(1 + e^-1))
    loss = ad.bce_with_logits(Tensor([1.0, -1.0]), [1, 0])
    assert loss.item() == pytest.approx(0.3132617, abs=1e-6)


def test_bce_is_stable_for_large_margins():
    loss = ad.bce_with_logits(leaf([800.0, -800.0]), [1, 0])
    assert loss.item() == 0.0
    loss = ad.bce_with_logits(leaf([-800.0]), [1])
    assert loss.item() == pytest.approx(800.0)


def test_bce_rejects_bad_input():
    with pytest.raises(DimensionError):
        ad.bce_with_logits(Tensor(np.zeros(0)), np.zeros(0))
    with pytest.raises(ValueError):
        ad.bce_with_logits(Tensor([0.0]), [2])


def test_softmax_ce_known_value():
    loss = ad.softmax_ce(Tensor([[1.0, 2.0, 3.0]]), [2])
    assert loss.item() == pytest.approx(0.40760596, abs=1e-7)


def test_softmax_ce_out_of_range_class():
    with pytest.raises(IndexError):
        ad.softmax_ce(Tensor([[0.0, 0.0]]), [2])


def test_grad_reverse_forward_identity_backward_scaled():
    x = leaf([[1.0, -2.0]])
    y = ad.grad_reverse(x, 2.5)
    np.testing.assert_array_equal(y.values, x.values)
    ad.backward(ad.total(y * Tensor([[3.0, 4.0]])))
    np.testing.assert_array_equal(x.grad, [[-7.5, -10.0]])


def test_grad_reverse_negative_lambda():
    with pytest.raises(ConfigError):
        ad.grad_reverse(Tensor([1.0]), -0.1)


def test_backward_requires_scalar():
    with pytest.raises(DimensionError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        leaf([1e200]) * Tensor([1e200])


def test_gradients_accumulate_for_reused_nodes():
    x = leaf([3.0])
    y = x * x + x
    ad.backward(ad.total(y))
    assert x.grad[0] == 7.0


def test_tape_is_topological():
    a, b = leaf([1.0]), leaf([2.0])
    c = a * b
    d = c + a
    tape = ad.Tape.from_root(d)
    order = [t.node_id for t in tape.nodes]
    assert order == sorted(order)
    assert len(tape) == 4


def test_detached_inputs_get_no_gradient():
    x = leaf([[1.0, 2.0]])
    y = ad.total(ad.square(x.detach()) + x)
    grads = ad.backward(y)
    np.testing.assert_array_equal(grads[x], [[1.0, 1.0]])


def test_solve_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    M = leaf(rng.standard_normal((4, 4)) + 4 * np.eye(4))
    B = leaf(rng.standard_normal((4, 2)))
    err = ad.finite_diff_check(lambda: ad.total(ad.square(ad.solve(M, B))), [M, B])
    assert err < 1e-6


@pytest.mark.parametrize("kind", ad.ACTIVATIONS)
def test_mlp_like_graph_matches_finite_differences(kind):
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((5, 3)))
    W = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal(4) + 0.3)  # keep relu kinks away from zero
    V = leaf(rng.standard_normal((4, 1)))

    def f():
        h = ad.activation(ad.affine(x, W, b), kind)
        logits = ad.reshape(h @ V, (5,))
        return ad.bce_with_logits(logits, [0, 1, 1, 0, 1])

    assert ad.finite_diff_check(f, [W, b, V]) < 1e-5


def test_rows_concat_append_ones_roundtrip_gradients():
    rng = np.random.default_rng(1)
    x = leaf(rng.standard_normal((6, 2)))

    def f():
        parts = [ad.rows(x, 0, 2), ad.rows(x, 2, 6)]
        y = ad.append_ones(ad.concat_rows(parts[::-1]))
        return ad.mean(ad.square(ad.add_diagonal(ad.transpose(y) @ y, 0.5)))

    assert ad.finite_diff_check(f, [x]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (2,), elements=finite))
def test_broadcast_add_gradient_sums_over_rows(a, b):
    ta, tb = leaf(a), leaf(b)
    ad.backward(ad.total(ta + tb))
    np.testing.assert_array_equal(ta.grad, np.ones((3, 2)))
    np.testing.assert_array_equal(tb.grad, np.full(2, 3.0))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4,), elements=finite))
def test_sigmoid_matches_reference(v):
    np.testing.assert_allclose(ad.sigmoid_np(v), 1 / (1 + np.exp(-v)), rtol=1e-12)
