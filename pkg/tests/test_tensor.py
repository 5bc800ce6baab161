import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icestack import tensor as tn
from icestack.gradcheck import numeric_grad, primitive_checks
from icestack.tensor import ConfigError, ContractError, ShapeError, Tensor


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


# matmul --------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tn.matmul(np.eye(2), a).data, a)


def test_matmul_hand_value():
    assert tn.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_against_finite_differences():
    A = leaf([[1.0, 0.0], [0.0, 1.0]])
    B = np.array([[2.0, 3.0], [4.0, 5.0]])
    tn.backward(tn.reduce_sum(tn.matmul(A, B)))
    with tn.no_grad():
        num = numeric_grad(lambda: tn.reduce_sum(tn.matmul(A, B)).item(), A.data)
    np.testing.assert_allclose(num, [[5.0, 9.0], [5.0, 9.0]], atol=1e-8)
    np.testing.assert_allclose(A.grad, num, atol=1e-8)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))


# softmax -------------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(tn.softmax_lastdim(np.zeros(2)).data, [0.5, 0.5])
    np.testing.assert_allclose(tn.softmax_lastdim(np.array([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-15)
    with np.errstate(over="raise"):
        out = tn.softmax_lastdim(np.array([1000.0, 0.0])).data
    np.testing.assert_allclose(out, [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = tn.softmax_lastdim(x).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
    # shift invariance
    np.testing.assert_allclose(tn.softmax_lastdim(x + 7.0).data, p, atol=1e-12)


# layer norm ----------------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_allclose(tn.layer_norm(np.array([5.0, 5.0, 5.0]), one, zero, 1e-5).data, 0.0)
    np.testing.assert_allclose(tn.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), 0.0).data, [-1, 1])
    np.testing.assert_allclose(tn.layer_norm(np.array([1.0, 3.0]), np.full(2, 2.0), np.ones(2), 0.0).data, [-1, 3])


def test_layer_norm_uses_biased_variance():
    x = np.random.default_rng(0).normal(size=(4, 6))
    expected = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(tn.layer_norm(x, np.ones(6), np.zeros(6), 1e-5).data, expected, atol=1e-14)


# dropout -------------------------------------------------------------------------

def test_dropout_identities():
    x = np.random.default_rng(1).normal(size=(5, 4))
    assert np.array_equal(tn.dropout(x, 0.5, False).data, x)
    assert np.array_equal(tn.dropout(x, 0.0, True, np.random.default_rng(0)).data, x)


def test_dropout_is_mean_preserving():
    means = [tn.dropout(np.ones(100_000), 0.5, True, np.random.default_rng(s)).data.mean() for s in range(5)]
    for m in means:
        assert 0.98 <= m <= 1.02


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_probability(p):
    with pytest.raises(ConfigError):
        tn.dropout(np.ones(3), p, True, np.random.default_rng(0))


def test_dropout_same_seed_same_mask():
    a = tn.dropout(np.ones(50), 0.3, True, np.random.default_rng(4)).data
    b = tn.dropout(np.ones(50), 0.3, True, np.random.default_rng(4)).data
    assert np.array_equal(a, b)


# backward ------------------------------------------------------------------------

def test_backward_examples():
    x = leaf(np.ones(3))
    tn.backward(tn.reduce_sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = leaf([1.0, 2.0, 3.0])
    tn.backward(tn.reduce_sum(tn.multiply(y, y)))
    assert y.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        tn.backward(tn.scale(x, 2.0))


def test_backward_accumulates_across_reuse():
    x = leaf([3.0])
    tn.backward(tn.reduce_sum(tn.add(tn.multiply(x, x), x)))
    assert x.grad.tolist() == [7.0]


def test_tape_records_and_replays():
    x = leaf([1.0, 2.0])
    with tn.Tape() as tape:
        loss = tn.reduce_sum(tn.multiply(x, x))
    assert len(tape) >= 2
    tn.backward(loss, tape)
    assert x.grad.tolist() == [2.0, 4.0]


def test_tape_without_loss_is_rejected():
    x = leaf([1.0])
    with tn.Tape() as tape:
        tn.scale(x, 2.0)
    loss = tn.reduce_sum(x)
    with pytest.raises(ContractError):
        tn.backward(loss, tape)


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with tn.no_grad():
        y = tn.scale(x, 2.0)
    assert not y.requires_grad


def test_broadcast_gradient_is_summed():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones(4))
    tn.backward(tn.reduce_sum(tn.add(a, b)))
    assert b.grad.tolist() == [3.0] * 4


# aggregation ---------------------------------------------------------------------

def brute_mean(x, neighbors):
    out = np.zeros_like(x)
    for i, nb in enumerate(neighbors):
        for j in nb:
            out[i] += x[j]
        if nb:
            out[i] /= len(nb)
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_scatter_mean_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    neighbors = [sorted(set(rng.integers(0, n, rng.integers(0, 4)).tolist()) - {i}) for i in range(n)]
    x = rng.normal(size=(n, 3))
    np.testing.assert_allclose(tn.scatter_mean_rows(x, neighbors).data, brute_mean(x, neighbors), atol=1e-14)


def test_empty_neighborhood_gives_zero_row():
    x = np.arange(6.0).reshape(3, 2)
    out = tn.scatter_mean_rows(x, [[1], [0], []]).data
    assert out[2].tolist() == [0.0, 0.0]


# finite differences for every primitive -----------------------------------------

@pytest.mark.parametrize("seed", [0, 1])
def test_every_primitive_passes_finite_differences(seed):
    results = primitive_checks(seed)
    assert len(results) >= 19
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad, bad


def test_operations_are_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    r1 = tn.softmax_lastdim(tn.matmul(a, b)).data
    r2 = tn.softmax_lastdim(tn.matmul(a, b)).data
    assert r1.tobytes() == r2.tobytes()


def test_item_requires_scalar():
    with pytest.raises(ContractError):
        Tensor(np.ones(2)).item()
