import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from abftlab import tensor as T
from abftlab.tensor import AdamState, ContractError, ShapeError, Tensor, adam_step

from .conftest import fd_grad


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), trainable=True)


def check_grad(build, inputs, rtol=1e-3, atol=1e-6):
    """Compare autodiff gradients of scalar ``build(*inputs)`` with central differences."""
    for p in inputs:
        p.zero_grad()
    T.backward(build(*inputs))
    for p in inputs:
        for idx in np.ndindex(p.shape):
            num = fd_grad(lambda: float(build(*inputs).data), p.data, idx)
            ana = p.grad[idx]
            assert abs(ana - num) <= max(atol, rtol * max(abs(ana), abs(num))), (idx, ana, num)


def test_matmul_identity_and_zero():
    M = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(M)).data, M)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.zeros((2, 2))))
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
    w = rng.normal(size=(4, 3))
    check_grad(lambda a, b: T.weighted_sum(T.matmul(a, b), w), [a, b], rtol=1e-4)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 2)))
    shared = leaf(rng.normal(size=(4, 2)))
    w = rng.normal(size=(2, 3, 2))
    check_grad(lambda a, b: T.weighted_sum(T.matmul(a, b), w), [a, b])
    check_grad(lambda a, s: T.weighted_sum(T.matmul(a, s), w), [a, shared])


def test_softmax_basic_cases():
    assert np.allclose(T.row_softmax_masked(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])
    out = T.row_softmax_masked(Tensor(np.random.default_rng(0).normal(size=(3, 3))), causal=True).data
    assert out[0].tolist() == [1.0, 0.0, 0.0]
    assert out[1, 2] == 0.0


def test_softmax_matches_high_precision_oracle():
    from decimal import Decimal, getcontext

    getcontext().prec = 40
    ex = [Decimal(v).exp() for v in (1, 2, 3)]
    oracle = [float(e / sum(ex)) for e in ex]
    out = T.row_softmax_masked(Tensor(np.array([[1.0, 2.0, 3.0]]))).data[0]
    assert np.max(np.abs(out - oracle)) <= 1e-9


def test_softmax_causal_needs_square():
    with pytest.raises(ShapeError):
        T.row_softmax_masked(Tensor(np.zeros((2, 3))), causal=True)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6)).map(lambda t: (t[0], t[0])),
              elements=st.floats(-50, 50)), st.booleans())
def test_softmax_rows_sum_to_one(x, causal):
    out = T.row_softmax_masked(Tensor(x), causal=causal).data
    assert np.all(np.abs(out.sum(axis=-1) - 1) <= 1e-6)
    if causal:
        assert np.all(out[np.triu_indices(len(x), 1)] == 0.0)


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(2, 4, 4)))
    w = rng.normal(size=(2, 4, 4))
    check_grad(lambda x: T.weighted_sum(T.row_softmax_masked(x, causal=True), w), [x])


def test_layer_norm_values():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.allclose(T.layer_norm(Tensor(np.full((1, 4), 3.0)), g, b).data, 0.0)
    out = T.layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_layer_norm_gradient():
    rng = np.random.default_rng(3)
    x, g, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    w = rng.normal(size=(3, 5))
    check_grad(lambda x, g, b: T.weighted_sum(T.layer_norm(x, g, b), w), [x, g, b], rtol=1e-4)


def test_cross_entropy_values():
    V = 7
    assert math.isclose(float(T.cross_entropy(Tensor(np.zeros(V)), 3).data), math.log(V), rel_tol=1e-12)
    sat = np.zeros(V)
    sat[2] = 100.0
    assert float(T.cross_entropy(Tensor(sat), 2).data) < 1e-30
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros(V)), V)


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 6))
    t = np.array([0, 5, 2])
    logits = leaf(z)
    loss = T.cross_entropy(logits, t)
    T.backward(loss)
    oracle = np.mean([math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(z, t)])
    assert abs(float(loss.data) - oracle) <= 1e-6
    for i in range(3):
        s = sum(math.exp(v) for v in z[i])
        for j in range(6):
            expect = (math.exp(z[i, j]) / s - (j == t[i])) / 3
            assert abs(logits.grad[i, j] - expect) <= 1e-6


def test_gelu_and_index_and_embedding_gradients():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(3, 4)))
    wg = rng.normal(size=(3, 4))
    check_grad(lambda x: T.weighted_sum(T.gelu(x), wg), [x])
    table = leaf(rng.normal(size=(5, 3)))
    ids = np.array([[0, 4, 4], [1, 1, 2]])
    w = rng.normal(size=(2, 3, 3))
    check_grad(lambda t: T.weighted_sum(T.embedding(t, ids), w), [table])
    with pytest.raises(IndexError):
        T.embedding(table, np.array([5]))


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        T.backward(T.scale(x, 2.0))


def test_linear_map_gradient_is_outer_structure():
    x = np.array([1.0, -2.0, 0.5])
    W = leaf(np.zeros((2, 3)))
    T.backward(T.weighted_sum(T.matmul(W, Tensor(x[:, None])), None))
    assert np.array_equal(W.grad, np.tile(x, (2, 1)))


def test_two_uses_accumulate():
    a = leaf(np.array([1.0, 2.0]))
    T.backward(T.weighted_sum(T.add(a, a), None))
    assert np.array_equal(a.grad, [2.0, 2.0])
    b = leaf(np.array([1.0, 2.0]))
    T.backward(T.weighted_sum(b, None))
    T.backward(T.weighted_sum(b, None))
    assert np.array_equal(b.grad, [2.0, 2.0])


def test_frozen_tensors_get_no_grad():
    w = leaf(np.ones((2, 2)))
    frozen = Tensor(np.ones((2, 2)), trainable=False)
    T.backward(T.weighted_sum(T.matmul(w, frozen), None))
    assert frozen.grad is None and w.grad is not None


def test_no_grad_records_nothing():
    w = leaf(np.ones(2))
    with T.no_grad():
        out = T.scale(w, 3.0)
    assert not out.requires_grad and out._parents == ()


def test_non_finite_results_are_rejected():
    with pytest.raises(ContractError):
        T.scale(Tensor(np.array([1e308])), 1e10)


def test_adam_first_step_closed_form():
    p = leaf(np.array([0.0]))
    p.grad = np.array([1.0])
    state = AdamState(lr=0.1)
    adam_step(state, [p])
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert abs(p.data[0] - (-0.1 / (1 + 1e-8))) < 1e-15
    assert state.step_count == 1 and np.array_equal(p.grad, [0.0])


def test_adam_zero_gradient_and_missing_gradient():
    p = leaf(np.array([1.5, -2.0]))
    p.grad = np.zeros(2)
    adam_step(AdamState(), [p])
    assert np.array_equal(p.data, [1.5, -2.0])
    q = leaf(np.ones(2))
    with pytest.raises(ContractError):
        adam_step(AdamState(), [q])


def test_adam_constant_gradient_drifts_monotonically():
    p = leaf(np.array([0.0, 0.0]))
    state = AdamState(lr=0.01)
    trace = []
    for _ in range(20):
        p.grad = np.array([1.0, -1.0])
        adam_step(state, [p])
        trace.append(p.data.copy())
    trace = np.array(trace)
    assert np.all(np.diff(trace[:, 0]) < 0) and np.all(np.diff(trace[:, 1]) > 0)
    assert set(state.m) == {id(p)} and state.m[id(p)].shape == p.shape


def test_ops_are_deterministic():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 3)).astype(np.float32)
    a = T.row_softmax_masked(Tensor(x), causal=True).data
    b = T.row_softmax_masked(Tensor(x.copy()), causal=True).data
    assert a.tobytes() == b.tobytes()
