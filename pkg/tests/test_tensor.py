import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speakernav import tensor as T
from speakernav.errors import ContractError, DimensionError, ParameterError
from speakernav.optim import Adam, AdamState, adam_step
from speakernav.tensor import Tensor

from oracles import check_grads, numeric_grad, rel_error


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_zero_row():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data.tolist() == [[0.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    err = check_grads(lambda: T.tsum(T.matmul(a, b) * w), [a, b], rng, probes=24)
    assert err < 1e-6


def test_batched_matmul_grad_with_shared_weight():
    rng = np.random.default_rng(1)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    assert check_grads(lambda: T.tsum(T.matmul(a, b) * w), [a, b], rng) < 1e-6


# ---------------------------------------------------------------- softmax

def test_softmax_values():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(big[0] - 1.0) < 1e-12 and big[1] < 1e-12
    assert np.allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(values):
    p = T.softmax(Tensor(values)).data
    assert abs(p.sum() - 1.0) < 1e-9
    assert (p > 0).all()


def test_softmax_mask_zeroes_masked_and_rejects_empty_rows():
    p = T.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0 and abs(p.sum() - 1) < 1e-12
    with pytest.raises(ContractError):
        T.softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


def test_softmax_grad():
    rng = np.random.default_rng(2)
    x = leaf(rng, 3, 5)
    w = rng.normal(size=(3, 5))
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    assert check_grads(lambda: T.tsum(T.softmax(x, mask=mask) * w), [x], rng) < 1e-6


# ---------------------------------------------------------------- layernorm

def test_layernorm_examples():
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(T.layernorm(Tensor([2.0, 2.0, 2.0]), ones, zeros).data, 0.0)
    out = T.layernorm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-5)


def test_layernorm_grad():
    rng = np.random.default_rng(3)
    x, g, b = leaf(rng, 4, 6), leaf(rng, 6), leaf(rng, 6)
    w = rng.normal(size=(4, 6))
    assert check_grads(lambda: T.tsum(T.layernorm(x, g, b) * w), [x, g, b], rng, probes=30) < 1e-5


# ---------------------------------------------------------------- dropout

def test_dropout_identity_cases():
    x = Tensor(np.arange(5.0))
    rng = np.random.default_rng(0)
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.7, False, rng) is x
    with pytest.raises(ParameterError):
        T.dropout(x, 1.0, True, rng)
    with pytest.raises(ParameterError):
        T.dropout(x, -0.1, True, rng)


def test_dropout_expectation_is_preserved():
    x = Tensor(np.full(100_000, 2.5))
    out = T.dropout(x, 0.3, True, np.random.default_rng(4)).data
    assert abs(out.mean() - 2.5) < 0.01 * 2.5
    assert set(np.unique(out).round(9)) <= {0.0, round(2.5 / 0.7, 9)}


def test_dropout_is_deterministic_given_seed():
    x = Tensor(np.ones(50))
    a = T.dropout(x, 0.4, True, np.random.default_rng(9)).data
    b = T.dropout(x, 0.4, True, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- losses

def test_cross_entropy_analytic_cases():
    assert abs(T.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() - math.log(7)) < 1e-12
    logits = np.full((1, 4), -50.0)
    logits[0, 2] = 50.0
    assert T.cross_entropy(Tensor(logits), [2]).item() < 1e-30


def test_cross_entropy_matches_direct_evaluation_with_mask():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2, 3, 6))
    targets = rng.integers(6, size=(2, 3))
    mask = np.array([[True, True, False], [True, False, False]])
    expected = []
    for b in range(2):
        for t in range(3):
            if mask[b, t]:
                row = logits[b, t]
                expected.append(-(row[targets[b, t]] - math.log(sum(math.exp(v) for v in row))))
    got = T.cross_entropy(Tensor(logits), targets, mask).item()
    assert abs(got - sum(expected) / len(expected)) < 1e-12


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], np.zeros(2, bool))


def test_cross_entropy_grad():
    rng = np.random.default_rng(6)
    x = leaf(rng, 4, 5)
    targets = rng.integers(5, size=4)
    mask = np.array([True, True, False, True])
    assert check_grads(lambda: T.cross_entropy(x, targets, mask), [x], rng) < 1e-6


def test_mse_cases_and_grad():
    assert T.mse(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert T.mse(Tensor([0.0]), [1.0]).item() == 0.5
    with pytest.raises(DimensionError):
        T.mse(Tensor([0.0, 1.0]), [1.0])
    rng = np.random.default_rng(7)
    p = leaf(rng, 6)
    target = rng.normal(size=6)
    mask = rng.random(6) > 0.3
    mask[0] = True
    assert check_grads(lambda: T.mse(p, target, mask), [p], rng) < 1e-6


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.integers(0, 2 ** 16))
def test_mse_is_non_negative(values, seed):
    target = np.random.default_rng(seed).normal(size=len(values))
    assert T.mse(Tensor(values), target).item() >= 0.0


# ---------------------------------------------------------------- backward

def test_backward_basic_cases():
    x = Tensor(np.arange(4.0), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones(4))
    y = Tensor(3.0, requires_grad=True)
    (y * y).backward()
    assert y.grad == 6.0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_accumulates_across_calls():
    x = Tensor(2.0, requires_grad=True)
    (x * 3.0).backward()
    (x * 3.0).backward()
    assert x.grad == 6.0


def test_shared_subexpression_equals_unshared_expansion():
    rng = np.random.default_rng(8)
    data = rng.normal(size=5)
    a = Tensor(data, requires_grad=True)
    s = T.exp(a)
    T.tsum(s * s + s).backward()
    b = Tensor(data, requires_grad=True)
    T.tsum(T.exp(b) * T.exp(b) + T.exp(b)).backward()
    assert np.allclose(a.grad, b.grad, rtol=1e-14, atol=0)


def test_tape_is_freed_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.tsum(T.exp(x))
    y.backward()
    assert y._parents == () and y._backward is None
    z = T.tsum(T.exp(x))
    z.backward(retain_graph=True)
    assert z._parents != ()


def test_every_reachable_leaf_gets_a_grad():
    rng = np.random.default_rng(10)
    a, b, unused = leaf(rng, 3), leaf(rng, 3), leaf(rng, 3)
    T.tsum(a * b).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape and unused.grad is None


def test_elementwise_and_indexing_grads():
    rng = np.random.default_rng(11)
    a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    b = leaf(rng, 4)
    table = leaf(rng, 5, 4)
    ids = np.array([[0, 2], [2, 4]])

    def loss():
        x = T.log(a) / (b * b + 1.0) - T.relu(a - 1.0)
        y = T.concat([x, T.getitem(x, slice(0, 2)) * 2.0], axis=0)
        z = T.take_rows(table, ids).reshape(4, 4).swapaxes(0, 1)
        return T.mean(y) + T.tsum(z * z) * 0.1

    assert check_grads(loss, [a, b, table], rng, probes=30) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(3,), (1,), (2, 3), (1, 3)]), st.integers(0, 2 ** 16))
def test_broadcast_add_grad_reduces_to_operand_shape(shape, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 3)
    y = leaf(rng, *shape)
    w = rng.normal(size=(2, 3))
    T.tsum((x + y) * w).backward()
    assert y.grad.shape == y.shape
    idx = tuple(0 for _ in shape)
    num = numeric_grad(lambda: float(((x.data + y.data) * w).sum()), y.data, idx)
    assert rel_error(float(y.grad[idx]), num) < 1e-6


# ---------------------------------------------------------------- adam

def test_adam_zero_grad_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(learning_rate=0.1)
    adam_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.data, [1.0, -2.0]) and state.step_count == 1


def test_adam_first_step_is_minus_lr_sign():
    p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
    adam_step([p], [np.array([3.0, -0.2, 1e-3])], AdamState(learning_rate=0.01))
    assert np.allclose(p.data, 1.0 - 0.01 * np.array([1.0, -1.0, 1.0]), atol=1e-7)


def test_adam_shape_mismatch():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(DimensionError):
        adam_step([p], [np.ones(3)], AdamState())


def test_adam_minimises_square():
    x = Tensor(np.array(1.0), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        (x * x).backward()
        opt.step()
    assert abs(x.item()) < 0.05
    assert opt.state.step_count == 200
