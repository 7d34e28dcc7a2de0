import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtgbid.errors import BoundsError, ContractError, DeterminismError, MissingNodeError, ShapeError
from rtgbid.numcore import (
    Adam, OptimizerState, Tape, Tensor, adam_step, backward, grad_check, ops, tensor_op,
)


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i][j] += a[i][p] * b[p][j]
    return out


def naive_softmax(row):
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    s = sum(e)
    return [v / s for v in e]


def naive_layernorm(row, gamma, beta, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gamma, beta)]


def naive_gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_matmul_identity():
    out = tensor_op("matmul", Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.values, [[3], [4]])


def test_softmax_symmetric():
    out = tensor_op("softmax_lastdim", Tensor([0, 0]))
    np.testing.assert_allclose(out.values, [0.5, 0.5])


def test_matmul_matches_triple_loop(rng):
    a = rng.normal(size=(4, 3)).astype(np.float32)
    b = rng.normal(size=(3, 2)).astype(np.float32)
    ref = naive_matmul(a.astype(float).tolist(), b.astype(float).tolist())
    out = ops.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.values, ref, atol=1e-6)


def test_batched_matmul_matches_loop(rng):
    a = rng.normal(size=(2, 3, 4)).astype(np.float32)
    b = rng.normal(size=(2, 4, 5)).astype(np.float32)
    out = ops.matmul(Tensor(a), Tensor(b)).values
    for i in range(2):
        ref = naive_matmul(a[i].astype(float).tolist(), b[i].astype(float).tolist())
        np.testing.assert_allclose(out[i], ref, atol=1e-6)


def test_elementwise_ops_match_reference(rng):
    x = rng.normal(size=(3, 5)).astype(np.float32)
    y = rng.normal(size=(3, 5)).astype(np.float32)
    X, Y = Tensor(x), Tensor(y)
    flat_x = x.astype(float).ravel().tolist()
    flat_y = y.astype(float).ravel().tolist()
    np.testing.assert_allclose(ops.add(X, Y).values.ravel(), [a + b for a, b in zip(flat_x, flat_y)], atol=1e-6)
    np.testing.assert_allclose(ops.mul(X, Y).values.ravel(), [a * b for a, b in zip(flat_x, flat_y)], atol=1e-6)
    np.testing.assert_allclose(ops.relu(X).values.ravel(), [max(a, 0.0) for a in flat_x], atol=1e-6)
    np.testing.assert_allclose(ops.gelu(X).values.ravel(), [naive_gelu(a) for a in flat_x], atol=1e-6)


def test_softmax_and_layernorm_match_reference(rng):
    x = rng.normal(size=(4, 6)).astype(np.float32)
    sm = ops.softmax_lastdim(Tensor(x)).values
    for i in range(4):
        np.testing.assert_allclose(sm[i], naive_softmax(x[i].astype(float).tolist()), atol=1e-6)
    np.testing.assert_allclose(sm.sum(axis=-1), 1.0, atol=1e-5)

    gamma = rng.normal(size=6).astype(np.float32)
    beta = rng.normal(size=6).astype(np.float32)
    ln = ops.layernorm_lastdim(Tensor(x), Tensor(gamma), Tensor(beta)).values
    for i in range(4):
        ref = naive_layernorm(x[i].astype(float).tolist(), gamma.tolist(), beta.tolist())
        np.testing.assert_allclose(ln[i], ref, atol=1e-5)


def test_masked_softmax_zeroes_excluded_entries():
    x = Tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    mask = np.array([[True, True, False], [False, False, False]])
    out = ops.softmax_lastdim(x, mask).values
    assert out[0, 2] == 0.0
    np.testing.assert_allclose(out[0, :2], naive_softmax([1.0, 2.0]), atol=1e-6)
    np.testing.assert_array_equal(out[1], 0.0)


def test_embed_slice_concat_reference(rng):
    table = rng.normal(size=(5, 3)).astype(np.float32)
    idx = np.array([[4, 0], [2, 2]])
    out = ops.embed_lookup(Tensor(table), idx).values
    for i in range(2):
        for j in range(2):
            np.testing.assert_array_equal(out[i, j], table[idx[i, j]])
    x = rng.normal(size=(2, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(ops.slice(Tensor(x), 1, 1, None, 3).values, x[:, 1::3])
    parts = [Tensor(x[:, :2]), Tensor(x[:, 2:])]
    np.testing.assert_array_equal(ops.concat(parts, axis=1).values, x)


def test_shape_errors_name_both_dims():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(BoundsError):
        ops.embed_lookup(Tensor(np.ones((3, 2))), np.array([3]))


def test_backward_of_sum_is_ones(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        root = ops.sum(x)
    backward(tape, root)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_of_mse_at_minimum_is_zero(rng):
    v = rng.normal(size=(5,))
    x = Tensor(v, requires_grad=True)
    y = Tensor(v)
    with Tape() as tape:
        d = ops.sub(x, y)
        root = ops.mean(ops.mul(d, d))
    backward(tape, root)
    np.testing.assert_array_equal(x.grad, np.zeros(5))


def test_backward_accumulates_over_multiple_uses():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        root = ops.sum(ops.add(ops.mul(x, x), x))
    backward(tape, root)
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(ContractError):
        backward(tape, y)
    with pytest.raises(MissingNodeError):
        backward(Tape(), ops.sum(Tensor(np.ones(2))))


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ops.mul(x, 2.0)
    assert y.node_id is None and not y.requires_grad


def _composite_loss(params, x):
    w1, b1, g, bt, w2 = params
    h = ops.bias_add(ops.matmul(x, w1), b1)
    h = ops.layernorm_lastdim(h, g, bt)
    h = ops.gelu(h)
    att = ops.softmax_lastdim(ops.matmul(h, ops.transpose(h, (1, 0))))
    h = ops.matmul(att, h)
    out = ops.sigmoid(ops.matmul(h, w2))
    return ops.mean(ops.mul(out, out))


def test_composite_backward_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    params = [
        Tensor(rng.normal(size=(3, 5)), requires_grad=True, name="w1"),
        Tensor(rng.normal(size=5) * 0.1, requires_grad=True, name="b1"),
        Tensor(1 + 0.1 * rng.normal(size=5), requires_grad=True, name="g"),
        Tensor(0.1 * rng.normal(size=5), requires_grad=True, name="bt"),
        Tensor(rng.normal(size=(5, 2)), requires_grad=True, name="w2"),
    ]
    report = grad_check(lambda: _composite_loss(params, x), params, h=1e-3, tol=1e-3)
    assert report.ok, report.max_rel_error


def test_grad_check_quadratic_is_exact():
    w = Tensor([0.5, -1.0, 2.0], requires_grad=True, name="w")
    target = Tensor([1.0, 1.0, 1.0])

    def loss():
        d = ops.sub(w, target)
        return ops.sum(ops.mul(d, d))

    report = grad_check(loss, [w], h=1e-2, tol=1e-6)
    assert report.ok, report.max_rel_error


def test_grad_check_rejects_nondeterministic_loss():
    w = Tensor([1.0], requires_grad=True, name="w")
    noise = np.random.default_rng(1)
    with pytest.raises(DeterminismError):
        grad_check(lambda: ops.add(w, float(noise.normal())), [w])


def test_adam_zero_gradient_leaves_params_unchanged():
    p = Tensor([1.0, -2.0], requires_grad=True, name="p")
    p.grad = np.zeros(2, dtype=np.float32)
    state = OptimizerState(learning_rate=0.1)
    adam_step(state, {"p": p})
    np.testing.assert_array_equal(p.values, [1.0, -2.0])
    assert p.grad is None and state.step_count == 1


def test_adam_first_step_moves_by_learning_rate():
    # t=1: m_hat = g, v_hat = g^2, update = g / (|g| + eps) ~= 1
    p = Tensor([0.0], requires_grad=True, name="p")
    p.grad = np.ones(1, dtype=np.float32)
    adam_step(OptimizerState(learning_rate=0.1), [p])
    assert p.values[0] == pytest.approx(-0.1, abs=1e-6)


def test_adam_converges_on_quadratic():
    w = Tensor([0.0], requires_grad=True, name="w")
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        with Tape() as tape:
            d = ops.add(w, -3.0)
            loss = ops.sum(ops.mul(d, d))
        backward(tape, loss)
        opt.step()
    assert abs(w.values[0] - 3.0) < 0.05
    assert opt.state.step_count == 100


def test_adam_missing_grad_names_parameter():
    p = Tensor([1.0], requires_grad=True, name="lonely")
    with pytest.raises(ContractError, match="lonely"):
        adam_step(OptimizerState(), [p])


def test_tape_replay_is_bit_identical(rng):
    data = rng.normal(size=(4, 3))

    def run():
        local = np.random.default_rng(7)
        params = [
            Tensor(local.normal(size=(3, 5)), requires_grad=True, name="w1"),
            Tensor(local.normal(size=5), requires_grad=True, name="b1"),
            Tensor(np.ones(5), requires_grad=True, name="g"),
            Tensor(np.zeros(5), requires_grad=True, name="bt"),
            Tensor(local.normal(size=(5, 2)), requires_grad=True, name="w2"),
        ]
        with Tape() as tape:
            loss = _composite_loss(params, Tensor(data))
        backward(tape, loss)
        return loss.values.tobytes(), [p.grad.tobytes() for p in params]

    assert run() == run()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_property_against_loop(n, k, m, seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(n, k)).astype(np.float32)
    b = r.normal(size=(k, m)).astype(np.float32)
    ref = naive_matmul(a.astype(float).tolist(), b.astype(float).tolist())
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).values, ref, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(3, n))
    out = ops.softmax_lastdim(Tensor(x)).values
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-5)
