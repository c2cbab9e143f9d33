"""Autodiff core: forward contracts, gradient rules, and the central
finite-difference oracle every differentiable primitive must match."""

import numpy as np
import pytest

from moebridge import autograd as ag
from moebridge.autograd import Tensor, backward
from moebridge.rng import Rng, mix_key


# ---------------------------------------------------------------------------
# independent oracle: central finite differences on the raw numpy forward

def fd_gradient(value_fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        keep = flat_x[i]
        flat_x[i] = keep + eps
        hi = value_fn()
        flat_x[i] = keep - eps
        lo = value_fn()
        flat_x[i] = keep
        flat_g[i] = (hi - lo) / (2 * eps)
    return grad


def assert_close_grads(analytic, numeric, rel=1e-5, absolute=1e-8):
    err = np.abs(analytic - numeric)
    tol = absolute + rel * np.maximum(np.abs(analytic), np.abs(numeric))
    assert (err <= tol).all(), f"max excess {float((err - tol).max()):.3e}"


def rand(shape, seed, scale=2.0):
    return Rng(mix_key(seed, "fd", *[int(s) for s in np.atleast_1d(shape)])).normals(shape) * scale


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(ag.matmul(eye, b).data, b.data)


def test_matmul_scalar_product_rule():
    a = ag.param([[2.0]])
    b = ag.param([[3.0]])
    out = ag.matmul(a, b)
    assert out.data[0, 0] == 6.0
    backward(ag.tsum(out))
    assert a.grad[0, 0] == 3.0
    assert b.grad[0, 0] == 2.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradient_matches_finite_differences(seed):
    a = ag.param(rand((4, 3), seed))
    b = ag.param(rand((3, 2), seed + 100))
    weights = rand((4, 2), seed + 200, scale=1.0)

    def value():
        return float(((a.data @ b.data) * weights).sum())

    backward(ag.tsum(ag.mul(ag.matmul(a, b), Tensor(weights))))
    assert_close_grads(a.grad, fd_gradient(value, a.data), rel=1e-6)
    assert_close_grads(b.grad, fd_gradient(value, b.data), rel=1e-6)


# ---------------------------------------------------------------------------
# softmax family

def test_softmax_symmetry():
    out = ag.softmax(Tensor([[0.0, 0.0, 0.0]]), axis=1)
    assert np.abs(out.data - 1.0 / 3.0).max() < 1e-15
    assert abs(out.data.sum() - 1.0) < 1e-12


def test_softmax_saturation_is_stable():
    out = ag.softmax(Tensor([[1000.0, 0.0]]), axis=1)
    assert abs(out.data[0, 0] - 1.0) < 1e-12
    assert abs(out.data[0, 1]) < 1e-12


def test_softmax_rows_sum_to_one():
    x = Tensor(rand((6, 9), 3))
    out = ag.softmax(x, axis=1)
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_softmax_gradient_matches_finite_differences(seed):
    x = ag.param(rand(5, seed).reshape(1, 5))
    weights = rand(5, seed + 50, scale=1.0).reshape(1, 5)

    def value():
        e = np.exp(x.data - x.data.max())
        return float((e / e.sum() * weights).sum())

    backward(ag.tsum(ag.mul(ag.softmax(x, axis=1), Tensor(weights))))
    assert_close_grads(x.grad, fd_gradient(value, x.data), rel=1e-6)


def test_log_softmax_matches_log_of_softmax():
    x = Tensor(rand((4, 7), 9))
    assert np.abs(ag.log_softmax(x, axis=1).data
                  - np.log(ag.softmax(x, axis=1).data)).max() < 1e-12


# ---------------------------------------------------------------------------
# gradient-control primitives

def test_stop_gradient_identity_forward():
    x = Tensor([1.0, 2.0, 3.0])
    out = ag.stop_gradient(x)
    assert out.data.tobytes() == x.data.tobytes()


def test_stop_gradient_blocks_flow():
    x = ag.param([1.0, 2.0, 3.0])
    w = ag.param([4.0, 5.0, 6.0])
    backward(ag.tsum(ag.mul(ag.stop_gradient(x), w)))
    assert x.grad is None
    assert np.array_equal(w.grad, x.data)


def test_stop_gradient_idempotent():
    x = ag.param([1.0, -1.0])
    w = ag.param([2.0, 2.0])
    backward(ag.tsum(ag.mul(ag.stop_gradient(ag.stop_gradient(x)), w)))
    assert x.grad is None
    assert np.array_equal(w.grad, x.data)


def test_scale_gradient_one_is_identity_path():
    x1 = ag.param([1.0, 2.0])
    backward(ag.tsum(ag.mul(ag.scale_gradient(x1, 1.0), ag.scale_gradient(x1, 1.0))))
    x2 = ag.param([1.0, 2.0])
    backward(ag.tsum(ag.mul(x2, x2)))
    assert np.array_equal(x1.grad, x2.grad)


def test_scale_gradient_zero_matches_stop_gradient():
    x = ag.param([3.0, -4.0])
    w = ag.param([1.0, 1.0])
    backward(ag.tsum(ag.mul(ag.scale_gradient(x, 0.0), w)))
    assert np.array_equal(x.grad, np.zeros(2))


def test_scale_gradient_tenth_is_exact_two_pass():
    base = rand(6, 21)

    def grads(scale):
        x = ag.param(base.copy())
        w = Tensor(rand(6, 22, scale=1.0))
        backward(ag.tsum(ag.mul(ag.scale_gradient(x, scale), w)))
        return x.grad

    scaled, unscaled = grads(0.1), grads(1.0)
    err = np.abs(scaled - 0.1 * unscaled)
    assert (err <= 1e-15 * np.abs(0.1 * unscaled)).all()


def test_scale_gradient_rejects_non_finite_factor():
    with pytest.raises(ValueError):
        ag.scale_gradient(Tensor([1.0]), float("nan"))


# ---------------------------------------------------------------------------
# backward contracts

def test_backward_sum_gives_ones():
    x = ag.param(rand((3, 4), 2))
    backward(ag.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_self_mse_gives_zero_grads():
    x = ag.param(rand(5, 4))
    loss = ag.mse(x, x)
    assert loss.item() == 0.0
    backward(loss)
    assert np.abs(x.grad).max() == 0.0


def test_backward_rejects_non_scalar():
    x = ag.param(rand((2, 2), 8))
    with pytest.raises(ag.GraphError):
        backward(ag.mul(x, 2.0))


def test_backward_accumulates_additively():
    x = ag.param(rand(4, 5))
    loss = ag.tsum(ag.mul(x, x))
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    assert np.array_equal(x.grad, 2 * once)


@pytest.mark.parametrize("seed", range(3))
def test_composite_ffn_gradient_matches_finite_differences(seed):
    w1 = ag.param(rand((4, 6), seed, scale=0.8))
    w2 = ag.param(rand((6, 4), seed + 10, scale=0.8))
    x = ag.param(rand((3, 4), seed + 20))

    def value():
        h = x.data @ w1.data
        s = 1.0 / (1.0 + np.exp(-h))
        return float(((h * s) @ w2.data).sum())

    backward(ag.tsum(ag.matmul(ag.silu(ag.matmul(x, w1)), w2)))
    for p in (x, w1, w2):
        assert_close_grads(p.grad, fd_gradient(value, p.data))


def test_unreachable_tensor_gets_no_grad():
    x = ag.param(rand(3, 30))
    y = ag.param(rand(3, 31))
    backward(ag.tsum(ag.mul(x, x)))
    assert y.grad is None


# ---------------------------------------------------------------------------
# remaining primitives: contracts plus finite differences

def test_add_sub_mul_forward():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 5.0])
    assert np.array_equal(ag.add(a, b).data, [4.0, 7.0])
    assert np.array_equal(ag.sub(a, b).data, [-2.0, -3.0])
    assert np.array_equal(ag.mul(a, b).data, [3.0, 10.0])


def test_broadcast_mul_gradient():
    gate = ag.param(rand((5, 1), 40))
    x = ag.param(rand((5, 3), 41))

    def value():
        return float((gate.data * x.data).sum())

    backward(ag.tsum(ag.mul(gate, x)))
    assert_close_grads(gate.grad, fd_gradient(value, gate.data))
    assert_close_grads(x.grad, fd_gradient(value, x.data))


def test_silu_known_values():
    x = Tensor([0.0, 100.0])
    out = ag.silu(x)
    assert out.data[0] == 0.0
    assert abs(out.data[1] - 100.0) < 1e-12


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((3, 64)))
    loss = ag.cross_entropy(logits, np.array([5, 9, 63]))
    assert abs(loss.item() - np.log(64.0)) < 1e-12


def test_cross_entropy_matches_direct_log_prob_sum():
    rng = Rng(mix_key(3, "ce"))
    logits_np = rng.normals((6, 10)) * 2
    targets = np.array([rng.randint(10) for _ in range(6)])
    logits = ag.param(logits_np.copy())
    loss = ag.cross_entropy(logits, targets)
    e = np.exp(logits_np - logits_np.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    direct = -np.mean([np.log(p[i, t]) for i, t in enumerate(targets)])
    assert abs(loss.item() - direct) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_cross_entropy_gradient_matches_finite_differences(seed):
    logits = ag.param(rand((4, 6), seed + 60))
    targets = np.array([0, 2, 5, 3])

    def value():
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-np.mean(ls[np.arange(4), targets]))

    backward(ag.cross_entropy(logits, targets))
    assert_close_grads(logits.grad, fd_gradient(value, logits.data))


def test_mse_gradient_matches_finite_differences():
    pred = ag.param(rand((3, 4), 70))
    target = rand((3, 4), 71)

    def value():
        return float(((pred.data - target) ** 2).mean())

    backward(ag.mse(pred, target))
    assert_close_grads(pred.grad, fd_gradient(value, pred.data))


def test_mean_and_sum_reductions():
    x = ag.param(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert ag.tsum(x).item() == 15.0
    assert ag.tmean(x).item() == 2.5
    assert np.array_equal(ag.tsum(x, axis=0).data, [3.0, 5.0, 7.0])
    assert np.array_equal(ag.tmean(x, axis=1).data, [1.0, 4.0])
    backward(ag.tmean(x))
    assert np.abs(x.grad - 1.0 / 6.0).max() < 1e-15


def test_top_k_values_and_tie_break():
    x = Tensor([[3.0, 9.0, 9.0, 1.0]])
    values, idx = ag.top_k(x, 2)
    assert idx.tolist() == [[1, 2]]  # tie broken to lower index
    assert values.data.tolist() == [[9.0, 9.0]]


def test_top_k_gathered_values_differentiable():
    x = ag.param(rand((3, 5), 80))

    def value():
        part = np.sort(x.data, axis=1)[:, -2:]
        return float(part.sum())

    values, _ = ag.top_k(x, 2)
    backward(ag.tsum(values))
    assert_close_grads(x.grad, fd_gradient(value, x.data))


def test_concat_and_split_gradients():
    a = ag.param(rand((2, 3), 90))
    b = ag.param(rand((4, 3), 91))
    out = ag.concat([a, b], axis=0)
    assert out.shape == (6, 3)
    backward(ag.tsum(ag.mul(out, out)))
    assert_close_grads(a.grad, 2 * a.data, rel=1e-12)
    assert_close_grads(b.grad, 2 * b.data, rel=1e-12)


def test_take_rows_and_scatter_rows_roundtrip():
    x = ag.param(rand((5, 3), 95))
    rows = np.array([4, 0, 2])
    taken = ag.take_rows(x, rows, unique=True)
    assert np.array_equal(taken.data, x.data[rows])
    back = ag.scatter_rows(taken, rows, 5, unique=True)
    backward(ag.tsum(ag.mul(back, back)))
    expect = 2 * x.data.copy()
    expect[[1, 3]] = 0.0
    assert_close_grads(x.grad, expect, rel=1e-12)


def test_take_rows_accumulates_repeated_indices():
    x = ag.param(rand((3, 2), 96))
    taken = ag.take_rows(x, np.array([1, 1, 0]))
    backward(ag.tsum(taken))
    assert np.array_equal(x.grad, np.array([[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]))


def test_embedding_lookup_and_gradient():
    table = ag.param(rand((7, 4), 97))
    ids = np.array([2, 2, 5])
    out = ag.embedding(table, ids)
    assert np.array_equal(out.data, table.data[ids])
    backward(ag.tsum(out))
    expect = np.zeros((7, 4))
    expect[2] = 2.0
    expect[5] = 1.0
    assert np.array_equal(table.grad, expect)


def test_rms_norm_gradient_matches_finite_differences():
    x = ag.param(rand((3, 6), 98))
    weights = rand((3, 6), 99, scale=1.0)

    def value():
        inv = 1.0 / np.sqrt((x.data ** 2).mean(axis=-1, keepdims=True) + 1e-6)
        return float((x.data * inv * weights).sum())

    backward(ag.tsum(ag.mul(ag.rms_norm(x), Tensor(weights))))
    assert_close_grads(x.grad, fd_gradient(value, x.data))


def test_bmm_and_transpose_gradients():
    a = ag.param(rand((2, 3, 4), 101, scale=1.0))
    b = ag.param(rand((2, 4, 5), 102, scale=1.0))

    def value():
        return float(np.matmul(a.data, b.data).sum())

    backward(ag.tsum(ag.bmm(a, b)))
    assert_close_grads(a.grad, fd_gradient(value, a.data), rel=1e-6)
    assert_close_grads(b.grad, fd_gradient(value, b.data), rel=1e-6)
    t = ag.transpose_last(Tensor(a.data))
    assert np.array_equal(t.data, np.swapaxes(a.data, -1, -2))


# ---------------------------------------------------------------------------
# determinism and no_grad

def test_bitwise_determinism_across_runs():
    def run():
        rng = Rng(mix_key(5, "det"))
        w = ag.param(rng.normals((6, 6)))
        x = Tensor(rng.normals((4, 6)))
        out = ag.tsum(ag.softmax(ag.matmul(x, w), axis=1))
        backward(out)
        return out.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_no_grad_suppresses_graph():
    x = ag.param(rand(3, 110))
    with ag.no_grad():
        out = ag.mul(x, x)
    assert not out.requires_grad
    assert out._backprop is None
