import math

import numpy as np
import pytest

from redecode import tensor as T
from redecode.tensor import ContractError, DomainError, Rng, ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------------ forward


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_identity_and_zero(rng):
    a = rng.normal(size=(2, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    assert not T.matmul(Tensor(np.zeros((2, 2))), Tensor(a)).data.any()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_unary_values():
    assert T.tanh(Tensor([0.0])).data[0] == 0.0
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert abs(T.tanh(Tensor([1.0])).data[0] - 0.76159) < 1e-5


def test_sigmoid_saturates_without_overflow():
    with np.errstate(all="raise"):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-2.0]))


def test_binary_ops_and_no_broadcasting():
    x = Tensor([1.0, 2.0])
    assert T.add(x, Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    assert np.array_equal(T.add(x, Tensor([0.0, 0.0])).data, x.data)
    assert np.array_equal(T.mul(x, Tensor([1.0, 1.0])).data, x.data)
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_reductions():
    assert T.mean(Tensor([2.0, 4.0])).item() == 3.0
    assert T.sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert T.mean(Tensor([[1.0, 3.0], [3.0, 5.0]]), axis=0).data.tolist() == [2.0, 4.0]
    # empty tensors cannot be built, so an empty reduction never starts
    with pytest.raises(ShapeError):
        T.sum(Tensor(np.zeros((0,))))
    with pytest.raises(ContractError):
        T.reduce(Tensor([1.0]), "max")


def test_softmax_values():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(3, 5))
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + 17.5)).data, atol=1e-12)


def test_softmax_large_inputs_are_stochastic(rng):
    x = rng.uniform(-1e3, 1e3, size=(50, 7))
    y = T.softmax(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_mask_zeroes_entries_and_rejects_empty():
    y = T.softmax(Tensor([[1.0, 5.0, 2.0]]), np.array([[True, False, True]])).data
    assert y[0, 1] == 0.0
    assert abs(y.sum() - 1.0) < 1e-12
    with pytest.raises(ContractError):
        T.softmax(Tensor([[1.0, 2.0]]), np.array([[False, False]]))


def test_cross_entropy_cases():
    probs = Tensor(np.full((3, 4), 0.25))
    loss, empty = T.cross_entropy_masked(probs, [0, 1, 3], [1, 1, 1])
    assert abs(loss.item() - math.log(4)) < 1e-12 and not empty
    onehot = Tensor(np.eye(4)[[2, 1]])
    assert T.cross_entropy_masked(onehot, [2, 1], [1, 1])[0].item() == 0.0


def test_cross_entropy_empty_mask_flag_and_zero_grad():
    p = leaf(np.full((2, 3), 1 / 3))
    loss, empty = T.cross_entropy_masked(p, [0, 1], [0, 0])
    assert empty and loss.item() == 0.0
    T.backward(loss)
    assert not p.grad.any()


def test_cross_entropy_floor():
    loss, _ = T.cross_entropy_masked(Tensor([[0.0, 1.0]]), [0], [1])
    assert abs(loss.item() + math.log(1e-12)) < 1e-9


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(ContractError):
        T.cross_entropy_masked(Tensor(np.full((1, 3), 1 / 3)), [3], [1])


def test_cosine_cases(rng):
    v = rng.normal(size=(1, 4))
    assert abs(T.cosine_similarity(Tensor(v), Tensor(v)).data[0] - 1.0) < 1e-12
    assert T.cosine_similarity(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).data[0] == 0.0
    assert abs(T.cosine_similarity(Tensor([[1.0, 0.0]]), Tensor([[1.0, 1.0]])).data[0] - 0.70711) < 1e-5


def test_cosine_zero_norm_is_zero_with_zero_grad():
    u, v = leaf([[0.0, 0.0]]), leaf([[1.0, 2.0]])
    out = T.sum(T.cosine_similarity(u, v))
    assert out.item() == 0.0
    T.backward(out)
    assert not u.grad.any() and not v.grad.any()


# ----------------------------------------------------------------- backward


def test_grad_of_sum_of_squares(rng):
    x = leaf(rng.normal(size=(3, 2)))
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)
    assert T.finite_diff_check(lambda: T.sum(T.mul(x, x)), x) < 1e-4


def test_fan_out_accumulates_exactly():
    x = leaf([1.5, -2.0])
    T.backward(T.sum(T.add(x, x)))
    assert x.grad.tolist() == [2.0, 2.0]


def test_constant_loss_gives_zero_grad(rng):
    x = leaf(rng.normal(size=3))
    y = leaf(rng.normal(size=3))
    T.backward(T.sum(T.mul(y, y)))
    assert x.grad is None or not x.grad.any()


def test_softmax_cross_entropy_grad_is_p_minus_onehot(rng):
    logits = leaf(rng.normal(size=(4, 5)))
    targets = np.array([0, 3, 2, 4])
    p = T.softmax(logits)
    loss, _ = T.cross_entropy_masked(p, targets, np.ones(4), weights=np.ones(4))
    T.backward(loss)
    expect = p.data - np.eye(5)[targets]
    np.testing.assert_allclose(logits.grad, expect, atol=1e-6)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(T.mul(leaf([1.0, 2.0]), leaf([3.0, 4.0])))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()
    assert T.is_grad_enabled()


def test_topological_order_inputs_first(rng):
    x = leaf(rng.normal(size=2))
    a = T.tanh(x)
    b = T.mul(a, x)
    loss = T.sum(T.add(a, b))
    order = T.topological_order(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_forward_backward_bit_identical(rng):
    data = rng.normal(size=(3, 3))

    def run():
        x = leaf(data.copy())
        loss = T.sum(T.tanh(T.matmul(x, x)))
        T.backward(loss)
        return loss.item(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2 and np.array_equal(g1, g2)


# ------------------------------------------------------------- grad checks

OPS = {
    "matmul": lambda a, b: T.sum(T.tanh(T.matmul(a, T.transpose(b)))),
    "add": lambda a, b: T.sum(T.mul(T.add(a, b), a)),
    "sub": lambda a, b: T.sum(T.mul(T.sub(a, b), b)),
    "mul": lambda a, b: T.sum(T.mul(a, b)),
    "tanh": lambda a, b: T.sum(T.mul(T.tanh(a), b)),
    "sigmoid": lambda a, b: T.sum(T.mul(T.sigmoid(a), b)),
    "exp": lambda a, b: T.sum(T.mul(T.exp(a), b)),
    "log": lambda a, b: T.sum(T.mul(T.log(T.exp(a)), b)),
    "negate": lambda a, b: T.sum(T.mul(T.negate(a), b)),
    "mean": lambda a, b: T.mean(T.mul(a, b)),
    "softmax": lambda a, b: T.sum(T.mul(T.softmax(a), b)),
    "cosine": lambda a, b: T.sum(T.cosine_similarity(a, b)),
    "concat": lambda a, b: T.sum(T.tanh(T.concat([a, b], axis=1))),
    "stack": lambda a, b: T.sum(T.mul(T.stack([a, b], axis=0), T.stack([b, a], axis=0))),
    "reshape": lambda a, b: T.sum(T.mul(T.reshape(a, (-1,)), T.reshape(b, (-1,)))),
    "cross_entropy": lambda a, b: T.cross_entropy_masked(
        T.softmax(a), np.arange(a.shape[0]) % a.shape[1], np.ones(a.shape[0])
    )[0],
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(name, seed):
    g = np.random.default_rng(seed)
    shape = (int(g.integers(1, 9)), int(g.integers(1, 9)))
    a, b = leaf(g.normal(size=shape)), leaf(g.normal(size=shape))
    f = OPS[name]
    assert T.finite_diff_check(lambda: f(a, b), a) <= 1e-3
    assert T.finite_diff_check(lambda: f(a, b), b) <= 1e-3


def test_broadcast_helper_gradients(rng):
    x = leaf(rng.normal(size=(3, 4)))
    bias = leaf(rng.normal(size=4))
    w = rng.normal(size=3)
    mask = np.array([True, False, True])
    other = leaf(rng.normal(size=(3, 4)))

    def f():
        return T.sum(T.tanh(T.blend(mask, T.scale_rows(T.add_bias(x, bias), w), other)))

    for t in (x, bias, other):
        assert T.finite_diff_check(f, t) <= 1e-3


def test_finite_diff_linear_exact(rng):
    x = leaf(rng.normal(size=5))
    assert T.finite_diff_check(lambda: T.sum(x), x) < 1e-9


def test_finite_diff_detects_injected_fault(rng):
    x = leaf(rng.normal(size=4))
    T.backward(T.sum(T.mul(x, x)))
    bad = x.grad.copy()
    bad[2] += 1.0
    assert T.finite_diff_check(lambda: T.sum(T.mul(x, x)), x, analytic=bad) >= 0.5


def test_finite_diff_batched_matches_loop(rng):
    x = leaf(rng.normal(size=(2, 3)))
    loop = T.finite_diff_check(lambda: T.sum(T.tanh(x)), x)
    batched = T.finite_diff_check(
        lambda: T.sum(T.tanh(x)), x, batched=lambda stack: np.tanh(stack).sum(axis=(1, 2))
    )
    assert abs(loop - batched) < 1e-9


def test_finite_diff_propagates_non_finite():
    x = leaf([1.0])
    with pytest.raises((FloatingPointError, DomainError)):
        T.finite_diff_check(lambda: T.log(T.sub(x, Tensor([1.0]))), x, analytic=np.zeros(1))


# -------------------------------------------------------------------- init


def test_xavier_bounds_and_determinism():
    a = T.xavier_init((100, 100), Rng(3))
    b = T.xavier_init((100, 100), Rng(3))
    bound = math.sqrt(6 / 200)
    assert np.array_equal(a.data, b.data)
    assert np.abs(a.data).max() <= bound
    assert abs(a.data.mean()) <= 0.05 * bound


def test_xavier_rejects_zero_dim():
    with pytest.raises(ShapeError):
        T.xavier_init((0, 3), Rng(0))


def test_rng_streams_are_reproducible():
    assert np.array_equal(Rng([1, 2]).normal((4,)), Rng([1, 2]).normal((4,)))
    assert not np.array_equal(Rng(1).normal((4,)), Rng(2).normal((4,)))
