"""Autodiff correctness: every op against central finite differences at
float64, plus tape bookkeeping (fan-out accumulation, freezing, shape
errors, aliasing safety)."""

import numpy as np
import pytest

from conftest import central_diff, check_gradients, rel_err, tape_value_and_grads
from lorabench import tensor as T
from lorabench.errors import ContractError, ShapeError


def _weighted_sum(out, rng):
    # Fold a fixed random weighting in so the upstream gradient is not
    # uniform; the weights themselves are constants.
    w = T.Tensor(rng.normal(size=out.shape))
    return T.sum_all(T.mul(out, w))


SEEDS = [0, 1, 2, 3, 4]


@pytest.mark.parametrize("seed", SEEDS)
def test_add_sub_mul_scale_grads(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    check_gradients(lambda ts: _weighted_sum(T.add(ts[0], ts[1]), np.random.default_rng(99)), [a, b])
    check_gradients(lambda ts: _weighted_sum(T.sub(ts[0], ts[1]), np.random.default_rng(99)), [a, b])
    check_gradients(lambda ts: _weighted_sum(T.mul(ts[0], ts[1]), np.random.default_rng(99)), [a, b])
    check_gradients(lambda ts: _weighted_sum(T.scale(ts[0], -1.7), np.random.default_rng(99)), [a])


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gelu_log_grads(seed):
    rng = np.random.default_rng(seed)
    # relu: keep inputs away from the kink at 0
    x = rng.uniform(0.2, 1.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5))
    check_gradients(lambda ts: _weighted_sum(T.relu(ts[0]), np.random.default_rng(7)), [x])
    y = rng.normal(size=(4, 5))
    check_gradients(lambda ts: _weighted_sum(T.gelu(ts[0]), np.random.default_rng(7)), [y])
    z = rng.uniform(0.5, 2.0, size=(4, 5))
    check_gradients(lambda ts: _weighted_sum(T.log(ts[0]), np.random.default_rng(7)), [z])


@pytest.mark.parametrize("seed", SEEDS)
def test_shape_op_grads(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 6))
    check_gradients(lambda ts: _weighted_sum(T.reshape(ts[0], (3, 4)), np.random.default_rng(7)), [a])
    b = rng.normal(size=(2, 3, 4))
    check_gradients(lambda ts: _weighted_sum(T.permute(ts[0], (2, 0, 1)), np.random.default_rng(7)), [b])
    c = rng.normal(size=(3, 5))
    check_gradients(lambda ts: _weighted_sum(T.transpose2d(ts[0]), np.random.default_rng(7)), [c])
    d = rng.normal(size=(3, 4))
    check_gradients(lambda ts: _weighted_sum(T.broadcast_batch(ts[0], 5), np.random.default_rng(7)), [d])


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grads_all_rank_forms(seed):
    rng = np.random.default_rng(seed)
    a2, b2 = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    check_gradients(lambda ts: _weighted_sum(T.matmul(ts[0], ts[1]), np.random.default_rng(7)), [a2, b2])
    a3 = rng.normal(size=(2, 3, 4))
    check_gradients(lambda ts: _weighted_sum(T.matmul(ts[0], ts[1]), np.random.default_rng(7)), [a3, b2])
    b3 = rng.normal(size=(2, 4, 5))
    check_gradients(lambda ts: _weighted_sum(T.matmul(ts[0], ts[1]), np.random.default_rng(7)), [a3, b3])


@pytest.mark.parametrize("seed", SEEDS)
def test_embed_softmax_layernorm_grads(seed):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(7, 4))
    ids = rng.integers(0, 7, size=(2, 5))
    check_gradients(lambda ts: _weighted_sum(T.embed(ts[0], ids), np.random.default_rng(7)), [table])

    s = rng.normal(size=(2, 4, 4))
    check_gradients(lambda ts: _weighted_sum(T.softmax_last(ts[0], causal=True), np.random.default_rng(7)), [s])
    r = rng.normal(size=(5, 7))
    check_gradients(lambda ts: _weighted_sum(T.softmax_rows(ts[0]), np.random.default_rng(7)), [r])

    x = rng.normal(size=(4, 6))
    g = rng.normal(size=6)
    b = rng.normal(size=6)
    check_gradients(
        lambda ts: _weighted_sum(T.layernorm(ts[0], ts[1], ts[2]), np.random.default_rng(7)),
        [x, g, b], tol=1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_grads(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 9))
    targets = rng.integers(0, 9, size=6)
    check_gradients(lambda ts: T.cross_entropy(ts[0], targets), [logits])
    mask = np.array([1, 0, 1, 1, 0, 1], dtype=np.float64)
    check_gradients(lambda ts: T.cross_entropy(ts[0], targets, mask), [logits])


def test_sum_all_grad_is_ones():
    _, grads = tape_value_and_grads(lambda ts: T.sum_all(ts[0]), [np.arange(6.0).reshape(2, 3)])
    assert np.array_equal(grads[0], np.ones((2, 3)))


def test_fanout_accumulates():
    # x used twice: d/dx sum(x*x + 3x) = 2x + 3
    x = np.array([1.0, -2.0, 0.5])

    def build(ts):
        return T.sum_all(T.add(T.mul(ts[0], ts[0]), T.scale(ts[0], 3.0)))

    _, grads = tape_value_and_grads(build, [x])
    assert np.allclose(grads[0], 2 * x + 3, atol=1e-12)


def test_add_self_aliasing():
    # add(x, x) hands the same gradient array to both slots; the second
    # deposit must not double through shared storage.
    x = np.array([1.0, 2.0])
    _, grads = tape_value_and_grads(lambda ts: T.sum_all(T.add(ts[0], ts[0])), [x])
    assert np.array_equal(grads[0], np.array([2.0, 2.0]))


def test_frozen_tensor_gets_no_grad():
    a = T.Tensor(np.ones((2, 2)), requires_grad=True)
    w = T.Tensor(np.full((2, 2), 3.0), requires_grad=False)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(a, w))
        tape.backward(loss)
    assert w.grad is None
    assert np.array_equal(a.grad, np.full((2, 2), 3.0))


def test_no_requires_grad_records_nothing():
    a = T.Tensor(np.ones(3))
    b = T.Tensor(np.ones(3))
    with T.Tape() as tape:
        T.sum_all(T.add(a, b))
    assert len(tape) == 0


def test_backward_requires_scalar_and_same_tape():
    a = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        out = T.scale(a, 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)
        loss = T.sum_all(out)
    with T.Tape() as other:
        with pytest.raises(ContractError):
            other.backward(loss)
    with pytest.raises(ContractError):
        T.backward(T.Tensor(np.zeros(())))  # never touched a tape


def test_shape_errors():
    a = T.Tensor(np.ones((2, 3)))
    b = T.Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        T.add(a, b)
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.reshape(a, (4, 2))
    with pytest.raises(ShapeError):
        T.permute(a, (0, 0))
    with pytest.raises(ShapeError):
        T.transpose2d(T.Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.softmax_last(T.Tensor(np.ones((2, 3))), causal=True)
    with pytest.raises(ShapeError):
        T.cross_entropy(T.Tensor(np.ones((2, 3))), np.array([0, 1, 2]))


def test_embed_and_ce_range_checks():
    with pytest.raises(ContractError):
        T.embed(T.Tensor(np.ones((4, 2))), np.array([0, 4]))
    with pytest.raises(ContractError):
        T.cross_entropy(T.Tensor(np.ones((2, 3))), np.array([0, 3]))
    with pytest.raises(ContractError):
        T.cross_entropy(T.Tensor(np.ones((2, 3))), np.array([0, 1]), np.zeros(2))


def test_softmax_causal_masks_future():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(1, 4, 4))
    att = T.softmax_last(T.Tensor(s), causal=True).data
    assert np.all(att[0][np.triu_indices(4, k=1)] == 0.0)
    assert np.allclose(att.sum(axis=-1), 1.0, atol=1e-6)


def test_float32_pipeline_stays_float32():
    a = T.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    b = T.Tensor(np.ones((2, 2), dtype=np.float32))
    with T.Tape() as tape:
        out = T.sum_all(T.gelu(T.matmul(a, b)))
        tape.backward(out)
    assert out.dtype == np.float32
    assert a.grad.dtype == np.float32


def test_same_inputs_same_bits():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4)).astype(np.float32)

    def run():
        t = T.Tensor(x.copy(), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.softmax_last(T.matmul(t, t), causal=True))
            tape.backward(loss)
        return loss.data.copy(), t.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()
