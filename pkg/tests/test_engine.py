import math

import numpy as np
import pytest

from caslm import engine as E
from caslm.engine import ContractError, DimensionError, NonFiniteError, Tape, Tensor
from caslm.gradcheck import check_gradients, projected

SEEDS = range(5)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def assert_grads(f, tensors, tol=1e-6):
    errs = check_gradients(f, tensors)
    assert max(errs.values()) < tol, errs


# --- forward examples ------------------------------------------------------


def test_matmul_identity_and_hand_value():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(E.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert E.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        E.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(E.softmax(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4], atol=1e-15)
    np.testing.assert_allclose(E.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    np.testing.assert_array_equal(E.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_rows_sum_to_one_and_positive(rng):
    for _ in range(20):
        x = Tensor(rng.normal(0, 10, (5, 17)))
        p = E.softmax(x, axis=-1).data
        assert np.all(p > 0)
        assert np.max(np.abs(p.sum(-1) - 1.0)) < 1e-12


def test_cross_entropy_examples(rng):
    uniform = Tensor(np.full((4, 10), -math.log(10)))
    assert abs(E.cross_entropy(uniform, [0, 3, 9, 2]).item() - 2.302585092994046) < 1e-12
    onehot = np.full((2, 3), -50.0)
    onehot[[0, 1], [1, 2]] = 0.0
    assert E.cross_entropy(Tensor(onehot), [1, 2]).item() == 0.0

    logp = E.log_softmax(Tensor(rng.normal(size=(5, 7)))).data
    targets = rng.integers(0, 7, 5)
    total = 0.0
    for t in range(5):
        total += -logp[t][targets[t]]
    assert abs(E.cross_entropy(Tensor(logp), targets).item() - total / 5) < 1e-12


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        E.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_examples():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = E.sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = E.sum(x * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_contracts():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(ContractError):
        tape.backward(y)
    with Tape() as other:
        loss = E.sum(x)
    with pytest.raises(ContractError):
        tape.backward(loss)
    del other


def test_unreachable_leaf_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        loss = E.sum(x * x)
        _ = E.sum(z * z)
    tape.backward(loss)
    np.testing.assert_array_equal(z.grad, [0.0])


def test_shared_input_accumulates():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = E.sum(E.add(E.mul(x, x), x))
    tape.backward(loss)
    assert x.grad.tolist() == [7.0]


def test_ops_outside_tape_record_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        pass
    _ = E.sum(x * x)
    assert len(tape) == 0


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        E.log(Tensor([-1.0]))


def test_dropout_all_ones_mask_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(E.dropout(x, np.ones((3, 4))).data, x.data)


def test_dropout_mask_is_seeded_and_scaled():
    a = E.dropout_mask(np.random.default_rng(3), (100, 100), 0.25)
    b = E.dropout_mask(np.random.default_rng(3), (100, 100), 0.25)
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.75}
    assert abs((a == 0).mean() - 0.25) < 0.02


def test_embedding_rejects_bad_ids():
    with pytest.raises(IndexError):
        E.embedding(Tensor(np.zeros((4, 2))), [0, 4])


def test_forward_is_bit_deterministic(rng):
    w = param(rng, 6, 6)
    x = Tensor(rng.normal(size=(2, 3, 6)))

    def run():
        with Tape():
            h = E.layer_norm(E.gelu(E.matmul(x, w)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
            return E.log_softmax(h).data

    np.testing.assert_array_equal(run(), run())


# --- finite-difference checks on every differentiable op -------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    assert_grads(projected(lambda: E.matmul(a, b), rng), [a, b])
    a3, b3 = param(rng, 2, 3, 4), param(rng, 2, 4, 5)
    assert_grads(projected(lambda: E.matmul(a3, b3), rng), [a3, b3])
    assert_grads(projected(lambda: E.matmul(a3, b), rng), [a3, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_elementwise(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 3, 4), param(rng, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    cases = [
        (lambda: E.add(a, b), [a, b]),
        (lambda: E.sub(a, b), [a, b]),
        (lambda: E.mul(a, b), [a, b]),
        (lambda: E.scale(a, -1.7), [a]),
        (lambda: E.exp(a), [a]),
        (lambda: E.log(pos), [pos]),
        (lambda: E.tanh(a), [a]),
        (lambda: E.sigmoid(a), [a]),
        (lambda: E.gelu(a), [a]),
        (lambda: E.dropout(a, E.dropout_mask(np.random.default_rng(seed), a.shape, 0.3)), [a]),
    ]
    for f, ts in cases:
        assert_grads(projected(f, rng), ts)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_shapes_and_reductions(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 2, 3, 4), param(rng, 2, 3, 4)
    one = [
        lambda: E.reshape(a, (6, 4)),
        lambda: E.transpose(a, (2, 0, 1)),
        lambda: E.swapaxes(a, 0, 2),
        lambda: E.getitem(a, (slice(None), 1)),
        lambda: E.slice_axis(a, 2, 1, 3),
        lambda: E.sum(a, axis=1),
        lambda: E.mean(a, axis=(0, 2), keepdims=True),
        lambda: E.softmax(a, axis=1),
        lambda: E.log_softmax(a, axis=-1),
        lambda: E.logsumexp(a, axis=0),
    ]
    for f in one:
        assert_grads(projected(f, rng), [a])
    assert_grads(projected(lambda: E.concat([a, b], axis=1), rng), [a, b])
    assert_grads(projected(lambda: E.stack([a, b], axis=0), rng), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = param(rng, 3, 5), param(rng, 5), param(rng, 5)
    assert_grads(projected(lambda: E.layer_norm(x, g, b), rng), [x, g, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_embedding_and_mask_and_nll(seed):
    rng = np.random.default_rng(seed)
    table = param(rng, 6, 3)
    ids = rng.integers(0, 6, (2, 4))
    assert_grads(projected(lambda: E.embedding(table, ids), rng), [table])
    s = param(rng, 2, 4, 4)
    assert_grads(projected(lambda: E.softmax(E.causal_mask(s)), rng), [s])
    logits = param(rng, 2, 4, 7)
    targets = rng.integers(0, 7, (2, 4))
    assert_grads(lambda: E.nll_loss(E.log_softmax(logits), targets), [logits])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_lstm_sequence(seed):
    rng = np.random.default_rng(seed)
    hidden, width = 4, 3
    x = param(rng, 2, 5, width)
    w_ih, w_hh = param(rng, 4 * hidden, width, scale=0.5), param(rng, 4 * hidden, hidden, scale=0.5)
    bias = param(rng, 4 * hidden)
    h0, c0 = param(rng, 2, hidden), param(rng, 2, hidden)
    f = projected(lambda: E.lstm_sequence(x, w_ih, w_hh, bias, h0, c0)[0], rng)
    assert_grads(f, [x, w_ih, w_hh, bias, h0, c0])


def test_lstm_final_state_is_detached(rng):
    x = param(rng, 1, 3, 2)
    w_ih, w_hh, bias = param(rng, 8, 2), param(rng, 8, 2), param(rng, 8)
    zeros = Tensor(np.zeros((1, 2)))
    with Tape():
        out, (h, c) = E.lstm_sequence(x, w_ih, w_hh, bias, zeros, zeros)
    assert isinstance(h, np.ndarray) and isinstance(c, np.ndarray)
    np.testing.assert_array_equal(h, out.data[:, -1])
