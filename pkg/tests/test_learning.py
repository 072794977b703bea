import math

import numpy as np
import pytest

from robustagg.data import make_blobs
from robustagg.learning import (
    Dataset,
    ModelArch,
    OptimizerSpec,
    evaluate,
    flatten,
    init_params,
    loss_and_grad,
    train_local,
    unflatten,
)
from robustagg.params import DimensionError

SOFTMAX = ModelArch("softmax", input_dim=4, num_classes=3)
MLP = ModelArch("mlp1", input_dim=3, num_classes=4, hidden_dim=5)


def central_difference(arch, w, X, y, h=1e-5):
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (loss_and_grad(arch, w + e, X, y)[0] - loss_and_grad(arch, w - e, X, y)[0]) / (2 * h)
    return g


def max_relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def random_grad_instance(rng, kind):
    i, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    arch = ModelArch(kind, input_dim=i, num_classes=c, hidden_dim=int(rng.integers(1, 6)))
    w = rng.standard_normal(arch.dim)
    N = int(rng.integers(1, 6))
    return arch, w, rng.standard_normal((N, i)), rng.integers(0, c, size=N)


def test_init_params_deterministic_and_sized():
    assert np.array_equal(init_params(MLP, 3), init_params(MLP, 3))
    assert not np.array_equal(init_params(MLP, 3), init_params(MLP, 4))
    assert SOFTMAX.dim == 15 and SOFTMAX.partition.block_sizes == (12, 3)
    big = ModelArch("mlp1", input_dim=10, num_classes=2, hidden_dim=100)
    assert big.dim == 1302
    assert big.partition.block_sizes == (1000, 100, 200, 2)


def test_init_params_bounds_and_zero_biases():
    w = unflatten(MLP, init_params(MLP, 0))
    assert np.abs(w[0]).max() <= 1 / math.sqrt(3) and np.abs(w[2]).max() <= 1 / math.sqrt(5)
    assert not w[1].any() and not w[3].any()


def test_flatten_roundtrip():
    for arch in (SOFTMAX, MLP):
        v = np.random.default_rng(0).standard_normal(arch.dim)
        assert flatten(unflatten(arch, v)).tobytes() == v.tobytes()


def test_zero_softmax_loss_is_log_c():
    X = np.random.default_rng(0).standard_normal((8, 4))
    loss, _ = loss_and_grad(SOFTMAX, np.zeros(SOFTMAX.dim), X, np.arange(8) % 3)
    assert loss == pytest.approx(math.log(3), abs=1e-15)
    loss, acc = evaluate(SOFTMAX, np.zeros(SOFTMAX.dim), Dataset(X, np.arange(8) % 3))
    assert loss == pytest.approx(math.log(3), abs=1e-15)


@pytest.mark.parametrize("kind", ["softmax", "mlp1"])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    for _ in range(50):
        arch, w, X, y = random_grad_instance(rng, kind)
        _, g = loss_and_grad(arch, w, X, y)
        assert max_relative_error(g, central_difference(arch, w, X, y)) < 1e-5


@pytest.mark.parametrize("arch", [SOFTMAX, MLP])
def test_duplicated_batch_is_invariant(arch):
    rng = np.random.default_rng(5)
    w = rng.standard_normal(arch.dim)
    X = rng.standard_normal((6, arch.input_dim))
    y = rng.integers(0, arch.num_classes, 6)
    l1, g1 = loss_and_grad(arch, w, X, y)
    l2, g2 = loss_and_grad(arch, w, np.vstack([X, X]), np.concatenate([y, y]))
    assert l2 == pytest.approx(l1, rel=1e-13)
    np.testing.assert_allclose(g2, g1, rtol=1e-12, atol=1e-15)


def test_loss_and_grad_dimension_errors():
    with pytest.raises(DimensionError):
        loss_and_grad(SOFTMAX, np.zeros(14), np.zeros((2, 4)), [0, 1])
    with pytest.raises(DimensionError):
        loss_and_grad(SOFTMAX, np.zeros(15), np.zeros((2, 5)), [0, 1])


def test_train_local_zero_epochs_and_determinism():
    data = make_blobs(3, 4, 20, 4.0, seed=1)
    w0 = init_params(SOFTMAX, 0)
    same = train_local(SOFTMAX, w0, data, OptimizerSpec(epochs_per_round=0), seed=0)
    assert np.array_equal(same, w0)
    opt = OptimizerSpec(epochs_per_round=3, batch_size=8, learning_rate=0.01)
    a = train_local(SOFTMAX, w0, data, opt, seed=9)
    b = train_local(SOFTMAX, w0, data, opt, seed=9)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, w0)


def test_train_local_rejects_empty():
    empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        train_local(SOFTMAX, np.zeros(15), empty, OptimizerSpec(), seed=0)
    with pytest.raises(ValueError):
        evaluate(SOFTMAX, np.zeros(15), empty)


def test_adam_separates_blobs():
    arch = ModelArch("softmax", input_dim=10, num_classes=2)
    data = make_blobs(2, 10, 100, spread=6.0, seed=4)
    w = train_local(arch, init_params(arch, 0), data, OptimizerSpec(learning_rate=0.01), seed=0)
    assert evaluate(arch, w, data)[1] > 0.95


def test_full_batch_sgd_loss_decreases():
    arch = ModelArch("softmax", input_dim=5, num_classes=3)
    data = make_blobs(3, 5, 30, spread=2.0, seed=2)
    w = init_params(arch, 1)
    opt = OptimizerSpec("sgd", learning_rate=0.01, epochs_per_round=1, batch_size=len(data))
    losses = [evaluate(arch, w, data)[0]]
    for step in range(100):
        w = train_local(arch, w, data, opt, seed=step)
        losses.append(evaluate(arch, w, data)[0])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_one_hot_logits_are_perfect():
    arch = ModelArch("softmax", input_dim=4, num_classes=4)
    y = np.arange(40) % 4
    data = Dataset(np.eye(4)[y], y)
    W = 10.0 * np.eye(4)
    assert evaluate(arch, flatten([W, np.zeros(4)]), data)[1] == 1.0


def test_random_label_accuracy_near_chance():
    C, N = 5, 5000
    rng = np.random.default_rng(8)
    arch = ModelArch("softmax", input_dim=3, num_classes=C)
    data = Dataset(rng.standard_normal((N, 3)), rng.integers(0, C, N))
    _, acc = evaluate(arch, rng.standard_normal(arch.dim), data)
    sigma = math.sqrt((1 / C) * (1 - 1 / C) / N)
    assert abs(acc - 1 / C) < 3 * sigma
