import math

import numpy as np
import pytest

from gazeauth import tensor as T
from gazeauth.optim import AdamState, Parameter, adam_step, load_checkpoint, save_checkpoint
from gazeauth.rng import make_rng
from gazeauth.tensor import InvalidTarget, NoTape, ShapeMismatch, Tensor

from helpers import check_gradients, finite_difference_grad, max_relative_error

RNG = np.random.default_rng(1234)


def param(shape, name="p", scale=1.0):
    return Parameter(RNG.normal(0, scale, size=shape), name)


# forward values ------------------------------------------------------------

def test_matmul_values_and_shape_errors():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    assert np.array_equal(T.matmul(a, eye).data, a.data)
    b = Tensor([[1.0], [1.0]])
    assert T.matmul(a, b).data.tolist() == [[3.0], [7.0]]
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_softmax_basics():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    assert np.allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75])


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = RNG.normal(0, 3, size=(8, 11))
    y = T.softmax(Tensor(x)).data
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-9)
    y2 = T.softmax(Tensor(x + 17.3)).data
    assert np.allclose(y, y2, atol=1e-12)


def test_conv1d_identity_kernel():
    x = Tensor(RNG.normal(size=(1, 1, 9)))
    k = Tensor(np.ones((1, 1, 1)))
    assert np.allclose(T.conv1d(x, k, 1).data, x.data)


def test_conv1d_hand_cases():
    x = Tensor(np.array([[[0.0, 1.0, 0.0, 0.0]]]))
    k = Tensor(np.ones((1, 1, 3)))
    assert T.conv1d(x, k, 1).data[0, 0].tolist() == [1.0, 1.0, 1.0, 0.0]

    x = Tensor(np.array([[[1.0, 0.0, 0.0, 0.0, 1.0]]]))
    k = Tensor(np.array([[[1.0, 0.0, 1.0]]]))
    assert T.conv1d(x, k, 2).data[0, 0].tolist() == [0.0, 0.0, 2.0, 0.0, 0.0]


def test_conv1d_receptive_field_reach():
    # impulse affects outputs only within (k-1)*d/2 per side
    for dilation in (1, 2, 4):
        n = 32
        x = np.zeros((1, 1, n))
        pos = 15
        x[0, 0, pos] = 1.0
        k = Tensor(np.ones((1, 1, 3)))
        out = T.conv1d(Tensor(x), k, dilation).data[0, 0]
        nz = np.flatnonzero(out)
        assert nz.min() >= pos - dilation and nz.max() <= pos + dilation


def test_conv1d_shape_errors():
    with pytest.raises(ShapeMismatch):
        T.conv1d(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((3, 5, 3))), 1)
    with pytest.raises(ShapeMismatch):
        T.conv1d(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((3, 2, 4))), 1)


def test_cross_entropy_uniform_and_limits():
    logits = Tensor(np.zeros((3, 4)))
    loss = T.cross_entropy(logits, [0, 1, 2])
    assert abs(float(loss.data) - math.log(4.0)) < 1e-12

    big = np.zeros((1, 4))
    big[0, 2] = 50.0
    assert float(T.cross_entropy(Tensor(big), [2]).data) < 1e-12

    with pytest.raises(InvalidTarget):
        T.cross_entropy(Tensor(np.zeros((1, 4))), [4])


def test_dropout_modes():
    x = Tensor(RNG.normal(size=(50,)))
    assert T.dropout(x, 0.3, train=False) is x
    assert T.dropout(x, 0.0, rng=make_rng(0), train=True) is x
    out = T.dropout(x, 0.5, rng=make_rng(1), train=True)
    kept = out.data != 0
    assert np.allclose(out.data[kept], x.data[kept] * 2.0)


def test_dropout_survivor_fraction():
    x = Tensor(np.ones(1_000_000))
    out = T.dropout(x, 0.5, rng=make_rng(42), train=True)
    frac = float((out.data != 0).mean())
    assert abs(frac - 0.5) < 0.01


def test_forward_finite_on_finite_fuzz():
    rng = np.random.default_rng(99)
    for _ in range(10):
        x = Tensor(rng.normal(0, 10, size=(4, 6)), requires_grad=True)
        w = Tensor(rng.normal(0, 10, size=(6, 5)), requires_grad=True)
        y = T.softmax(T.relu(T.matmul(x, w)))
        z = T.layer_norm(y, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        assert np.isfinite(z.data).all()


# backward: simple analytic cases -------------------------------------------

def test_backward_sum_gives_ones():
    p = param((3, 4))
    T.tsum(p).backward()
    assert np.array_equal(p.grad, np.ones((3, 4)))


def test_backward_square():
    p = Parameter(np.array(3.0), "x")
    T.tsum(T.mul(p, p)).backward()
    assert np.allclose(p.grad, 6.0)


def test_backward_requires_scalar_and_tape():
    with pytest.raises(NoTape):
        Tensor(np.array(1.0)).backward()
    p = param((2, 2))
    with pytest.raises(ShapeMismatch):
        T.mul(p, p).backward()


def test_grad_accumulates_on_reuse():
    p = Parameter(np.array([2.0]), "x")
    y = T.add(T.mul(p, p), p)  # x^2 + x -> 2x + 1 = 5
    T.tsum(y).backward()
    assert np.allclose(p.grad, 5.0)


def test_no_grad_context_records_nothing():
    p = param((2, 2))
    with T.no_grad():
        out = T.matmul(p, p)
    assert out._backward_fn is None and not out.requires_grad


# backward: finite-difference oracle over every primitive --------------------

def test_grad_add_mul_broadcast():
    a = param((3, 4), "a")
    b = param((4,), "b")
    check_gradients(lambda: T.tsum(T.mul(T.add(a, b), a)), [a, b])


def test_grad_matmul():
    a = param((3, 4), "a")
    b = param((4, 2), "b")
    check_gradients(lambda: T.tsum(T.matmul(a, b)), [a, b])


def test_grad_matmul_batched():
    a = param((2, 3, 4), "a")
    b = param((2, 4, 5), "b")
    c = param((4, 5), "c")  # broadcast on batch dim
    check_gradients(lambda: T.tsum(T.mul(T.matmul(a, b), 0.5)), [a, b])
    check_gradients(lambda: T.tsum(T.matmul(a, c)), [a, c])


def test_grad_relu_exp_log():
    a = Parameter(RNG.uniform(0.5, 2.0, size=(3, 3)), "a")
    check_gradients(lambda: T.tsum(T.log(a)), [a])
    b = Parameter(RNG.normal(size=(3, 3)) + 0.3, "b")
    b.data[np.abs(b.data) < 0.1] = 0.3  # keep away from the relu kink
    check_gradients(lambda: T.tsum(T.relu(b)), [b])
    check_gradients(lambda: T.tsum(T.exp(T.mul(b, 0.3))), [b])


def test_grad_reductions_and_shapes():
    a = param((2, 3, 4), "a")
    check_gradients(lambda: T.tsum(T.tmean(a, axis=1)), [a])
    check_gradients(lambda: T.tmean(T.reshape(a, (6, 4))), [a])
    check_gradients(lambda: T.tsum(T.swapaxes(a, 0, 2)), [a])


def test_grad_concat():
    a = param((2, 3), "a")
    b = param((2, 5), "b")
    weights = Tensor(RNG.normal(size=(2, 8)))
    check_gradients(lambda: T.tsum(T.mul(T.concat([a, b], axis=1), weights)), [a, b])


def test_grad_softmax():
    a = param((4, 6), "a")
    weights = Tensor(RNG.normal(size=(4, 6)))
    check_gradients(lambda: T.tsum(T.mul(T.softmax(a), weights)), [a])


def test_grad_layer_norm():
    x = param((5, 8), "x")
    gamma = Parameter(RNG.uniform(0.5, 1.5, size=8), "gamma")
    beta = param((8,), "beta")
    weights = Tensor(RNG.normal(size=(5, 8)))
    check_gradients(
        lambda: T.tsum(T.mul(T.layer_norm(x, gamma, beta), weights)), [x, gamma, beta]
    )


def test_grad_conv1d():
    x = param((2, 3, 10), "x")
    k = param((4, 3, 3), "k", scale=0.5)
    weights = Tensor(RNG.normal(size=(2, 4, 10)))
    for dilation in (1, 2, 3):
        check_gradients(
            lambda: T.tsum(T.mul(T.conv1d(x, k, dilation), weights)), [x, k]
        )


def test_grad_cross_entropy():
    logits = param((6, 4), "logits")
    targets = np.array([0, 1, 2, 3, 1, 0])
    check_gradients(lambda: T.cross_entropy(logits, targets), [logits])


def test_grad_dropout_fixed_mask():
    x = param((4, 5), "x")
    check_gradients(
        lambda: T.tsum(T.dropout(x, 0.4, rng=make_rng(7), train=True)), [x]
    )


def test_grad_attention_composite():
    from gazeauth.transformer import attention

    q = param((3, 4), "q", scale=0.7)
    k = param((3, 4), "k", scale=0.7)
    v = param((3, 5), "v", scale=0.7)
    weights = Tensor(RNG.normal(size=(3, 5)))
    check_gradients(lambda: T.tsum(T.mul(attention(q, k, v), weights)), [q, k, v])


# Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_no_move():
    p = Parameter(np.array([1.0, 2.0]), "p")
    state = AdamState(lr=0.01)
    p.grad = np.zeros(2)
    adam_step([p], state)
    assert np.array_equal(p.data, [1.0, 2.0])
    assert state.t == 1


def test_adam_first_step_magnitude_is_lr():
    p = Parameter(np.array([1.0]), "p")
    state = AdamState(lr=0.001)
    p.grad = np.array([0.37])
    adam_step([p], state)
    # bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
    assert abs((1.0 - p.data[0]) - 0.001) < 1e-6
    assert p.grad is None


def test_adam_deterministic_trajectories():
    def run():
        p = Parameter(np.array([0.5, -0.5]), "p")
        state = AdamState(lr=0.05)
        for step in range(20):
            p.grad = np.array([np.sin(step + p.data[0]), np.cos(step + p.data[1])])
            adam_step([p], state)
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_adam_converges_on_quadratic():
    p = Parameter(np.array([5.0]), "p")
    state = AdamState(lr=0.1)
    for _ in range(500):
        T.tsum(T.mul(p, p)).backward()
        adam_step([p], state)
    assert abs(p.data[0]) < 1e-2


# checkpoint i/o --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    arrays = {
        "w": RNG.normal(size=(3, 4)).astype(np.float32),
        "b": RNG.normal(size=(4,)),
        "scalar": np.array(3.5),
    }
    meta = {"model_kind": "test", "config": {"a": 1}}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, arrays, meta)
    back, meta2 = load_checkpoint(path)
    assert meta2 == meta
    for name, arr in arrays.items():
        assert back[name].dtype == arr.dtype
        assert np.array_equal(back[name], arr)


def test_checkpoint_deterministic_bytes(tmp_path):
    arrays = {"w": np.arange(12, dtype=np.float64).reshape(3, 4)}
    save_checkpoint(tmp_path / "a.bin", arrays, {"x": 1})
    save_checkpoint(tmp_path / "b.bin", arrays, {"x": 1})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    from gazeauth.optim import CheckpointError

    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
