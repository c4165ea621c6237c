import numpy as np
import pytest

from gazeauth import tensor as T
from gazeauth.densenet import DenseNetClassifier, DenseNetConfig, receptive_field
from gazeauth.tensor import ShapeMismatch
from gazeauth.transformer import UntrainedModel

from helpers import check_gradients

TINY = DenseNetConfig(
    n_conv_layers=2, growth_rate=4, dilations=(1, 2), kernel_size=3,
    embedding_dim=8, input_channels=3, n_classes=3, dropout_rate=0.1,
)


def tiny_model(seed=0, dtype=np.float64):
    return DenseNetClassifier(TINY, seed=seed, dtype=dtype)


def test_config_validation():
    with pytest.raises(ValueError):
        DenseNetConfig(n_conv_layers=3, dilations=(1, 2))
    with pytest.raises(ValueError):
        DenseNetConfig(kernel_size=4)


def test_receptive_field_values():
    assert receptive_field(DenseNetConfig(n_classes=2)) == 257
    assert receptive_field(
        DenseNetConfig(n_conv_layers=1, dilations=(1,), n_classes=2)
    ) == 3
    assert receptive_field(
        DenseNetConfig(n_conv_layers=8, dilations=(1,) * 8, n_classes=2)
    ) == 17


def test_dense_channel_growth():
    model = DenseNetClassifier(DenseNetConfig(n_classes=8), seed=0)
    # layer i consumes C + i * growth channels
    for i in range(8):
        assert model._p(f"conv{i}.w").data.shape == (32, 7 + 32 * i, 3)
    assert model._final_channels == 7 + 8 * 32 == 263


def test_zero_weights_give_zero_logits():
    m = tiny_model()
    for p in m.parameters():
        p.data[:] = 0.0
    x = np.random.default_rng(0).normal(size=(3, 16))
    assert np.allclose(m.dense_forward(x), 0.0)


def test_forward_shapes():
    m = tiny_model()
    x = np.random.default_rng(1).normal(size=(3, 16))
    assert m.dense_forward(x).shape == (3,)
    xb = np.random.default_rng(2).normal(size=(4, 3, 16))
    assert m.forward(xb).data.shape == (4, 3)
    with pytest.raises(ShapeMismatch):
        m.forward(np.zeros((4, 5, 16)))


def test_batched_equals_independent():
    m = tiny_model(seed=3)
    xb = np.random.default_rng(3).normal(size=(5, 3, 16))
    batched = m.forward(xb).data
    singles = np.stack([m.forward(xb[i]).data for i in range(5)])
    assert np.allclose(batched, singles, atol=1e-6)


def test_embedding_properties():
    m = DenseNetClassifier(
        DenseNetConfig(n_conv_layers=2, growth_rate=4, dilations=(1, 2),
                       embedding_dim=128, input_channels=3, n_classes=4),
        seed=4, dtype=np.float64,
    )
    m.is_trained = True
    x = np.random.default_rng(4).normal(size=(3, 16))
    e1 = m.embedding(x)
    e2 = m.embedding(x)
    assert e1.shape == (128,)
    assert np.array_equal(e1, e2)

    with pytest.raises(UntrainedModel):
        tiny_model().embedding(x)


def test_impulse_response_within_receptive_field():
    cfg = DenseNetConfig(
        n_conv_layers=3, growth_rate=2, dilations=(1, 2, 4), kernel_size=3,
        embedding_dim=4, input_channels=1, n_classes=2, dropout_rate=0.0,
    )
    m = DenseNetClassifier(cfg, seed=5, dtype=np.float64)
    reach = (receptive_field(cfg) - 1) // 2  # per side
    n = 64
    base = np.zeros((1, n))
    pos = 30
    impulse = base.copy()
    impulse[0, pos] = 1.0
    acts_base = m.layer_activations(base)
    acts_impulse = m.layer_activations(impulse)
    diff = np.abs(acts_impulse[-1] - acts_base[-1])[0]  # (C, T) of last layer
    affected = np.flatnonzero(diff.sum(axis=0) > 1e-12)
    assert affected.min() >= pos - reach
    assert affected.max() <= pos + reach


def test_dense_connectivity_probe():
    # zeroing layer j's kernels must change what every later layer sees
    m = tiny_model(seed=6)
    x = np.random.default_rng(6).normal(size=(3, 16))
    acts = m.layer_activations(x)
    m._p("conv0.w").data[:] = 0.0
    m._p("conv0.b").data[:] = 0.0
    acts_zeroed = m.layer_activations(x)
    assert np.allclose(acts_zeroed[0], 0.0)
    # layer 1 consumed layer 0's output, so its activations change too
    assert not np.allclose(acts[1], acts_zeroed[1])


def test_gradient_flows_from_every_layer():
    m = tiny_model(seed=7)
    x = np.random.default_rng(7).normal(size=(2, 3, 16))
    loss = T.cross_entropy(m.forward(x), np.array([0, 1]))
    loss.backward()
    for i in range(TINY.n_conv_layers):
        assert np.abs(m._p(f"conv{i}.w").grad).max() > 0


def test_end_to_end_gradient_check():
    m = tiny_model(seed=8)
    x = np.random.default_rng(8).normal(size=(2, 3, 16))
    targets = np.array([0, 2])
    worst = check_gradients(
        lambda: T.cross_entropy(m.forward(x), targets), m.parameters()
    )
    assert worst < 1e-4


def test_eval_determinism():
    m = tiny_model(seed=9)
    x = np.random.default_rng(9).normal(size=(2, 3, 16))
    assert np.array_equal(m.forward(x).data, m.forward(x).data)


def test_parameter_count_snapshot():
    # frozen after first implementation
    assert DenseNetClassifier(DenseNetConfig(n_classes=8), seed=0).num_params() == 126472


def test_save_load_round_trip(tmp_path):
    from gazeauth.training import LabelEncoder

    m = tiny_model(seed=10)
    m.label_encoder = LabelEncoder(("u1", "u2", "u3"))
    m.is_trained = True
    m.save(tmp_path / "d.ckpt")
    back = DenseNetClassifier.load(tmp_path / "d.ckpt")
    x = np.random.default_rng(10).normal(size=(2, 3, 16))
    assert np.array_equal(back.forward(x).data, m.forward(x).data)
    assert back.config == m.config
