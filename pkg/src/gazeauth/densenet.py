"""Dilated densely-connected 1-D convolutional classifier.

Eight same-padded conv layers where layer i consumes the channel
concatenation of the raw input and every previous layer's output
(C + i * growth_rate channels in), each followed by ReLU and dropout.
Dilations double across the stack then reset, widening the receptive
field to ~1 s of signal at 250 Hz. Global average pooling over time
feeds an affine map to a 128-dim embedding and a final affine head.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .optim import Parameter, load_checkpoint, save_checkpoint, xavier_uniform
from .rng import make_rng
from .tensor import ShapeMismatch, Tensor
from .transformer import UntrainedModel


@dataclass(frozen=True)
class DenseNetConfig:
    n_conv_layers: int = 8
    growth_rate: int = 32
    dilations: tuple = (1, 2, 4, 8, 16, 32, 64, 1)
    kernel_size: int = 3
    embedding_dim: int = 128
    input_channels: int = 7
    n_classes: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(self.dilations))
        if len(self.dilations) != self.n_conv_layers:
            raise ValueError("dilations list length must equal n_conv_layers")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


def receptive_field(config: DenseNetConfig) -> int:
    """Receptive field in samples: 1 + sum_i (k - 1) * dilation_i."""
    return 1 + sum((config.kernel_size - 1) * d for d in config.dilations)


class DenseNetClassifier:
    """Window classifier; see module docstring for the wiring."""

    model_kind = "densenet"

    def __init__(self, config: DenseNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.label_encoder = None
        self.is_trained = False
        self._params: dict[str, Parameter] = {}
        rng = make_rng(seed, "densenet-init")
        k, g = config.kernel_size, config.growth_rate

        c_in = config.input_channels
        for i in range(config.n_conv_layers):
            fan_in, fan_out = c_in * k, g * k
            self._add(f"conv{i}.w", xavier_uniform(rng, fan_in, fan_out, (g, c_in, k), self.dtype))
            self._add(f"conv{i}.b", np.zeros(g, dtype=self.dtype))
            c_in += g
        self._final_channels = c_in
        self._add(
            "embed.w",
            xavier_uniform(rng, c_in, config.embedding_dim, (c_in, config.embedding_dim), self.dtype),
        )
        self._add("embed.b", np.zeros(config.embedding_dim, dtype=self.dtype))
        self._add(
            "head.w",
            xavier_uniform(
                rng, config.embedding_dim, config.n_classes,
                (config.embedding_dim, config.n_classes), self.dtype,
            ),
        )
        self._add("head.b", np.zeros(config.n_classes, dtype=self.dtype))

    def _add(self, name: str, data: np.ndarray):
        self._params[name] = Parameter(data, name)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def _p(self, name: str) -> Parameter:
        return self._params[name]

    # forward --------------------------------------------------------------

    def _features(self, x: Tensor, train: bool, rng, collect: bool = False):
        """Dense stack: returns (pooled (B, C_final), per-layer outputs)."""
        cfg = self.config
        activations = []
        concat_in = x
        for i, dilation in enumerate(cfg.dilations):
            conv = T.conv1d(concat_in, self._p(f"conv{i}.w"), dilation)
            conv = T.add(conv, T.reshape(self._p(f"conv{i}.b"), (cfg.growth_rate, 1)))
            out = T.relu(conv)
            out = T.dropout(out, cfg.dropout_rate, rng, train)
            if collect:
                activations.append(out)
            concat_in = T.concat([concat_in, out], axis=1)
        pooled = T.tmean(concat_in, axis=2)  # global average over time
        return pooled, activations

    def _forward_tensors(self, x: Tensor, train: bool, rng):
        pooled, _ = self._features(x, train, rng)
        emb = T.add(T.matmul(pooled, self._p("embed.w")), self._p("embed.b"))
        logits = T.add(T.matmul(emb, self._p("head.w")), self._p("head.b"))
        return logits, emb

    def forward(self, windows, train: bool = False, rng=None) -> Tensor:
        """Map (B, C, T) windows (or one (C, T) window) to (B, N) logits."""
        x = windows.data if isinstance(windows, Tensor) else np.asarray(windows)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[1] != self.config.input_channels:
            raise ShapeMismatch(
                f"expected {self.config.input_channels} channels, got {x.shape[1]}"
            )
        logits, _ = self._forward_tensors(Tensor(x.astype(self.dtype)), train, rng)
        return logits if not squeeze else T.reshape(logits, (self.config.n_classes,))

    def dense_forward(self, window: np.ndarray) -> np.ndarray:
        """Eval-mode logits for one (C x T) window."""
        with T.no_grad():
            return self.forward(window).data

    def embedding(self, window: np.ndarray) -> np.ndarray:
        """The pre-head embedding vector (eval mode, deterministic)."""
        self._require_trained()
        x = np.asarray(window)
        if x.ndim == 2:
            x = x[None]
        with T.no_grad():
            _, emb = self._forward_tensors(Tensor(x.astype(self.dtype)), False, None)
        return emb.data[0] if np.asarray(window).ndim == 2 else emb.data

    def layer_activations(self, window: np.ndarray) -> list[np.ndarray]:
        """Eval-mode per-layer outputs, for connectivity/receptive-field probes."""
        x = np.asarray(window)
        if x.ndim == 2:
            x = x[None]
        with T.no_grad():
            _, acts = self._features(Tensor(x.astype(self.dtype)), False, None, collect=True)
        return [a.data for a in acts]

    # inference ----------------------------------------------------------

    def _require_trained(self):
        if not self.is_trained:
            raise UntrainedModel("model has no trained parameters loaded")

    def predict(self, window: np.ndarray) -> tuple[int, np.ndarray]:
        self._require_trained()
        logits = self.dense_forward(window)
        shifted = logits - logits.max()
        probs = np.exp(shifted)
        probs /= probs.sum()
        return int(np.argmax(logits)), probs

    def predict_classes(self, windows: np.ndarray, batch_size: int = 64) -> np.ndarray:
        self._require_trained()
        out = []
        with T.no_grad():
            for i in range(0, len(windows), batch_size):
                out.append(np.argmax(self.forward(windows[i : i + batch_size]).data, axis=1))
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    # persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {
            "model_kind": self.model_kind,
            "config": asdict(self.config),
            "dtype": self.dtype.str,
            "classes": list(self.label_encoder.classes) if self.label_encoder else None,
        }
        save_checkpoint(path, {n: p.data for n, p in self._params.items()}, meta)

    @classmethod
    def load(cls, path: str | Path) -> "DenseNetClassifier":
        from .training import LabelEncoder

        arrays, meta = load_checkpoint(path)
        if meta.get("model_kind") != cls.model_kind:
            raise ShapeMismatch(f"checkpoint holds {meta.get('model_kind')!r}, not densenet")
        config = DenseNetConfig(**meta["config"])
        model = cls(config, dtype=np.dtype(meta["dtype"]))
        for name, param in model._params.items():
            if name not in arrays:
                raise ShapeMismatch(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != param.data.shape:
                raise ShapeMismatch(
                    f"parameter {name!r}: checkpoint shape {arrays[name].shape} "
                    f"!= model shape {param.data.shape}"
                )
            param.data = arrays[name].astype(model.dtype)
        if meta.get("classes"):
            model.label_encoder = LabelEncoder(tuple(meta["classes"]))
            model.is_trained = True
        return model
