"""Transformer-encoder classifier over gaze windows.

Maps a (C x T) window to N class logits: a shared per-timestep affine
embedding into d_model, additive sinusoidal positional encoding, a stack
of post-norm encoder layers (multi-head self-attention + position-wise
feed-forward, residuals and layer norm after each sublayer), mean pooling
over time, and an affine classification head. Defaults follow the compact
configuration this pipeline standardizes on: d_model 64, 4 heads, 2
layers, dropout 0.1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .optim import Parameter, load_checkpoint, save_checkpoint, xavier_uniform
from .rng import make_rng
from .tensor import ShapeMismatch, Tensor


class UntrainedModel(Exception):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dropout_rate: float = 0.1
    input_channels: int = 7
    seq_len: int = 1250
    n_classes: int = 2
    ffn_width: Optional[int] = None  # defaults to 4 * d_model

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 4 * self.d_model)

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def positional_encoding(seq_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encoding: PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(same)."""
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.zeros((seq_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe.astype(dtype)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v with row-stochastic weights.

    Accepts any leading batch dims; the last two axes are (T, d).
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch("q and k must share d_k")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch("k and v must share sequence length")
    d_k = q.shape[-1]
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_k))
    return T.matmul(T.softmax(scores, axis=-1), v)


class TransformerClassifier:
    """Window classifier; see module docstring for the layer stack."""

    model_kind = "transformer"

    def __init__(self, config: TransformerConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.label_encoder = None
        self.is_trained = False
        self._params: dict[str, Parameter] = {}
        rng = make_rng(seed, "transformer-init")
        d, c = config.d_model, config.input_channels

        self._add("embed.w", xavier_uniform(rng, c, d, (c, d), self.dtype))
        self._add("embed.b", np.zeros(d, dtype=self.dtype))
        for layer in range(config.n_layers):
            p = f"layer{layer}."
            for name in ("wq", "wk", "wv", "wo"):
                self._add(p + name, xavier_uniform(rng, d, d, (d, d), self.dtype))
                self._add(p + name[1] + "_bias", np.zeros(d, dtype=self.dtype))
            self._add(p + "ln1.gamma", np.ones(d, dtype=self.dtype))
            self._add(p + "ln1.beta", np.zeros(d, dtype=self.dtype))
            f = config.ffn_width
            self._add(p + "ffn.w1", xavier_uniform(rng, d, f, (d, f), self.dtype))
            self._add(p + "ffn.b1", np.zeros(f, dtype=self.dtype))
            self._add(p + "ffn.w2", xavier_uniform(rng, f, d, (f, d), self.dtype))
            self._add(p + "ffn.b2", np.zeros(d, dtype=self.dtype))
            self._add(p + "ln2.gamma", np.ones(d, dtype=self.dtype))
            self._add(p + "ln2.beta", np.zeros(d, dtype=self.dtype))
        self._add("head.w", xavier_uniform(rng, d, config.n_classes, (d, config.n_classes), self.dtype))
        self._add("head.b", np.zeros(config.n_classes, dtype=self.dtype))
        self._pe = positional_encoding(config.seq_len, d, self.dtype)

    def _add(self, name: str, data: np.ndarray):
        self._params[name] = Parameter(data, name)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def _p(self, name: str) -> Parameter:
        return self._params[name]

    # forward pieces -----------------------------------------------------

    def embed(self, window: np.ndarray) -> np.ndarray:
        """Per-timestep affine map of one (C x T) window to (T x d_model)."""
        window = np.asarray(window, dtype=self.dtype)
        if window.shape[0] != self.config.input_channels:
            raise ShapeMismatch(
                f"window has {window.shape[0]} channels, expected {self.config.input_channels}"
            )
        with T.no_grad():
            out = T.add(T.matmul(Tensor(window.T[None]), self._p("embed.w")), self._p("embed.b"))
        return out.data[0]

    def _split_heads(self, x: Tensor, B: int, t: int) -> Tensor:
        h, dk = self.config.n_heads, self.config.d_k
        return T.swapaxes(T.reshape(x, (B, t, h, dk)), 1, 2)  # (B, H, T, dk)

    def _encoder_layer(self, x: Tensor, layer: int, train: bool, rng) -> Tensor:
        cfg = self.config
        p = f"layer{layer}."
        B, t = x.shape[0], x.shape[1]

        q = T.add(T.matmul(x, self._p(p + "wq")), self._p(p + "q_bias"))
        k = T.add(T.matmul(x, self._p(p + "wk")), self._p(p + "k_bias"))
        v = T.add(T.matmul(x, self._p(p + "wv")), self._p(p + "v_bias"))
        heads = attention(self._split_heads(q, B, t), self._split_heads(k, B, t), self._split_heads(v, B, t))
        merged = T.reshape(T.swapaxes(heads, 1, 2), (B, t, cfg.d_model))
        attn_out = T.add(T.matmul(merged, self._p(p + "wo")), self._p(p + "o_bias"))
        attn_out = T.dropout(attn_out, cfg.dropout_rate, rng, train)
        x = T.layer_norm(T.add(x, attn_out), self._p(p + "ln1.gamma"), self._p(p + "ln1.beta"))

        hidden = T.relu(T.add(T.matmul(x, self._p(p + "ffn.w1")), self._p(p + "ffn.b1")))
        ffn_out = T.add(T.matmul(hidden, self._p(p + "ffn.w2")), self._p(p + "ffn.b2"))
        ffn_out = T.dropout(ffn_out, cfg.dropout_rate, rng, train)
        return T.layer_norm(T.add(x, ffn_out), self._p(p + "ln2.gamma"), self._p(p + "ln2.beta"))

    def encoder_layer(self, x: np.ndarray, layer: int = 0) -> np.ndarray:
        """Eval-mode pass of one encoder layer over a (T x d_model) array."""
        with T.no_grad():
            out = self._encoder_layer(Tensor(np.asarray(x, dtype=self.dtype)[None]), layer, False, None)
        return out.data[0]

    def forward(self, windows, train: bool = False, rng=None, positional: bool = True) -> Tensor:
        """Map (B, C, T) windows (or one (C, T) window) to (B, N) logits."""
        x = windows.data if isinstance(windows, Tensor) else np.asarray(windows)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        B, C, t = x.shape
        cfg = self.config
        if C != cfg.input_channels:
            raise ShapeMismatch(f"expected {cfg.input_channels} channels, got {C}")
        if t > self.config.seq_len:
            raise ShapeMismatch(f"sequence length {t} exceeds configured {cfg.seq_len}")

        h = T.add(T.matmul(Tensor(np.swapaxes(x, 1, 2).astype(self.dtype)), self._p("embed.w")), self._p("embed.b"))
        if positional:
            h = T.add(h, Tensor(self._pe[:t]))
        h = T.dropout(h, cfg.dropout_rate, rng, train)
        for layer in range(cfg.n_layers):
            h = self._encoder_layer(h, layer, train, rng)
        pooled = T.tmean(h, axis=1)
        logits = T.add(T.matmul(pooled, self._p("head.w")), self._p("head.b"))
        return logits if not squeeze else T.reshape(logits, (cfg.n_classes,))

    # inference ----------------------------------------------------------

    def _require_trained(self):
        if not self.is_trained:
            raise UntrainedModel("model has no trained parameters loaded")

    def predict(self, window: np.ndarray) -> tuple[int, np.ndarray]:
        """Predict one window: (argmax class index, softmax probabilities).

        Ties break toward the lowest class index.
        """
        self._require_trained()
        with T.no_grad():
            logits = self.forward(window).data
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
    def load(cls, path: str | Path) -> "TransformerClassifier":
        from .training import LabelEncoder

        arrays, meta = load_checkpoint(path)
        if meta.get("model_kind") != cls.model_kind:
            raise ShapeMismatch(f"checkpoint holds {meta.get('model_kind')!r}, not transformer")
        config = TransformerConfig(**meta["config"])
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
