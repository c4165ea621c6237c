"""Data splitting, the shared epoch/batch loop, and evaluation metrics.

Splits are stratified per subject and deterministic in the seed; the
loop itself is plain mini-batch SGD-with-Adam over shuffled windows,
recording the mean cross-entropy per epoch. Everything is reproducible
bit-for-bit given (data, configs, seeds) at a fixed precision.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .optim import AdamState, adam_step
from .preprocess import EmptyWindowSet, WindowSet
from .rng import derive_seed, make_rng


class InsufficientData(Exception):
    def __init__(self, subject: str, detail: str = ""):
        super().__init__(f"subject {subject!r} has too few units to split{detail}")
        self.subject = subject


class LabelOutOfRange(Exception):
    pass


@dataclass(frozen=True)
class LabelEncoder:
    """Stable subject-id <-> class-index mapping (sorted subject order)."""

    classes: tuple

    @classmethod
    def from_labels(cls, labels) -> "LabelEncoder":
        return cls(tuple(sorted(set(labels))))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def encode(self, labels) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([index[l] for l in labels], dtype=np.int64)
        except KeyError as exc:
            raise LabelOutOfRange(f"unknown subject {exc.args[0]!r}") from None

    def decode(self, indices) -> list:
        return [self.classes[i] for i in np.asarray(indices)]


def encode_labels(subject_ids) -> tuple[np.ndarray, LabelEncoder]:
    """Map subject ids to contiguous class indices, sorted-id order."""
    subject_ids = list(subject_ids)
    if not subject_ids:
        raise ValueError("no labels to encode")
    encoder = LabelEncoder.from_labels(subject_ids)
    return encoder.encode(subject_ids), encoder


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    unit: str = "window"  # or "session": keep (round, session) groups together
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.unit not in ("window", "session"):
            raise ValueError(f"unknown split unit {self.unit!r}")


def split(windows: WindowSet, spec: SplitSpec) -> tuple[WindowSet, WindowSet]:
    """Stratified train/test split: per subject, shuffle the units and send
    the first ceil(train_fraction * n) to train.

    unit='window' splits individual windows; unit='session' keeps all
    windows of one (round, session) together. Train and test partition
    the input exactly.
    """
    train_mask = np.zeros(len(windows), dtype=bool)
    subjects = sorted(set(windows.labels))
    for subject in subjects:
        member_idx = np.flatnonzero(windows.labels == subject)
        rng = make_rng(spec.seed, "split", subject)
        if spec.unit == "window":
            units = [np.array([i]) for i in member_idx]
        else:
            keys = sorted(
                {(windows.rounds[i], windows.sessions[i]) for i in member_idx}
            )
            units = [
                member_idx[
                    (windows.rounds[member_idx] == r) & (windows.sessions[member_idx] == s)
                ]
                for (r, s) in keys
            ]
        if len(units) < 2:
            raise InsufficientData(subject, f" (unit={spec.unit})")
        order = rng.permutation(len(units))
        n_train = math.ceil(spec.train_fraction * len(units))
        for rank, unit_idx in enumerate(order):
            if rank < n_train:
                train_mask[units[unit_idx]] = True
    test_mask = ~train_mask
    if not test_mask.any():
        raise EmptyWindowSet("split left no test windows; lower train_fraction")
    return windows.subset(train_mask), windows.subset(test_mask)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.001
    shuffle_seed: int = 0
    precision: str = "float32"  # or "float64"
    target_train_accuracy: Optional[float] = None  # early stop once reached

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, learning_rate must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    final_train_accuracy: float
    wall_clock_s: float
    fingerprint: str
    epochs_run: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch_losses": self.epoch_losses,
                "final_train_accuracy": self.final_train_accuracy,
                "wall_clock_s": self.wall_clock_s,
                "fingerprint": self.fingerprint,
                "epochs_run": self.epochs_run,
            },
            indent=2,
        )


def config_fingerprint(*objects) -> str:
    """Stable hash over configuration objects (dataclasses, dicts, scalars)."""

    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
        if isinstance(obj, dict):
            return {str(k): plain(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if isinstance(obj, (np.integer, np.floating)):
            return obj.item()
        return obj

    text = json.dumps([plain(o) for o in objects], sort_keys=True, default=repr)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def train_epochs(
    model,
    train: WindowSet,
    config: TrainConfig,
    encoder: Optional[LabelEncoder] = None,
) -> TrainReport:
    """Train a neural backend on a WindowSet with cross-entropy + Adam.

    Per epoch the windows are reshuffled (seeded), batches of
    ``batch_size`` run forward/backward with dropout active, and the mean
    batch loss is recorded. The label encoder is attached to the model so
    evaluation uses the training-time class mapping. epochs=0 is a no-op
    that still attaches the encoder.
    """
    start = time.perf_counter()
    if encoder is None:
        encoder = LabelEncoder.from_labels(train.labels)
    if model.config.n_classes < encoder.n_classes:
        raise LabelOutOfRange(
            f"model has {model.config.n_classes} classes but data has {encoder.n_classes}"
        )
    labels = encoder.encode(train.labels)
    dtype = np.float32 if config.precision == "float32" else np.float64
    data = train.data.astype(dtype)

    rng = make_rng(config.shuffle_seed, "train-epochs")
    adam = AdamState(lr=config.learning_rate)
    params = model.parameters()
    losses: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        batch_losses = []
        n_correct = 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            logits = model.forward(data[idx], train=True, rng=rng)
            loss = T.cross_entropy(logits, labels[idx])
            loss.backward()
            n_correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
            adam_step(params, adam)
            batch_losses.append(float(loss.data))
        losses.append(float(np.mean(batch_losses)))
        if config.target_train_accuracy is not None:
            # cheap gate on train-mode batch accuracy, then confirm in eval mode
            if n_correct / len(data) >= config.target_train_accuracy:
                model.label_encoder = encoder
                model.is_trained = True
                acc = float(np.mean(model.predict_classes(data) == labels))
                if acc >= config.target_train_accuracy:
                    break

    model.label_encoder = encoder
    model.is_trained = True
    if len(data) and config.epochs:
        final_acc = float(np.mean(model.predict_classes(data) == labels))
    else:
        final_acc = 0.0
    return TrainReport(
        epoch_losses=losses,
        final_train_accuracy=final_acc,
        wall_clock_s=time.perf_counter() - start,
        fingerprint=config_fingerprint(model.config, config, encoder.classes),
        epochs_run=len(losses),
    )


@dataclass
class EvalResult:
    accuracy: float
    per_task: dict
    n_windows: int


def evaluate(model, test: WindowSet) -> EvalResult:
    """Per-window argmax accuracy, overall and grouped by provenance task."""
    if len(test) == 0:
        raise EmptyWindowSet("cannot evaluate on an empty window set")
    if model.label_encoder is None:
        from .transformer import UntrainedModel

        raise UntrainedModel("evaluate() needs a trained model with a label encoder")
    labels = model.label_encoder.encode(test.labels)
    pred = model.predict_classes(test.data)
    correct = pred == labels
    per_task = {}
    for task in sorted(set(test.tasks)):
        mask = test.tasks == task
        per_task[task] = float(correct[mask].mean())
    return EvalResult(
        accuracy=float(correct.mean()),
        per_task=per_task,
        n_windows=len(test),
    )
