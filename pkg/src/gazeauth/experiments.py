"""Longitudinal experiment protocols and report emission.

Three protocols probe behavioral drift: short-term (train and test
within round 1 via a stratified 80:20 split), long-term (train on round
1, test on the round-3 data recorded much later), and retrained (train
on round 1 plus round-3 session 1, test on the previously unused round-3
session 2). Each (task, model) cell trains from scratch with its own
derived seed; the normalizer and label encoding always come from the
cell's training windows only.

Reports mirror a 6-row (All + five tasks) by 3-model accuracy table and
are emitted byte-deterministically as markdown and CSV, annotated with
the published full-scale GazeBaseVR reference numbers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .densenet import DenseNetClassifier, DenseNetConfig
from .gaze_io import (
    CONCRETE_TASKS,
    Recording,
    RecordingMeta,
    SyntheticUserParams,
    TaskKind,
    apply_behavioral_drift,
    generate_synthetic_recording,
)
from .gbt import GbtClassifier, GbtConfig
from .preprocess import (
    EmptyWindowSet,
    Normalizer,
    WindowConfig,
    WindowSet,
    apply_normalizer,
    build_raw_windowset,
    clean_recording,
)
from .rng import derive_seed, make_rng
from .training import (
    LabelEncoder,
    SplitSpec,
    TrainConfig,
    config_fingerprint,
    evaluate,
    split,
    train_epochs,
)
from .transformer import TransformerClassifier, TransformerConfig


class MissingRound(Exception):
    pass


class MismatchedReports(Exception):
    pass


MODEL_NAMES = ("densenet", "transformer", "gbt")
MODEL_DISPLAY = {"densenet": "DenseNet", "transformer": "Transformer", "gbt": "GBT"}
TASK_ROW_ORDER = ("All", "PUR", "RAN", "TEX", "VID", "VRG")

#: Published full-scale accuracies (GazeBaseVR, 407 users), kept as
#: reference annotations in emitted reports: task -> (DenseNet, Transformer, GBT) in %.
REFERENCE_FULL_SCALE = {
    "short": {
        "All": (97.09, 97.20, 79.31),
        "PUR": (96.61, 96.80, 84.16),
        "RAN": (95.52, 95.58, 80.25),
        "TEX": (90.22, 91.00, 57.48),
        "VID": (87.22, 90.50, 57.66),
        "VRG": (96.47, 97.77, 87.39),
    },
    "long": {
        "All": (7.79, 3.01, 4.85),
        "PUR": (10.28, 9.94, 4.89),
        "RAN": (5.98, 7.67, 6.15),
        "TEX": (8.40, 3.71, 12.11),
        "VID": (4.00, 2.45, 1.78),
        "VRG": (8.06, 7.57, 11.46),
    },
    "retrained": {
        "All": (98.71, 96.52, 93.25),
        "PUR": (98.50, 97.46, 88.50),
        "RAN": (97.14, 98.32, 83.66),
        "TEX": (98.75, 98.22, 55.13),
        "VID": (86.22, 91.78, 55.78),
        "VRG": (97.17, 94.48, 87.55),
    },
}


class Protocol(Enum):
    SHORT_TERM = "short"
    LONG_TERM = "long"
    RETRAINED = "retrained"

    @property
    def train_round_label(self) -> str:
        return {"short": "Round1", "long": "Round1", "retrained": "Round1+3"}[self.value]

    @property
    def test_round_label(self) -> str:
        return {"short": "Round1", "long": "Round3", "retrained": "Round3"}[self.value]

    @property
    def required_rounds(self) -> set[int]:
        return {1} if self is Protocol.SHORT_TERM else {1, 3}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a protocol run needs besides the dataset and the seed."""

    window: WindowConfig = WindowConfig()
    split: SplitSpec = SplitSpec()
    train: TrainConfig = TrainConfig()
    transformer: TransformerConfig = TransformerConfig()
    densenet: DenseNetConfig = DenseNetConfig()
    gbt: GbtConfig = GbtConfig()
    normalizer_scope: str = "per_channel"


@dataclass
class ExperimentReport:
    """Per-task, per-model accuracy table for one protocol run."""

    protocol: str
    train_round: str
    test_round: str
    tasks: list[str]
    models: list[str]
    cells: dict  # task -> model -> accuracy in [0, 1]
    seed: int
    fingerprint: str
    dataset: dict
    train_fingerprints: dict = field(default_factory=dict)

    def accuracy(self, task: str, model: str) -> float:
        return self.cells[task][model]


def _select_recordings(dataset: Sequence[Recording], rounds: set[int], task: TaskKind,
                       sessions: Optional[set[int]] = None) -> list[Recording]:
    out = []
    for rec in dataset:
        if rec.meta.round not in rounds:
            continue
        if task is not TaskKind.ALL and rec.meta.task is not task:
            continue
        if sessions is not None and rec.meta.session not in sessions:
            continue
        out.append(rec)
    return out


def _train_inputs_fingerprint(train_ws: WindowSet, normalizer: Normalizer) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(train_ws.data).tobytes())
    digest.update(repr(list(train_ws.labels)).encode())
    digest.update(repr(normalizer.x_min.tolist()).encode())
    digest.update(repr(normalizer.x_max.tolist()).encode())
    return digest.hexdigest()


def prepare_protocol_data(
    dataset: Sequence[Recording],
    protocol: Protocol,
    task: TaskKind,
    window: WindowConfig,
    split_spec: SplitSpec,
    scope: str = "per_channel",
    seed: int = 0,
) -> tuple[WindowSet, WindowSet, Normalizer]:
    """Build the normalized train/test window sets for one protocol cell.

    Cleaning and segmentation happen on raw values; the train/test
    boundary is drawn first and the normalizer is fitted on the training
    windows alone, so test data never leaks into the scaling.
    """
    present_rounds = {rec.meta.round for rec in dataset}
    missing = protocol.required_rounds - present_rounds
    if missing:
        raise MissingRound(f"dataset lacks round(s) {sorted(missing)} needed by {protocol.value}")

    def raw_windows(recs):
        cleaned = [clean_recording(r, window) for r in recs]
        return build_raw_windowset(cleaned, window)

    if protocol is Protocol.SHORT_TERM:
        recs = _select_recordings(dataset, {1}, task)
        if not recs:
            raise EmptyWindowSet(f"no round-1 recordings for task {task.value}")
        all_raw = raw_windows(recs)
        train_raw, test_raw = split(all_raw, replace(split_spec, seed=derive_seed(seed, "split")))
    elif protocol is Protocol.LONG_TERM:
        train_recs = _select_recordings(dataset, {1}, task)
        test_recs = _select_recordings(dataset, {3}, task)
        if not train_recs or not test_recs:
            raise EmptyWindowSet(f"missing round-1 or round-3 recordings for task {task.value}")
        train_raw = raw_windows(train_recs)
        test_raw = raw_windows(test_recs)
    else:  # RETRAINED: round-3 session 1 joins training; session 2 is held out
        train_recs = _select_recordings(dataset, {1}, task) + _select_recordings(
            dataset, {3}, task, sessions={1}
        )
        test_recs = _select_recordings(dataset, {3}, task, sessions={2})
        if not train_recs or not test_recs:
            raise EmptyWindowSet(f"retrained protocol needs both round-3 sessions for task {task.value}")
        train_raw = raw_windows(train_recs)
        test_raw = raw_windows(test_recs)

    normalizer = Normalizer.fit_from_windows(train_raw.data, scope)
    return apply_normalizer(train_raw, normalizer), apply_normalizer(test_raw, normalizer), normalizer


def _build_and_train(
    model_name: str,
    train_ws: WindowSet,
    encoder: LabelEncoder,
    config: ExperimentConfig,
    cell_seed: int,
):
    n = encoder.n_classes
    if model_name == "transformer":
        cfg = replace(config.transformer, n_classes=n)
        model = TransformerClassifier(cfg, seed=derive_seed(cell_seed, "init"))
    elif model_name == "densenet":
        cfg = replace(config.densenet, n_classes=n)
        model = DenseNetClassifier(cfg, seed=derive_seed(cell_seed, "init"))
    elif model_name == "gbt":
        model = GbtClassifier(replace(config.gbt, n_classes=n))
        model.fit(train_ws.data, encoder.encode(train_ws.labels))
        model.label_encoder = encoder
        return model
    else:
        raise ValueError(f"unknown model {model_name!r}")
    train_cfg = replace(config.train, shuffle_seed=derive_seed(cell_seed, "shuffle"))
    train_epochs(model, train_ws, train_cfg, encoder)
    return model


def _normalize_task_rows(tasks) -> list[TaskKind]:
    if tasks is None:
        return [TaskKind.ALL] + list(CONCRETE_TASKS)
    rows = []
    for t in tasks:
        kind = t if isinstance(t, TaskKind) else TaskKind.from_code(str(t))
        if kind not in rows:
            rows.append(kind)
    ordered = [k for k in (TaskKind.ALL,) + CONCRETE_TASKS if k in rows]
    return ordered


def _row_label(task: TaskKind) -> str:
    return "All" if task is TaskKind.ALL else task.value


def run_protocol(
    dataset: Sequence[Recording],
    protocol: Protocol,
    models: Sequence[str] = MODEL_NAMES,
    config: ExperimentConfig = ExperimentConfig(),
    seed: int = 0,
    tasks: Optional[Sequence] = None,
    dataset_descriptor: Optional[dict] = None,
    checkpoint_dir: Optional[str | Path] = None,
) -> ExperimentReport:
    """Run one protocol over the selected tasks and models.

    Every (task, model) cell gets a seed derived from (seed, protocol,
    task, model), so cells are independent and the full report is a pure
    function of (dataset, config, seed).
    """
    models = [m for m in MODEL_NAMES if m in models]
    if not models:
        raise ValueError("no known models selected")
    task_rows = _normalize_task_rows(tasks)
    cells: dict = {}
    train_fps: dict = {}
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    for task in task_rows:
        label = _row_label(task)
        data_seed = derive_seed(seed, protocol.value, label)
        train_ws, test_ws, normalizer = prepare_protocol_data(
            dataset, protocol, task, config.window, config.split,
            config.normalizer_scope, data_seed,
        )
        encoder = LabelEncoder.from_labels(train_ws.labels)
        train_fps[label] = _train_inputs_fingerprint(train_ws, normalizer)
        cells[label] = {}
        for model_name in models:
            cell_seed = derive_seed(seed, protocol.value, label, model_name)
            model = _build_and_train(model_name, train_ws, encoder, config, cell_seed)
            cells[label][model_name] = evaluate(model, test_ws).accuracy
            if checkpoint_dir is not None:
                suffix = ".json" if model_name == "gbt" else ".ckpt"
                model.save(checkpoint_dir / f"{label}_{model_name}{suffix}")
        if checkpoint_dir is not None:
            normalizer.save(checkpoint_dir / f"{label}_normalizer.json")

    return ExperimentReport(
        protocol=protocol.value,
        train_round=protocol.train_round_label,
        test_round=protocol.test_round_label,
        tasks=[_row_label(t) for t in task_rows],
        models=models,
        cells=cells,
        seed=seed,
        fingerprint=config_fingerprint(config, seed, sorted(m for m in models)),
        dataset=dataset_descriptor or {"kind": "unspecified"},
        train_fingerprints=train_fps,
    )


@dataclass
class DriftSummary:
    """Degradation (long/short) and recovery (retrained/short) per cell."""

    models: list[str]
    tasks: list[str]
    degradation: dict  # task -> model -> ratio
    recovery: dict
    recovery_failures: list  # (task, model) with recovery < 0.9

    def to_markdown(self) -> str:
        lines = ["| Task | Model | Degradation (long/short) | Recovery (retrained/short) |",
                 "|---|---|---:|---:|"]
        for task in self.tasks:
            for model in self.models:
                lines.append(
                    f"| {task} | {MODEL_DISPLAY[model]} "
                    f"| {self.degradation[task][model]:.3f} "
                    f"| {self.recovery[task][model]:.3f} |"
                )
        return "\n".join(lines) + "\n"


def drift_report(
    short: ExperimentReport,
    long: ExperimentReport,
    retrained: ExperimentReport,
) -> DriftSummary:
    """Summarize drift damage and retraining recovery across the three runs."""
    for other in (long, retrained):
        if other.models != short.models or other.dataset != short.dataset:
            raise MismatchedReports("reports disagree on models or dataset descriptor")
    tasks = [t for t in short.tasks if t in long.tasks and t in retrained.tasks]
    if not tasks:
        raise MismatchedReports("reports share no task rows")
    degradation: dict = {}
    recovery: dict = {}
    failures = []
    for task in tasks:
        degradation[task] = {}
        recovery[task] = {}
        for model in short.models:
            s = short.accuracy(task, model)
            degradation[task][model] = long.accuracy(task, model) / s if s else float("nan")
            r = retrained.accuracy(task, model) / s if s else float("nan")
            recovery[task][model] = r
            if not r >= 0.9:
                failures.append((task, model))
    return DriftSummary(
        models=list(short.models),
        tasks=tasks,
        degradation=degradation,
        recovery=recovery,
        recovery_failures=failures,
    )


def emit_table(report: ExperimentReport, format: str = "markdown") -> str:
    """Render the accuracy table; byte-deterministic, two-decimal percent."""
    headers = [MODEL_DISPLAY[m] for m in report.models]
    if format == "markdown":
        lines = ["| Task | " + " | ".join(headers) + " | Train Round | Test Round |",
                 "|---|" + "---:|" * len(headers) + "---|---|"]
        for task in report.tasks:
            cells = [f"{100.0 * report.cells[task][m]:.2f}%" for m in report.models]
            lines.append(
                f"| {task} | " + " | ".join(cells)
                + f" | {report.train_round} | {report.test_round} |"
            )
        return "\n".join(lines) + "\n"
    if format == "csv":
        lines = ["task," + ",".join(m for m in report.models) + ",train_round,test_round"]
        for task in report.tasks:
            cells = [f"{100.0 * report.cells[task][m]:.2f}" for m in report.models]
            lines.append(f"{task}," + ",".join(cells) + f",{report.train_round},{report.test_round}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {format!r}")


def read_table_csv(text: str) -> dict:
    """Parse an emit_table(..., 'csv') document back to task/model percentages."""
    lines = [l for l in text.strip().split("\n") if l]
    header = lines[0].split(",")
    models = header[1:-2]
    out: dict = {}
    for line in lines[1:]:
        parts = line.split(",")
        out[parts[0]] = {m: float(v) for m, v in zip(models, parts[1 : 1 + len(models)])}
    return out


def _reference_block(protocol: str, models: Sequence[str]) -> str:
    ref = REFERENCE_FULL_SCALE[protocol]
    lines = ["Reference accuracies at full scale (GazeBaseVR, 407 users):", ""]
    lines.append("| Task | " + " | ".join(MODEL_DISPLAY[m] for m in models) + " |")
    lines.append("|---|" + "---:|" * len(models))
    for task in TASK_ROW_ORDER:
        vals = dict(zip(MODEL_NAMES, ref[task]))
        lines.append("| " + task + " | " + " | ".join(f"{vals[m]:.2f}%" for m in models) + " |")
    return "\n".join(lines) + "\n"


def write_report_files(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write report.md, report.csv, and fingerprint.txt under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md = (
        f"# Accuracy report: {report.protocol} protocol\n\n"
        f"Train: {report.train_round}  Test: {report.test_round}\n"
        f"Seed: {report.seed}\n"
        f"Dataset: {json.dumps(report.dataset, sort_keys=True)}\n"
        f"Config fingerprint: {report.fingerprint}\n\n"
        + emit_table(report, "markdown")
        + "\n"
        + _reference_block(report.protocol, report.models)
    )
    paths = []
    for name, text in (
        ("report.md", md),
        ("report.csv", emit_table(report, "csv")),
        ("fingerprint.txt", report.fingerprint + "\n"),
    ):
        path = out_dir / name
        path.write_bytes(text.encode("utf-8"))
        paths.append(path)
    return paths


# synthetic longitudinal cohorts ------------------------------------------


def cohort_user_params(n_users: int, seed: int) -> list[SyntheticUserParams]:
    """Well-separated per-user behavioral parameters.

    Each field spans a wide ladder and the ladders are permuted
    independently (plus small jitter), so users differ along several
    behavioral axes at once without the axes being redundant.
    """
    rng = make_rng(seed, "cohort-params")
    n = n_users
    rates = np.geomspace(0.6, 5.0, n)
    amps = np.geomspace(0.05, 0.55, n)[rng.permutation(n)]
    noise = np.geomspace(0.002, 0.035, n)[rng.permutation(n)]
    driftv = np.geomspace(0.01, 0.12, n)[rng.permutation(n)]
    verg = np.linspace(0.012, 0.15, n)[rng.permutation(n)]
    jitter = 1.0 + 0.04 * rng.uniform(-1.0, 1.0, size=(n, 5))
    return [
        SyntheticUserParams(
            saccade_rate_hz=float(rates[i] * jitter[i, 0]),
            saccade_amplitude=float(amps[i] * jitter[i, 1]),
            fixation_noise_sigma=float(noise[i] * jitter[i, 2]),
            drift_velocity=float(driftv[i] * jitter[i, 3]),
            vergence_offset=float(verg[i] * jitter[i, 4]),
            seed=derive_seed(seed, "user", i),
        )
        for i in range(n)
    ]


def make_longitudinal_cohort(
    n_users: int,
    tasks: Sequence[TaskKind] | TaskKind = TaskKind.ALL,
    drift_magnitude: float = 0.0,
    seed: int = 0,
    duration_s: float = 5.0,
    nominal_rate_hz: float = 250.0,
    sessions: Sequence[int] = (1, 2),
    rounds: Sequence[int] = (1, 3),
) -> tuple[list[Recording], dict]:
    """Generate a two-round synthetic cohort with behavioral drift.

    Round 1 uses each user's base parameters; later rounds use a drifted
    copy (one drift draw per user per round, shared by that round's
    sessions). Returns the recordings plus a dataset descriptor for
    report provenance. Fully deterministic in (arguments, seed).
    """
    if n_users < 2:
        raise ValueError("a cohort needs at least 2 users")
    if isinstance(tasks, TaskKind):
        tasks = [tasks]
    task_list: list[TaskKind] = []
    for t in tasks:
        kind = t if isinstance(t, TaskKind) else TaskKind.from_code(str(t))
        if kind is TaskKind.ALL:
            task_list = list(CONCRETE_TASKS)
            break
        if kind not in task_list:
            task_list.append(kind)

    base_params = cohort_user_params(n_users, seed)
    recordings = []
    for i in range(n_users):
        subject = f"{i + 1:03d}"
        for rnd in rounds:
            if rnd == min(rounds):
                params = base_params[i]
            else:
                params = apply_behavioral_drift(
                    base_params[i], drift_magnitude, derive_seed(seed, "drift", subject, rnd)
                )
            for session in sessions:
                for task in task_list:
                    meta = RecordingMeta(
                        subject_id=subject, round=rnd, session=session,
                        task=task, source="synthetic",
                    )
                    recordings.append(
                        generate_synthetic_recording(params, meta, duration_s, nominal_rate_hz)
                    )
    descriptor = {
        "kind": "synthetic",
        "n_users": n_users,
        "tasks": [t.value for t in task_list],
        "drift_magnitude": drift_magnitude,
        "seed": seed,
        "duration_s": duration_s,
        "rate_hz": nominal_rate_hz,
        "sessions": list(sessions),
        "rounds": list(rounds),
    }
    return recordings, descriptor
