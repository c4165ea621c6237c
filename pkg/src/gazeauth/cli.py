"""Command-line interface: synth, experiment, train, eval.

Precedence for every setting is flag > config file (--config JSON) >
built-in default, and the built-in numeric defaults equal the reference
pipeline values (1250-sample windows at 250 Hz, d_model 64 / 4 heads /
2 layers, 50 epochs, lr 0.001, batch 32, GBT eta 0.3 / depth 6, 80:20
split). Exit codes: 0 success, 1 runtime/domain error, 2 usage error.
All outputs land under --out; nothing else is written.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .densenet import DenseNetClassifier, DenseNetConfig
from .gaze_io import (
    CONCRETE_TASKS,
    DatasetError,
    TaskKind,
    load_dataset,
    recording_to_csv,
)
from .gbt import DegenerateData, GbtClassifier, GbtConfig
from .optim import CheckpointError, load_checkpoint
from .preprocess import (
    EmptyWindowSet,
    Normalizer,
    NoValidSamples,
    UnfittedNormalizer,
    WindowConfig,
    apply_normalizer,
    build_raw_windowset,
    clean_recording,
)
from .tensor import InvalidTarget, ShapeMismatch
from .training import (
    InsufficientData,
    LabelEncoder,
    LabelOutOfRange,
    SplitSpec,
    TrainConfig,
    evaluate,
    train_epochs,
)
from .transformer import TransformerClassifier, TransformerConfig, UntrainedModel
from .experiments import (
    ExperimentConfig,
    MismatchedReports,
    MissingRound,
    Protocol,
    MODEL_NAMES,
    drift_report,
    make_longitudinal_cohort,
    run_protocol,
    write_report_files,
)

DOMAIN_ERRORS = (
    DatasetError,
    EmptyWindowSet,
    NoValidSamples,
    UnfittedNormalizer,
    ShapeMismatch,
    InvalidTarget,
    InsufficientData,
    LabelOutOfRange,
    MissingRound,
    MismatchedReports,
    DegenerateData,
    UntrainedModel,
    CheckpointError,
    ValueError,
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Cohort parameters used when no --data directory is given."""

    n_users: int = 8
    tasks: tuple = ("ALL",)
    drift_magnitude: float = 0.0
    duration_s: float = 5.0
    rate_hz: float = 250.0


@dataclass(frozen=True)
class RunConfig:
    """One document mirroring every module config; unknown keys rejected."""

    window: WindowConfig = WindowConfig()
    split: SplitSpec = SplitSpec()
    train: TrainConfig = TrainConfig()
    transformer: TransformerConfig = TransformerConfig()
    densenet: DenseNetConfig = DenseNetConfig()
    gbt: GbtConfig = GbtConfig()
    synthetic: SyntheticSpec = SyntheticSpec()
    normalizer_scope: str = "per_channel"
    seed: int = 0

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            window=self.window,
            split=self.split,
            train=self.train,
            transformer=self.transformer,
            densenet=self.densenet,
            gbt=self.gbt,
            normalizer_scope=self.normalizer_scope,
        )


def _dataclass_from(cls, doc: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown key(s) {sorted(unknown)} in config section {where!r}")
    return cls(**doc)


_SECTIONS = {
    "window": WindowConfig,
    "split": SplitSpec,
    "train": TrainConfig,
    "transformer": TransformerConfig,
    "densenet": DenseNetConfig,
    "gbt": GbtConfig,
    "synthetic": SyntheticSpec,
}


def load_run_config(path: str | Path | None) -> RunConfig:
    """Parse a JSON RunConfig document; every key must be known."""
    if path is None:
        return RunConfig()
    doc = json.loads(Path(path).read_text())
    known = set(_SECTIONS) | {"normalizer_scope", "seed"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown top-level config key(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _dataclass_from(cls, doc[name], name)
    if "normalizer_scope" in doc:
        kwargs["normalizer_scope"] = doc["normalizer_scope"]
    if "seed" in doc:
        kwargs["seed"] = doc["seed"]
    return RunConfig(**kwargs)


def _parse_tasks(text: str) -> list[TaskKind]:
    if text.strip().lower() == "all":
        return [TaskKind.ALL]
    return [TaskKind.from_code(part.strip()) for part in text.split(",") if part.strip()]


def _load_recordings(args, config: RunConfig):
    """Dataset from --data if given, else the configured synthetic cohort."""
    if getattr(args, "data", None):
        recs = load_dataset(args.data, nominal_rate_hz=config.window.sample_rate_hz)
        return recs, {"kind": "real", "root": str(args.data), "n_recordings": len(recs)}
    synth = config.synthetic
    return make_longitudinal_cohort(
        n_users=synth.n_users,
        tasks=[TaskKind.from_code(t) for t in synth.tasks],
        drift_magnitude=synth.drift_magnitude,
        seed=config.seed,
        duration_s=synth.duration_s,
        nominal_rate_hz=synth.rate_hz,
    )


# commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    """Write a synthetic cohort to disk in the ingestion CSV format."""
    config = _apply_overrides(load_run_config(args.config), args)
    recordings, descriptor = make_longitudinal_cohort(
        n_users=args.users,
        tasks=_parse_tasks(args.tasks),
        drift_magnitude=args.drift,
        seed=config.seed,
        duration_s=args.duration_s,
        nominal_rate_hz=config.window.sample_rate_hz,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in recordings:
        m = rec.meta
        name = f"S_{m.round}{m.subject_id}_S{m.session}_{m.task.value}.csv"
        (out / name).write_text(recording_to_csv(rec))
    (out / "cohort.json").write_text(json.dumps(descriptor, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(recordings)} recordings to {out}")
    return 0


def cmd_experiment(args) -> int:
    """Run the selected protocols and write report files per protocol."""
    config = _apply_overrides(load_run_config(args.config), args)
    recordings, descriptor = _load_recordings(args, config)
    models = list(MODEL_NAMES) if args.model == "all" else [args.model]
    tasks = None if args.task.lower() == "all" else [TaskKind.from_code(args.task)]
    protocols = (
        [Protocol.SHORT_TERM, Protocol.LONG_TERM, Protocol.RETRAINED]
        if args.protocol == "all"
        else [Protocol(args.protocol)]
    )
    out = Path(args.out)
    reports = {}
    for protocol in protocols:
        report = run_protocol(
            recordings,
            protocol,
            models=models,
            config=config.experiment_config(),
            seed=config.seed,
            tasks=tasks,
            dataset_descriptor=descriptor,
            checkpoint_dir=out / protocol.value / "checkpoints",
        )
        write_report_files(report, out / protocol.value)
        reports[protocol] = report
        print(f"{protocol.value}: wrote report under {out / protocol.value}")
    if len(reports) == 3:
        summary = drift_report(
            reports[Protocol.SHORT_TERM],
            reports[Protocol.LONG_TERM],
            reports[Protocol.RETRAINED],
        )
        (out / "drift_summary.md").write_bytes(summary.to_markdown().encode("utf-8"))
        print(f"drift summary: {out / 'drift_summary.md'}")
    return 0


def _prepare_training_windows(recordings, config: RunConfig, tasks):
    if tasks is not None and TaskKind.ALL not in tasks:
        recordings = [r for r in recordings if r.meta.task in tasks]
    if not recordings:
        raise EmptyWindowSet("no recordings match the task selection")
    cleaned = [clean_recording(r, config.window) for r in recordings]
    raw = build_raw_windowset(cleaned, config.window)
    normalizer = Normalizer.fit_from_windows(raw.data, config.normalizer_scope)
    return apply_normalizer(raw, normalizer), normalizer


def cmd_train(args) -> int:
    """Train one model on a dataset and write checkpoint + train report."""
    config = _apply_overrides(load_run_config(args.config), args)
    recordings, _ = _load_recordings(args, config)
    tasks = None if args.task.lower() == "all" else _parse_tasks(args.task)
    windows, normalizer = _prepare_training_windows(recordings, config, tasks)
    encoder = LabelEncoder.from_labels(windows.labels)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.model == "gbt":
        model = GbtClassifier(replace(config.gbt, n_classes=encoder.n_classes))
        model.fit(windows.data, encoder.encode(windows.labels))
        model.label_encoder = encoder
        pred = model.predict_classes(windows.data)
        acc = float(np.mean(pred == encoder.encode(windows.labels)))
        report_json = json.dumps(
            {"train_loss": model.ensemble.train_loss, "final_train_accuracy": acc},
            indent=2,
        )
        checkpoint = out / "model_gbt.json"
        model.save(checkpoint)
    else:
        if args.model == "transformer":
            cfg = replace(config.transformer, n_classes=encoder.n_classes)
            model = TransformerClassifier(cfg, seed=config.seed)
        else:
            cfg = replace(config.densenet, n_classes=encoder.n_classes)
            model = DenseNetClassifier(cfg, seed=config.seed)
        report = train_epochs(model, windows, config.train, encoder)
        acc = report.final_train_accuracy
        report_json = report.to_json()
        checkpoint = out / f"model_{args.model}.ckpt"
        model.save(checkpoint)
    normalizer.save(out / "normalizer.json")
    (out / "train_report.json").write_text(report_json + "\n")
    print(f"trained {args.model}: train accuracy {acc:.4f}; checkpoint {checkpoint}")
    return 0


def _load_model(path: Path):
    if path.suffix == ".json":
        return GbtClassifier.load(path)
    _, meta = load_checkpoint(path)
    kind = meta.get("model_kind")
    if kind == "transformer":
        return TransformerClassifier.load(path)
    if kind == "densenet":
        return DenseNetClassifier.load(path)
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")


def cmd_eval(args) -> int:
    """Evaluate a saved checkpoint; prints accuracy and per-task breakdown."""
    config = _apply_overrides(load_run_config(args.config), args)
    model = _load_model(Path(args.checkpoint))
    normalizer = Normalizer.load(Path(args.checkpoint).parent / "normalizer.json")
    recordings, _ = _load_recordings(args, config)
    tasks = None if args.task.lower() == "all" else _parse_tasks(args.task)
    if tasks is not None and TaskKind.ALL not in tasks:
        recordings = [r for r in recordings if r.meta.task in tasks]
    cleaned = [clean_recording(r, config.window) for r in recordings]
    raw = build_raw_windowset(cleaned, config.window)
    windows = apply_normalizer(raw, normalizer)
    result = evaluate(model, windows)
    print(f"accuracy: {result.accuracy:.4f} over {result.n_windows} windows")
    for task, acc in sorted(result.per_task.items()):
        print(f"  {task}: {acc:.4f}")
    return 0


# wiring ---------------------------------------------------------------------


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    """Fold command-line overrides into the loaded RunConfig."""
    window = config.window
    train = config.train
    if getattr(args, "window_len", None) is not None:
        window = replace(window, window_len=args.window_len)
    if getattr(args, "epochs", None) is not None:
        train = replace(train, epochs=args.epochs)
    if getattr(args, "batch_size", None) is not None:
        train = replace(train, batch_size=args.batch_size)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return replace(config, window=window, train=train)


def _add_common(parser: argparse.ArgumentParser, with_data: bool = True):
    parser.add_argument("--config", default=None, help="JSON RunConfig document")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--window-len", type=int, default=None, help="samples per window")
    if with_data:
        parser.add_argument("--data", default=None, help="dataset root directory of CSVs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazeauth",
        description="Gaze-based continuous-authentication pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cohort as CSV files")
    p.add_argument("--users", type=int, default=8)
    p.add_argument("--tasks", default="ALL", help="comma-separated task codes or ALL")
    p.add_argument("--drift", type=float, default=0.0, help="behavioral drift magnitude for round 3")
    p.add_argument("--duration-s", type=float, default=5.0, help="seconds per recording")
    p.add_argument("--out", required=True)
    _add_common(p, with_data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experiment", help="run protocols and emit report tables")
    p.add_argument("--protocol", choices=["short", "long", "retrained", "all"], default="all")
    p.add_argument("--model", choices=list(MODEL_NAMES) + ["all"], default="all")
    p.add_argument("--task", default="all", help="one of VRG,PUR,VID,TEX,RAN or all")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--model", choices=list(MODEL_NAMES), required=True)
    p.add_argument("--task", default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="all")
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
