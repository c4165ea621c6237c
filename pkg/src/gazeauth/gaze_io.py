"""Gaze recording ingestion and synthetic cohort generation.

Handles the GazeBaseVR-style on-disk layout: one CSV per (subject, round,
session, task) recording, 250 Hz binocular samples with a millisecond
timestamp column ``n`` and six gaze-direction components ``clx cly clz
crx cry crz`` (unit vectors per eye). Extra columns are ignored; columns
are bound by header name, never by position.

Also provides a synthetic generator so the full pipeline can run at desk
scale: a fixation-saccade alternation process with per-user behavioral
parameters and a multiplicative drift knob for longitudinal experiments.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .rng import make_rng

logger = logging.getLogger(__name__)

GAZE_COLUMNS = ("clx", "cly", "clz", "crx", "cry", "crz")
REQUIRED_COLUMNS = ("n",) + GAZE_COLUMNS

#: Filenames like S_1042_S1_TEX.csv: round digit + subject digits, session, task code.
DEFAULT_FILENAME_PATTERN = (
    r"^S_(?P<round>\d)(?P<subject>\d+)_S(?P<session>\d)_(?P<task>[A-Z]+)\.csv$"
)


class DatasetError(Exception):
    """Base class for ingestion failures."""


class MissingColumn(DatasetError):
    def __init__(self, name: str):
        super().__init__(f"required column {name!r} missing from header")
        self.name = name


class EmptyRecording(DatasetError):
    pass


class PatternMismatch(DatasetError):
    pass


class UnknownTask(DatasetError):
    def __init__(self, code: str):
        super().__init__(f"unrecognized task code {code!r}")
        self.code = code


class EmptyDataset(DatasetError):
    pass


class TaskKind(Enum):
    """The five recording task kinds, plus ALL as an experiment filter.

    ALL is never stored on a recording; it only widens task selections.
    """

    VRG = "VRG"
    PUR = "PUR"
    VID = "VID"
    TEX = "TEX"
    RAN = "RAN"
    ALL = "ALL"

    @classmethod
    def from_code(cls, code: str) -> "TaskKind":
        try:
            kind = cls(code.upper())
        except ValueError:
            raise UnknownTask(code) from None
        return kind


CONCRETE_TASKS = (TaskKind.VRG, TaskKind.PUR, TaskKind.VID, TaskKind.TEX, TaskKind.RAN)


class GazeSample(NamedTuple):
    """One 250 Hz binocular gaze observation."""

    t_ms: float
    clx: float
    cly: float
    clz: float
    crx: float
    cry: float
    crz: float
    valid: bool


@dataclass(frozen=True)
class RecordingMeta:
    subject_id: str
    round: int
    session: int
    task: TaskKind
    source: str = "real"  # "real" | "synthetic"

    def __post_init__(self):
        if self.round not in (1, 2, 3):
            raise ValueError(f"round must be in {{1,2,3}}, got {self.round}")
        if self.session not in (1, 2):
            raise ValueError(f"session must be in {{1,2}}, got {self.session}")
        if self.task is TaskKind.ALL:
            raise ValueError("TaskKind.ALL is a filter, not a recording task")
        if self.source not in ("real", "synthetic"):
            raise ValueError(f"source must be 'real' or 'synthetic', got {self.source!r}")


@dataclass
class Recording:
    """An ordered gaze sample sequence with its acquisition metadata.

    Samples are stored columnar: ``t_ms`` (n,), ``gaze`` (n, 6) in
    GAZE_COLUMNS order, and a per-sample ``valid`` flag that is False
    wherever any required value was missing or non-finite. Instances are
    treated as immutable after construction.
    """

    meta: RecordingMeta
    t_ms: np.ndarray
    gaze: np.ndarray
    valid: np.ndarray
    nominal_rate_hz: float = 250.0

    def __post_init__(self):
        self.t_ms = np.asarray(self.t_ms, dtype=np.float64)
        self.gaze = np.asarray(self.gaze, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.t_ms.ndim != 1 or self.t_ms.size == 0:
            raise EmptyRecording(f"recording {self.meta} has no samples")
        if self.gaze.shape != (self.t_ms.size, 6):
            raise ValueError(f"gaze shape {self.gaze.shape} != ({self.t_ms.size}, 6)")
        if self.valid.shape != self.t_ms.shape:
            raise ValueError("valid mask shape mismatch")
        if not np.all(np.isfinite(self.t_ms)):
            raise ValueError("timestamps must be finite")
        if np.any(np.diff(self.t_ms) < 0):
            raise ValueError("timestamps must be monotonically non-decreasing")
        if not self.nominal_rate_hz > 0:
            raise ValueError("nominal_rate_hz must be positive")

    @property
    def n_samples(self) -> int:
        return self.t_ms.size

    @property
    def samples(self) -> list[GazeSample]:
        return [
            GazeSample(self.t_ms[i], *self.gaze[i], bool(self.valid[i]))
            for i in range(self.n_samples)
        ]

    @classmethod
    def from_samples(
        cls,
        meta: RecordingMeta,
        samples: Sequence[GazeSample],
        nominal_rate_hz: float = 250.0,
    ) -> "Recording":
        t = np.array([s.t_ms for s in samples], dtype=np.float64)
        gaze = np.array([s[1:7] for s in samples], dtype=np.float64)
        valid = np.array([s.valid for s in samples], dtype=bool)
        return cls(meta, t, gaze, valid, nominal_rate_hz)


def _parse_cell(text: str) -> float:
    text = text.strip()
    if not text:
        return math.nan
    try:
        return float(text)
    except ValueError:
        return math.nan


def parse_recording_csv(
    raw_text: str | Iterable[str],
    meta: RecordingMeta,
    nominal_rate_hz: float = 250.0,
) -> Recording:
    """Parse one recording from CSV text.

    Columns are bound by header name; extra columns are ignored. A row
    with any unparseable or non-finite required value becomes a
    ``valid=False`` sample (its offending values stored as NaN) so that
    sample timing stays uniform for windowing.

    Raises MissingColumn if a required column is absent and
    EmptyRecording if there are no data rows.
    """
    if isinstance(raw_text, str):
        raw_text = io.StringIO(raw_text)
    reader = csv.reader(raw_text)
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyRecording("no header row") from None
    header = [h.strip() for h in header]
    col_index = {}
    for name in REQUIRED_COLUMNS:
        if name not in header:
            raise MissingColumn(name)
        col_index[name] = header.index(name)

    times, gaze_rows = [], []
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        times.append(_parse_cell(row[col_index["n"]]))
        gaze_rows.append([_parse_cell(row[col_index[c]]) for c in GAZE_COLUMNS])
    if not times:
        raise EmptyRecording(f"recording {meta} has zero data rows")

    t = np.array(times, dtype=np.float64)
    gaze = np.array(gaze_rows, dtype=np.float64)
    valid = np.isfinite(t) & np.all(np.isfinite(gaze), axis=1)
    # Invariant: t_ms finite even on invalid rows. Fill holes from their
    # neighbors so index-based windowing still lines up.
    if not np.all(np.isfinite(t)):
        t = _fill_nonfinite_times(t)
    return Recording(meta, t, gaze, valid, nominal_rate_hz)


def _fill_nonfinite_times(t: np.ndarray) -> np.ndarray:
    t = t.copy()
    finite = np.isfinite(t)
    if not finite.any():
        return np.zeros_like(t)
    idx = np.arange(t.size)
    t[~finite] = np.interp(idx[~finite], idx[finite], t[finite])
    return t


def recording_to_csv(recording: Recording) -> str:
    """Serialize a recording back to the seven-column CSV layout.

    Values are written with repr() so every finite float round-trips
    bit-exactly through parse_recording_csv.
    """
    lines = [",".join(REQUIRED_COLUMNS)]
    for i in range(recording.n_samples):
        cells = [repr(float(recording.t_ms[i]))]
        cells += [repr(float(v)) for v in recording.gaze[i]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parse_path_meta(
    filename: str,
    pattern: str = DEFAULT_FILENAME_PATTERN,
    source: str = "real",
) -> RecordingMeta:
    """Extract recording metadata from a filename.

    The pattern must provide named groups ``round``, ``subject``,
    ``session``, and ``task``; the default matches names like
    ``S_1042_S1_TEX.csv`` (round 1, subject "042", session 1, task TEX).
    """
    m = re.match(pattern, Path(filename).name)
    if m is None:
        raise PatternMismatch(f"{filename!r} does not match {pattern!r}")
    return RecordingMeta(
        subject_id=m.group("subject"),
        round=int(m.group("round")),
        session=int(m.group("session")),
        task=TaskKind.from_code(m.group("task")),
        source=source,
    )


def load_dataset(
    root: str | Path,
    rounds: Optional[set[int]] = None,
    tasks: Optional[set[TaskKind]] = None,
    subjects: Optional[set[str]] = None,
    pattern: str = DEFAULT_FILENAME_PATTERN,
    nominal_rate_hz: float = 250.0,
) -> list[Recording]:
    """Load every matching recording under ``root``, lexicographic by path.

    Filters are applied on filename metadata before any file is parsed.
    Individual file failures (pattern mismatch, bad contents) are logged
    and skipped; EmptyDataset is raised only if nothing survives. The
    result is a pure function of the directory contents and the filter.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"dataset root {root} does not exist")
    if tasks is not None and TaskKind.ALL in tasks:
        tasks = set(CONCRETE_TASKS)

    recordings = []
    failures = []
    for path in sorted(root.rglob("*.csv")):
        try:
            meta = parse_path_meta(path.name, pattern)
        except DatasetError as exc:
            failures.append((path, exc))
            continue
        if rounds is not None and meta.round not in rounds:
            continue
        if tasks is not None and meta.task not in tasks:
            continue
        if subjects is not None and meta.subject_id not in subjects:
            continue
        try:
            with open(path, newline="") as fh:
                recordings.append(parse_recording_csv(fh, meta, nominal_rate_hz))
        except (DatasetError, ValueError) as exc:
            failures.append((path, exc))
    for path, exc in failures:
        logger.warning("skipped %s: %s", path, exc)
    if not recordings:
        raise EmptyDataset(
            f"no recordings under {root} match the filter "
            f"({len(failures)} file(s) skipped)"
        )
    return recordings


@dataclass(frozen=True)
class SyntheticUserParams:
    """Behavioral parameters of one synthetic user.

    The generator alternates fixations (slow drift plus Gaussian jitter)
    with instantaneous saccades; the fields below are the per-user knobs
    that make users mutually distinguishable. All magnitudes live in the
    unit-gaze-vector coordinate space.
    """

    saccade_rate_hz: float
    saccade_amplitude: float
    fixation_noise_sigma: float
    drift_velocity: float
    vergence_offset: float
    seed: int = 0

    _BEHAVIORAL_FIELDS = (
        "saccade_rate_hz",
        "saccade_amplitude",
        "fixation_noise_sigma",
        "drift_velocity",
        "vergence_offset",
    )

    def __post_init__(self):
        for name in self._BEHAVIORAL_FIELDS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def generate_synthetic_recording(
    params: SyntheticUserParams,
    meta: RecordingMeta,
    duration_s: float,
    nominal_rate_hz: float = 250.0,
) -> Recording:
    """Simulate one recording as a fixation-saccade alternation process.

    Gaze is tracked as a small-angle offset (x, y) from straight ahead.
    During a fixation the center moves at ``drift_velocity`` in a
    per-fixation direction and each sample adds N(0, sigma^2) jitter; a
    saccade fires per-sample with probability rate/fs and instantaneously
    relocates the fixation to a fresh target at distance ~
    ``saccade_amplitude`` from straight ahead (center-biased viewing, so
    the gaze spread scales with the user's amplitude). Both eyes share
    the trajectory, are separated horizontally by ``vergence_offset``,
    and are renormalized to unit length. Bit-reproducible for identical
    (params, meta, duration).
    """
    if not duration_s > 0:
        raise ValueError("duration_s must be positive")
    n = int(duration_s * nominal_rate_hz)
    rng = make_rng(params.seed, meta.subject_id, meta.round, meta.session, meta.task.value)
    dt = 1.0 / nominal_rate_hz

    def fresh_target():
        angle = rng.uniform(0.0, 2.0 * math.pi)
        radius = params.saccade_amplitude * (0.5 + rng.uniform())
        return np.clip(
            radius * np.array([math.cos(angle), math.sin(angle)]), -0.6, 0.6
        )

    center = fresh_target()
    drift_dir = rng.uniform(0.0, 2.0 * math.pi)
    p_saccade = min(params.saccade_rate_hz * dt, 1.0)

    xy = np.empty((n, 2))
    for i in range(n):
        if p_saccade > 0.0 and rng.uniform() < p_saccade:
            center = fresh_target()
            drift_dir = rng.uniform(0.0, 2.0 * math.pi)
        else:
            center = center + params.drift_velocity * dt * np.array(
                [math.cos(drift_dir), math.sin(drift_dir)]
            )
        xy[i] = center + rng.normal(0.0, params.fixation_noise_sigma, size=2)

    half_verg = 0.5 * params.vergence_offset
    left = np.column_stack([xy[:, 0] + half_verg, xy[:, 1], np.ones(n)])
    right = np.column_stack([xy[:, 0] - half_verg, xy[:, 1], np.ones(n)])
    left /= np.linalg.norm(left, axis=1, keepdims=True)
    right /= np.linalg.norm(right, axis=1, keepdims=True)

    t_ms = np.arange(n, dtype=np.float64) * (1000.0 / nominal_rate_hz)
    gaze = np.hstack([left, right])
    return Recording(meta, t_ms, gaze, np.ones(n, dtype=bool), nominal_rate_hz)


def apply_behavioral_drift(
    params: SyntheticUserParams,
    drift_magnitude: float,
    seed: int,
) -> SyntheticUserParams:
    """Perturb each behavioral field multiplicatively by (1 + m*u), u ~ U[-1,1].

    Models the longitudinal change in a user's gaze behavior between
    recording rounds; drift_magnitude 0 returns the params unchanged and
    perturbed fields are clamped at zero.
    """
    if drift_magnitude < 0:
        raise ValueError("drift_magnitude must be non-negative")
    if drift_magnitude == 0:
        return params
    rng = make_rng(seed, "behavioral-drift")
    updates = {}
    for name in SyntheticUserParams._BEHAVIORAL_FIELDS:
        u = rng.uniform(-1.0, 1.0)
        updates[name] = max(0.0, getattr(params, name) * (1.0 + drift_magnitude * u))
    return replace(params, **updates)
