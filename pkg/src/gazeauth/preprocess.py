"""Temporal/spatial normalization and fixed-size windowing.

The model input for every backend is a (windows x channels x time) array:
channel 0 is the timestamp converted from milliseconds to seconds and the
remaining six channels are the gaze components min-max scaled to [-1, 1]
with per-channel extrema fitted on training data only. Windows are
consecutive, non-overlapping, and exactly ``window_len`` samples long.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .gaze_io import GAZE_COLUMNS, Recording, TaskKind

NORMALIZER_FORMAT_VERSION = 1
N_CHANNELS = 7  # time + six gaze components


class NoValidSamples(Exception):
    def __init__(self, channel: str):
        super().__init__(f"channel {channel!r} has no valid samples to fit on")
        self.channel = channel


class UnfittedNormalizer(Exception):
    pass


class EmptyWindowSet(Exception):
    pass


def normalize_time(t_ms) -> float | np.ndarray:
    """Convert timestamps from milliseconds to seconds."""
    return t_ms / 1000.0


@dataclass
class Normalizer:
    """Per-channel min/max scaler for the six gaze channels.

    Fitted on training data only and persisted alongside models; applying
    it maps fitted values into [-1, 1] and deliberately does NOT clip
    out-of-range test values, so distribution drift stays visible.
    ``scope='global'`` pools all six channels into one min/max pair.
    """

    x_min: np.ndarray = None
    x_max: np.ndarray = None
    degenerate: np.ndarray = None
    time_divisor: float = 1000.0
    scope: str = "per_channel"  # or "global"
    fitted: bool = False

    @classmethod
    def fit(cls, recordings: Sequence[Recording], scope: str = "per_channel") -> "Normalizer":
        """Fit extrema over the valid samples of the given recordings."""
        mins = np.full(6, np.inf)
        maxs = np.full(6, -np.inf)
        for rec in recordings:
            if not rec.valid.any():
                continue
            g = rec.gaze[rec.valid]
            np.minimum(mins, g.min(axis=0), out=mins)
            np.maximum(maxs, g.max(axis=0), out=maxs)
        return cls._from_extrema(mins, maxs, scope)

    @classmethod
    def fit_from_windows(cls, data: np.ndarray, scope: str = "per_channel") -> "Normalizer":
        """Fit extrema from a raw (W, 7, T) window array (spatial channels 1..6)."""
        if data.ndim != 3 or data.shape[1] != N_CHANNELS:
            raise ValueError(f"expected (W, {N_CHANNELS}, T) array, got {data.shape}")
        spatial = data[:, 1:, :]
        mins = spatial.min(axis=(0, 2)).astype(np.float64)
        maxs = spatial.max(axis=(0, 2)).astype(np.float64)
        return cls._from_extrema(mins, maxs, scope)

    @classmethod
    def _from_extrema(cls, mins: np.ndarray, maxs: np.ndarray, scope: str) -> "Normalizer":
        if scope not in ("per_channel", "global"):
            raise ValueError(f"unknown scope {scope!r}")
        for i, name in enumerate(GAZE_COLUMNS):
            if not (np.isfinite(mins[i]) and np.isfinite(maxs[i])):
                raise NoValidSamples(name)
        if scope == "global":
            mins = np.full(6, mins.min())
            maxs = np.full(6, maxs.max())
        return cls(
            x_min=mins,
            x_max=maxs,
            degenerate=(maxs == mins),
            scope=scope,
            fitted=True,
        )

    def _require_fitted(self):
        if not self.fitted:
            raise UnfittedNormalizer("normalizer used before fit()")

    def normalize_value(self, x: float, channel: int) -> float:
        """Scale one value of gaze channel ``channel`` (0..5) to [-1, 1]."""
        self._require_fitted()
        if self.degenerate[channel]:
            return 0.0
        lo, hi = self.x_min[channel], self.x_max[channel]
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    def transform_spatial(self, values: np.ndarray) -> np.ndarray:
        """Vectorized scaling of a (..., 6, T) gaze block."""
        self._require_fitted()
        lo = self.x_min[:, None]
        span = (self.x_max - self.x_min)[:, None]
        span = np.where(span == 0.0, 1.0, span)
        out = 2.0 * (values - lo) / span - 1.0
        if self.degenerate.any():
            out[..., self.degenerate, :] = 0.0
        return out

    def save(self, path: str | Path) -> None:
        self._require_fitted()
        doc = {
            "format_version": NORMALIZER_FORMAT_VERSION,
            "time_divisor": self.time_divisor,
            "scope": self.scope,
            "channels": {
                name: {
                    "min": float(self.x_min[i]),
                    "max": float(self.x_max[i]),
                    "degenerate": bool(self.degenerate[i]),
                }
                for i, name in enumerate(GAZE_COLUMNS)
            },
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Normalizer":
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != NORMALIZER_FORMAT_VERSION:
            raise ValueError(f"unsupported normalizer format: {doc.get('format_version')}")
        mins = np.array([doc["channels"][c]["min"] for c in GAZE_COLUMNS])
        maxs = np.array([doc["channels"][c]["max"] for c in GAZE_COLUMNS])
        degen = np.array([doc["channels"][c]["degenerate"] for c in GAZE_COLUMNS], dtype=bool)
        return cls(
            x_min=mins,
            x_max=maxs,
            degenerate=degen,
            time_divisor=float(doc["time_divisor"]),
            scope=doc["scope"],
            fitted=True,
        )


def fit_normalizer(
    train_recordings: Sequence[Recording], scope: str = "per_channel"
) -> Normalizer:
    """Fit a Normalizer on the valid samples of the training recordings."""
    return Normalizer.fit(train_recordings, scope)


def normalize_value(x: float, channel: int, normalizer: Normalizer) -> float:
    """Min-max scale one gaze value; degenerate channels map to 0."""
    return normalizer.normalize_value(x, channel)


@dataclass(frozen=True)
class WindowConfig:
    """Windowing parameters: 1250 samples per window (5 s at 250 Hz)."""

    window_len: int = 1250
    channels: int = N_CHANNELS
    sample_rate_hz: float = 250.0
    min_valid_fraction: float = 0.95
    time_mode: str = "window_relative"  # or "absolute"
    max_interp_gap: int = 12  # samples (~50 ms at 250 Hz)

    def __post_init__(self):
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if self.channels != N_CHANNELS:
            raise ValueError(f"only the {N_CHANNELS}-channel layout is supported")
        if not 0 < self.min_valid_fraction <= 1:
            raise ValueError("min_valid_fraction must be in (0, 1]")
        if self.time_mode not in ("window_relative", "absolute"):
            raise ValueError(f"unknown time_mode {self.time_mode!r}")


@dataclass
class WindowSet:
    """A (W x C x T) window array with per-window labels and provenance."""

    data: np.ndarray
    labels: np.ndarray  # subject_id per window
    rounds: np.ndarray
    sessions: np.ndarray
    tasks: np.ndarray  # task codes as strings

    def __post_init__(self):
        n = len(self.data)
        for name in ("labels", "rounds", "sessions", "tasks"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length != number of windows")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def n_windows(self) -> int:
        return len(self.data)

    def subset(self, index) -> "WindowSet":
        return WindowSet(
            self.data[index],
            self.labels[index],
            self.rounds[index],
            self.sessions[index],
            self.tasks[index],
        )

    @classmethod
    def concatenate(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise EmptyWindowSet("nothing to concatenate")
        return cls(
            np.concatenate([p.data for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.rounds for p in parts]),
            np.concatenate([p.sessions for p in parts]),
            np.concatenate([p.tasks for p in parts]),
        )


def clean_recording(recording: Recording, config: WindowConfig) -> Recording:
    """Linearly interpolate short invalid runs (<= max_interp_gap samples).

    Runs longer than the gap threshold, and runs touching a recording
    boundary (no anchor on one side), stay invalid; window rejection
    deals with them. A fully valid recording comes back unchanged.
    """
    valid = recording.valid
    if valid.all():
        return recording
    gaze = recording.gaze.copy()
    new_valid = valid.copy()
    n = len(valid)
    i = 0
    while i < n:
        if valid[i]:
            i += 1
            continue
        j = i
        while j < n and not valid[j]:
            j += 1
        run_len = j - i
        if run_len <= config.max_interp_gap and i > 0 and j < n:
            left, right = i - 1, j
            frac = (np.arange(i, j) - left) / (right - left)
            gaze[i:j] = gaze[left] + frac[:, None] * (gaze[right] - gaze[left])
            new_valid[i:j] = True
        i = j
    return Recording(recording.meta, recording.t_ms, gaze, new_valid, recording.nominal_rate_hz)


def _fill_invalid_holdlast(gaze: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid samples with the nearest valid value (ffill, then bfill).

    Keeps surviving windows finite when a tolerated invalid remainder
    (below 1 - min_valid_fraction) passes through window rejection.
    """
    if valid.all():
        return gaze
    gaze = gaze.copy()
    idx = np.where(valid, np.arange(len(valid)), -1)
    np.maximum.accumulate(idx, out=idx)
    has_prev = idx >= 0
    gaze[~valid & has_prev] = gaze[idx[~valid & has_prev]]
    first_valid = np.argmax(valid)
    gaze[: first_valid] = gaze[first_valid]
    return gaze


def segment_windows(
    recording: Recording,
    config: WindowConfig,
    normalizer: Optional[Normalizer] = None,
) -> list[tuple[np.ndarray, str, tuple]]:
    """Cut one recording into labeled (C x T) windows.

    Windows are consecutive and non-overlapping from the start of the
    recording; a trailing partial window is dropped, as is any window
    whose valid-sample fraction is below ``min_valid_fraction``. Channel
    0 carries the timestamp (re-based to the window start unless
    time_mode='absolute'), channels 1-6 the gaze components.

    With a fitted ``normalizer`` the output channels are normalized
    (time in seconds, gaze min-max scaled); without one the raw values
    are returned, which is what leakage-free fitting needs.
    """
    T = config.window_len
    n_win = recording.n_samples // T
    if n_win == 0:
        return []
    valid = recording.valid[: n_win * T].reshape(n_win, T)
    keep = valid.mean(axis=1) >= config.min_valid_fraction
    if not keep.any():
        return []

    gaze = _fill_invalid_holdlast(recording.gaze, recording.valid)
    t = recording.t_ms[: n_win * T].reshape(n_win, T)
    if config.time_mode == "window_relative":
        t = t - t[:, :1]
    g = gaze[: n_win * T].reshape(n_win, T, 6).transpose(0, 2, 1)
    data = np.concatenate([t[:, None, :], g], axis=1)  # (n_win, 7, T)
    data = data[keep]
    if normalizer is not None:
        data = _transform_windows(data, normalizer)

    meta = recording.meta
    provenance = (meta.round, meta.session, meta.task.value)
    return [(data[i], meta.subject_id, provenance) for i in range(len(data))]


def _transform_windows(data: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    out = np.empty_like(data)
    out[:, 0, :] = data[:, 0, :] / normalizer.time_divisor
    out[:, 1:, :] = normalizer.transform_spatial(data[:, 1:, :])
    return out


def _windowset_from_recordings(
    recordings: Sequence[Recording],
    config: WindowConfig,
    normalizer: Optional[Normalizer],
) -> WindowSet:
    data, labels, rounds, sessions, tasks = [], [], [], [], []
    for rec in recordings:
        for window, label, (rnd, sess, task) in segment_windows(rec, config, normalizer):
            data.append(window)
            labels.append(label)
            rounds.append(rnd)
            sessions.append(sess)
            tasks.append(task)
    if not data:
        raise EmptyWindowSet("no windows survived segmentation")
    return WindowSet(
        np.stack(data),
        np.array(labels, dtype=object),
        np.array(rounds, dtype=np.int64),
        np.array(sessions, dtype=np.int64),
        np.array(tasks, dtype=object),
    )


def build_raw_windowset(recordings: Sequence[Recording], config: WindowConfig) -> WindowSet:
    """Segment recordings into raw (unnormalized) windows, dataset order."""
    return _windowset_from_recordings(recordings, config, None)


def build_windowset(
    recordings: Sequence[Recording],
    normalizer: Normalizer,
    config: WindowConfig,
) -> WindowSet:
    """Segment and normalize recordings into one WindowSet, dataset order."""
    normalizer._require_fitted()
    return _windowset_from_recordings(recordings, config, normalizer)


def apply_normalizer(windows: WindowSet, normalizer: Normalizer) -> WindowSet:
    """Normalize a raw WindowSet (as produced by build_raw_windowset)."""
    normalizer._require_fitted()
    return WindowSet(
        _transform_windows(windows.data, normalizer),
        windows.labels,
        windows.rounds,
        windows.sessions,
        windows.tasks,
    )
