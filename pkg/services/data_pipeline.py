"""
Data Pipeline
Per-subject CSV recordings -> z-scored sliding windows -> LOSO splits and
time-ordered, unshuffled batches, plus class weights for the training loss.
"""
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, model_validator

from services.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

INDEX_COLUMN = "sample_index"
LABEL_COLUMN = "label"
LABEL_MAP_NAME = "labels.json"

_RAGGED_ROW = re.compile(r"Expected (\d+) fields in line (\d+), saw (\d+)")


@dataclass
class RawRecording:
    """One subject's multichannel recording with a class index per sample"""
    subject_id: str
    sampling_rate: float
    channel_names: List[str]
    data: np.ndarray  # [C, N]
    labels: np.ndarray  # [N]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sampling_rate <= 0:
            raise DataError(f"{self.subject_id}: sampling rate must be positive, got {self.sampling_rate}")
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channel_names):
            raise DataError(f"{self.subject_id}: data must be [C, N] with one row per named channel")
        if self.labels.shape != (self.data.shape[1],):
            raise DataError(f"{self.subject_id}: {self.labels.size} labels for {self.data.shape[1]} samples")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


# =====================================================
# CSV I/O
# =====================================================

def read_label_map(path: Union[str, Path]) -> Dict[str, int]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read label map: {e}", path=path) from None
    if not isinstance(raw, dict) or not all(isinstance(v, int) for v in raw.values()):
        raise DataError("label map must be a JSON object of {name: index}", path=path)
    return {str(k): int(v) for k, v in raw.items()}


def write_label_map(label_map: Dict[str, int], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(label_map, indent=2, sort_keys=True))
    return path


def load_csv(
    path: Union[str, Path],
    sampling_rate: float,
    label_map: Optional[Dict[str, int]] = None,
    subject_id: Optional[str] = None,
) -> RawRecording:
    """
    Parse `sample_index,<channels...>,label` into a RawRecording.

    Labels are looked up in `label_map`, or in a labels.json next to the file;
    without either they must be integer class indices. Line numbers in errors
    count the header as line 1.
    """
    path = Path(path)
    if label_map is None and (path.parent / LABEL_MAP_NAME).exists():
        label_map = read_label_map(path.parent / LABEL_MAP_NAME)

    try:
        df = pd.read_csv(path, dtype={LABEL_COLUMN: str}, float_precision="round_trip", skipinitialspace=True)
    except FileNotFoundError:
        raise DataError("file not found", path=path) from None
    except pd.errors.EmptyDataError:
        raise DataError("empty file", path=path) from None
    except pd.errors.ParserError as e:
        match = _RAGGED_ROW.search(str(e))
        if match:
            expected, line, seen = match.groups()
            raise DataError(f"ragged row: expected {expected} fields, saw {seen}", line=int(line), path=path) from None
        raise DataError(f"unparseable CSV: {e}", path=path) from None

    columns = list(df.columns)
    if len(columns) < 3 or columns[0] != INDEX_COLUMN or columns[-1] != LABEL_COLUMN:
        raise DataError(f"header must be '{INDEX_COLUMN},<channels>,{LABEL_COLUMN}', got {columns}", line=1, path=path)
    if df.empty:
        raise DataError("no samples after the header", path=path)
    channel_names = columns[1:-1]

    missing = df.isna().any(axis=1).to_numpy()
    if missing.any():
        first = int(np.argmax(missing))
        raise DataError("ragged row: missing fields", line=first + 2, path=path)

    try:
        channels = df[channel_names].to_numpy(dtype=np.float64)
        index = df[INDEX_COLUMN].to_numpy(dtype=np.int64)
    except (TypeError, ValueError):
        raise DataError("non-numeric sample index or channel value", path=path) from None

    steps = np.diff(index)
    if (steps <= 0).any():
        bad = int(np.argmax(steps <= 0))
        raise DataError(f"sample_index not strictly increasing ({index[bad]} -> {index[bad + 1]})", line=bad + 3, path=path)

    labels = np.empty(len(df), dtype=np.int64)
    for row, raw in enumerate(df[LABEL_COLUMN].str.strip()):
        if label_map is not None:
            if raw not in label_map:
                raise DataError(f"unknown label {raw!r}", line=row + 2, path=path)
            labels[row] = label_map[raw]
        else:
            try:
                labels[row] = int(raw)
            except ValueError:
                raise DataError(f"unknown label {raw!r} (no label map)", line=row + 2, path=path) from None

    recording = RawRecording(
        subject_id=subject_id or path.stem,
        sampling_rate=sampling_rate,
        channel_names=channel_names,
        data=channels.T.copy(),
        labels=labels,
    )
    logger.debug(f"Loaded {recording.subject_id}: {recording.n_samples} samples x {recording.n_channels} channels")
    return recording


def write_csv(
    recording: RawRecording,
    path: Union[str, Path],
    label_map: Optional[Dict[str, int]] = None,
) -> Path:
    """Write a recording in the same schema load_csv reads; names labels when a map is given"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if label_map is not None:
        names = {index: name for name, index in label_map.items()}
        labels = [names[int(y)] for y in recording.labels]
    else:
        labels = recording.labels
    df = pd.DataFrame(recording.data.T, columns=recording.channel_names)
    df.insert(0, INDEX_COLUMN, np.arange(recording.n_samples))
    df[LABEL_COLUMN] = labels
    df.to_csv(path, index=False)
    return path


def load_dataset(
    paths: Sequence[Union[str, Path]], sampling_rate: float, label_map: Optional[Dict[str, int]] = None
) -> List[RawRecording]:
    recordings = [load_csv(p, sampling_rate, label_map) for p in paths]
    logger.info(f"Loaded {len(recordings)} recordings ({sum(r.n_samples for r in recordings):,} samples)")
    return recordings


# =====================================================
# WINDOWING
# =====================================================

class WindowConfig(BaseModel):
    """Window length and overlap in seconds; both mandatory"""
    model_config = ConfigDict(extra="forbid")

    window_seconds: float
    overlap_seconds: float
    label_rule: Literal["majority", "last_sample"] = "majority"

    @model_validator(mode="after")
    def _check(self) -> "WindowConfig":
        if self.overlap_seconds < 0:
            raise ConfigError(f"window.overlap_seconds must be >= 0, got {self.overlap_seconds}")
        if self.window_seconds <= self.overlap_seconds:
            raise ConfigError(
                f"window.window_seconds ({self.window_seconds}) must exceed overlap_seconds ({self.overlap_seconds})"
            )
        return self

    def window_samples(self, sampling_rate: float) -> int:
        t = int(round(self.window_seconds * sampling_rate))
        if t < 1:
            raise ConfigError(f"window of {self.window_seconds}s holds no sample at {sampling_rate} Hz")
        return t

    def stride_samples(self, sampling_rate: float) -> int:
        stride = int(round((self.window_seconds - self.overlap_seconds) * sampling_rate))
        if stride < 1:
            raise ConfigError(f"stride rounds to zero samples at {sampling_rate} Hz")
        return stride


@dataclass(frozen=True)
class Window:
    data: np.ndarray  # [C, T]
    label: int
    sample_range: Tuple[int, int]


@dataclass
class WindowedSequence:
    """Time-ordered windows of one subject with sample-range provenance"""
    subject_id: str
    windows: np.ndarray  # [W, C, T]
    labels: np.ndarray  # [W]
    ranges: np.ndarray  # [W, 2], half-open
    stride_samples: int
    n_samples: int
    sample_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Window]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Window:
        start, end = self.ranges[i]
        return Window(self.windows[i], int(self.labels[i]), (int(start), int(end)))

    @property
    def window_samples(self) -> int:
        return self.windows.shape[2]


def majority_label(labels: np.ndarray) -> int:
    """Most frequent class; ties go to the class that occurs first"""
    values, first_seen, counts = np.unique(labels, return_index=True, return_counts=True)
    tied = counts == counts.max()
    return int(values[tied][np.argmin(first_seen[tied])])


def sliding_window(recording: RawRecording, cfg: WindowConfig) -> WindowedSequence:
    t = cfg.window_samples(recording.sampling_rate)
    stride = cfg.stride_samples(recording.sampling_rate)
    n = recording.n_samples
    if n < t:
        raise DataError(f"{recording.subject_id}: {n} samples is shorter than one window ({t})")

    starts = np.arange(0, n - t + 1, stride)
    views = sliding_window_view(recording.data, t, axis=1)  # [C, N - T + 1, T]
    windows = np.ascontiguousarray(views[:, starts, :].transpose(1, 0, 2))
    if cfg.label_rule == "last_sample":
        labels = recording.labels[starts + t - 1].copy()
    else:
        labels = np.array([majority_label(recording.labels[s:s + t]) for s in starts], dtype=np.int64)
    ranges = np.stack([starts, starts + t], axis=1)
    return WindowedSequence(
        subject_id=recording.subject_id,
        windows=windows,
        labels=labels,
        ranges=ranges,
        stride_samples=stride,
        n_samples=n,
        sample_labels=recording.labels,
    )


# =====================================================
# NORMALIZATION
# =====================================================

@dataclass
class ZScoreNormalizer:
    """Per-channel z-score with statistics from training recordings only"""
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def fit(self, recordings: Sequence[RawRecording]) -> "ZScoreNormalizer":
        if not recordings:
            raise DataError("cannot fit normalization on zero recordings")
        stacked = np.concatenate([r.data for r in recordings], axis=1)
        self.mean = stacked.mean(axis=1)
        std = stacked.std(axis=1)
        self.std = np.where(std > 0, std, 1.0)
        return self

    def transform(self, recording: RawRecording) -> RawRecording:
        if self.mean is None or self.std is None:
            raise ConfigError("normalizer used before fit")
        if recording.n_channels != self.mean.shape[0]:
            raise DataError(f"{recording.subject_id}: {recording.n_channels} channels, normalizer has {self.mean.shape[0]}")
        return RawRecording(
            subject_id=recording.subject_id,
            sampling_rate=recording.sampling_rate,
            channel_names=list(recording.channel_names),
            data=(recording.data - self.mean[:, None]) / self.std[:, None],
            labels=recording.labels.copy(),
        )


# =====================================================
# SPLITS, BATCHES, WEIGHTS
# =====================================================

@dataclass(frozen=True)
class LOSOSplit:
    held_out_subject: str
    train_subjects: Tuple[str, ...]


def loso_splits(recordings: Sequence[RawRecording]) -> List[LOSOSplit]:
    """One split per subject, in input order"""
    subjects = [r.subject_id for r in recordings]
    duplicates = sorted({s for s in subjects if subjects.count(s) > 1})
    if duplicates:
        raise DataError(f"duplicate subject ids: {duplicates}")
    if len(subjects) < 2:
        raise DataError(f"LOSO needs at least 2 subjects, got {len(subjects)}")
    return [LOSOSplit(s, tuple(o for o in subjects if o != s)) for s in subjects]


@dataclass
class Batch:
    """Consecutive windows of a single subject"""
    subject_id: str
    windows: np.ndarray  # [b, C, T]
    labels: np.ndarray  # [b]
    ranges: np.ndarray  # [b, 2]
    positions: np.ndarray  # indices into the subject's WindowedSequence

    def __len__(self) -> int:
        return len(self.labels)


def make_batches(
    sequences: Sequence[WindowedSequence],
    batch_size: int = 100,
    partial_policy: Literal["keep", "drop"] = "keep",
) -> List[Batch]:
    """Split each subject's windows into consecutive batches; never shuffles or mixes subjects"""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if partial_policy not in ("keep", "drop"):
        raise ConfigError(f"partial_policy must be 'keep' or 'drop', got {partial_policy!r}")
    batches: List[Batch] = []
    for seq in sequences:
        for start in range(0, len(seq), batch_size):
            stop = min(start + batch_size, len(seq))
            if stop - start < batch_size and partial_policy == "drop":
                continue
            batches.append(
                Batch(
                    subject_id=seq.subject_id,
                    windows=seq.windows[start:stop],
                    labels=seq.labels[start:stop],
                    ranges=seq.ranges[start:stop],
                    positions=np.arange(start, stop),
                )
            )
    return batches


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """
    Inverse-frequency weights total / (n * count), rescaled to mean 1 over the
    classes present; absent classes get weight 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("no labeled windows to derive class weights from")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"window label outside [0, {n_classes})")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    present = counts > 0
    for c in np.flatnonzero(~present):
        logger.warning(f"Class {c} absent from training windows; its loss weight is 0")
    weights = np.zeros(n_classes)
    weights[present] = labels.size / (n_classes * counts[present])
    weights[present] /= weights[present].mean()
    return weights
