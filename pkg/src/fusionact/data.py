"""UCI-HAR and MotionSense loading, windowing, normalization and splits."""

from __future__ import annotations

import csv
import logging
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

WINDOW_LEN = 128
STD_FLOOR = 1e-8


class DataError(RuntimeError):
    """Missing, malformed or inconsistent dataset files."""


class Superclass(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    labels: tuple[str, ...]
    static_labels: tuple[str, ...]
    dynamic_labels: tuple[str, ...]
    channels: tuple[str, ...]

    @property
    def class_order(self) -> list[str]:
        return [*self.static_labels, *self.dynamic_labels]

    def superclass(self, label: str) -> Superclass:
        if label in self.static_labels:
            return Superclass.STATIC
        if label in self.dynamic_labels:
            return Superclass.DYNAMIC
        raise KeyError(f"{label!r} is not a {self.name} label")


UCIHAR_SIGNALS = (
    "body_acc_x", "body_acc_y", "body_acc_z",
    "total_acc_x", "total_acc_y", "total_acc_z",
    "body_gyro_x", "body_gyro_y", "body_gyro_z",
)  # fmt: skip

# y_*.txt ids 1..6 in this order
UCIHAR_LABELS = ("WA", "WU", "WD", "SI", "ST", "LA")

MOTIONSENSE_COLUMNS = (
    "attitude.roll", "attitude.pitch", "attitude.yaw",
    "gravity.x", "gravity.y", "gravity.z",
    "rotationRate.x", "rotationRate.y", "rotationRate.z",
    "userAcceleration.x", "userAcceleration.y", "userAcceleration.z",
)  # fmt: skip

MOTIONSENSE_CODES = {"sit": "SI", "std": "ST", "dws": "WD", "ups": "WU", "jog": "JG", "wlk": "WA"}

UCIHAR = DatasetInfo(
    "ucihar", UCIHAR_LABELS, ("SI", "ST", "LA"), ("WA", "WU", "WD"), UCIHAR_SIGNALS
)
MOTIONSENSE = DatasetInfo(
    "motionsense",
    ("SI", "ST", "WD", "WU", "JG", "WA"),
    ("SI", "ST"),
    ("WD", "WU", "JG", "WA"),
    MOTIONSENSE_COLUMNS,
)
DATASETS = {info.name: info for info in (UCIHAR, MOTIONSENSE)}


@dataclass(frozen=True)
class Window:
    signal: np.ndarray  # [channels, window_len]
    label: str
    subject: int
    superclass: Superclass


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Dataset:
    """Windows stored columnar: X [N, C, T], labels [N], subjects [N]."""

    info: DatasetInfo
    X: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    channel_stats: ChannelStats | None = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype="<U8")
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.X.ndim != 3 or not (len(self.X) == len(self.labels) == len(self.subjects)):
            raise DataError(
                f"inconsistent dataset arrays X={self.X.shape} labels={self.labels.shape} "
                f"subjects={self.subjects.shape}"
            )

    @classmethod
    def empty(cls, info: DatasetInfo, channels: int | None = None, window_len: int = WINDOW_LEN):
        c = len(info.channels) if channels is None else channels
        return cls(info, np.zeros((0, c, window_len)), np.zeros(0, "<U8"), np.zeros(0, np.int64))

    @classmethod
    def from_windows(cls, info: DatasetInfo, windows: Sequence[Window]) -> "Dataset":
        if not windows:
            return cls.empty(info)
        return cls(
            info,
            np.stack([w.signal for w in windows]),
            np.array([w.label for w in windows]),
            np.array([w.subject for w in windows]),
        )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Window:
        label = str(self.labels[i])
        return Window(self.X[i], label, int(self.subjects[i]), self.info.superclass(label))

    def __iter__(self) -> Iterator[Window]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, mask) -> "Dataset":
        return replace(self, X=self.X[mask], labels=self.labels[mask], subjects=self.subjects[mask])

    @property
    def subject_ids(self) -> list[int]:
        return sorted(set(self.subjects.tolist()))

    def superclasses(self) -> np.ndarray:
        static = np.isin(self.labels, self.info.static_labels)
        return np.where(static, Superclass.STATIC.value, Superclass.DYNAMIC.value)

    def label_indices(self, order: Sequence[str]) -> np.ndarray:
        lookup = {label: i for i, label in enumerate(order)}
        try:
            return np.array([lookup[str(label)] for label in self.labels], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]!r} is not in class order {list(order)}") from None


# ---------------------------------------------------------------------------
# UCI-HAR


def _read_matrix(path: Path, columns: int | None = None) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"malformed numeric text in {path}: {exc}") from None
    if columns is not None and arr.size and arr.shape[1] != columns:
        raise DataError(f"{path}: expected {columns} values per row, found {arr.shape[1]}")
    return arr


def _ucihar_split_dir(root: Path, split: str) -> Path:
    if (root / split).is_dir():
        return root / split
    nested = root / "UCI HAR Dataset" / split
    if nested.is_dir():
        return nested
    raise DataError(f"no '{split}' directory under {root}")


def load_ucihar(root: str | os.PathLike, split: str) -> Dataset:
    """Raw 9-channel inertial windows from the published UCI-HAR layout."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = _ucihar_split_dir(Path(root), split)
    channels = [
        _read_matrix(base / "Inertial Signals" / f"{sig}_{split}.txt", WINDOW_LEN)
        for sig in UCIHAR_SIGNALS
    ]
    y = _read_matrix(base / f"y_{split}.txt", 1)[:, 0]
    subjects = _read_matrix(base / f"subject_{split}.txt", 1)[:, 0]
    n = len(y)
    if any(len(c) != n for c in channels) or len(subjects) != n:
        raise DataError(f"{base}: signal, label and subject files disagree on row count")
    ids = y.astype(np.int64)
    if np.any(ids != y) or np.any((ids < 1) | (ids > len(UCIHAR_LABELS))):
        bad = y[(ids != y) | (ids < 1) | (ids > len(UCIHAR_LABELS))][0]
        raise DataError(f"{base}: unknown activity id {bad}")
    labels = np.array(UCIHAR_LABELS)[ids - 1]
    log.info("loaded UCI-HAR %s: %d windows", split, n)
    return Dataset(UCIHAR, np.stack(channels, axis=1), labels, subjects.astype(np.int64))


# ---------------------------------------------------------------------------
# MotionSense


@dataclass(frozen=True)
class Stream:
    subject: int
    trial_kind: str  # activity code, e.g. "jog"
    trial: int
    label: str
    data: np.ndarray  # [12, length]


_TRIAL_DIR = re.compile(r"^([a-z]{3})_(\d+)$")
_SUBJECT_FILE = re.compile(r"^sub_(\d+)\.csv$")


def _read_motionsense_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in MOTIONSENSE_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        cols = [header.index(c) for c in MOTIONSENSE_COLUMNS]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[c]) for c in cols])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: non-numeric or missing cell") from None
    return np.array(rows, dtype=np.float64).reshape(-1, len(cols)).T


def load_motionsense(root: str | os.PathLike) -> list[Stream]:
    """Every (trial, subject) stream under a DeviceMotion data directory.

    Channel order is attitude (roll, pitch, yaw), gravity xyz, rotation
    rate xyz, user acceleration xyz.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"MotionSense root not found: {root}")
    nested = root / "A_DeviceMotion_data"
    if nested.is_dir():
        root = nested
    trial_dirs = []
    for d in root.iterdir():
        m = _TRIAL_DIR.match(d.name)
        if d.is_dir() and m and m.group(1) in MOTIONSENSE_CODES:
            trial_dirs.append((m.group(1), int(m.group(2)), d))
    if not trial_dirs:
        raise DataError(f"no MotionSense trial directories under {root}")
    streams = []
    for code, trial, d in sorted(trial_dirs):
        files = []
        for f in d.iterdir():
            m = _SUBJECT_FILE.match(f.name)
            if m:
                files.append((int(m.group(1)), f))
        for subject, f in sorted(files):
            streams.append(Stream(subject, code, trial, MOTIONSENSE_CODES[code], _read_motionsense_csv(f)))
    log.info("loaded MotionSense: %d streams", len(streams))
    return streams


def window_stream(stream: Stream, length: int = WINDOW_LEN, overlap: float = 0.5) -> list[Window]:
    """Fixed-width windows at stride length*(1-overlap); partial tail dropped."""
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, int(round(length * (1 - overlap))))
    total = stream.data.shape[1]
    sc = MOTIONSENSE.superclass(stream.label) if stream.label in MOTIONSENSE.labels else None
    return [
        Window(stream.data[:, s : s + length].copy(), stream.label, stream.subject, sc)
        for s in range(0, total - length + 1, stride)
    ]


def motionsense_dataset(streams: Sequence[Stream], length: int = WINDOW_LEN, overlap: float = 0.5) -> Dataset:
    windows = [w for s in streams for w in window_stream(s, length, overlap)]
    return Dataset.from_windows(MOTIONSENSE, windows)


# ---------------------------------------------------------------------------
# splits and normalization


def partition_superclass(d: Dataset) -> tuple[Dataset, Dataset]:
    static = np.isin(d.labels, d.info.static_labels)
    return d.subset(static), d.subset(~static)


def subject_split(d: Dataset, train_subject_count: int, seed: int = 42) -> tuple[Dataset, Dataset]:
    """Subject-disjoint split: sorted ids, seeded shuffle, first k go to train."""
    subjects = d.subject_ids
    if not 0 < train_subject_count < len(subjects):
        raise ValueError(
            f"train_subject_count must be in [1, {len(subjects) - 1}], got {train_subject_count}"
        )
    order = np.random.default_rng(seed).permutation(len(subjects))
    train_ids = [subjects[i] for i in order[:train_subject_count]]
    in_train = np.isin(d.subjects, train_ids)
    return d.subset(in_train), d.subset(~in_train)


def holdout_split(d: Dataset, fraction: float = 0.1, seed: int = 42) -> tuple[Dataset, Dataset]:
    """(train, validation) holding out ``fraction`` of subjects, at least one."""
    n = len(d.subject_ids)
    if n < 2:
        raise ValueError("validation holdout needs at least two subjects")
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    return subject_split(d, n - n_val, seed)


def compute_stats(d: Dataset) -> ChannelStats:
    if len(d) == 0:
        raise DataError("cannot compute channel statistics of an empty dataset")
    mean = d.X.mean(axis=(0, 2))
    std = np.maximum(d.X.std(axis=(0, 2)), STD_FLOOR)
    return ChannelStats(mean, std)


def normalize(d: Dataset, stats: ChannelStats) -> Dataset:
    """Per-channel z-score with fixed statistics (taken from training data)."""
    X = (d.X - stats.mean[None, :, None]) / stats.std[None, :, None]
    return replace(d, X=X, channel_stats=stats)
