"""
Time-series datasets: in-memory types, on-disk format, synthetic motif data
and subsequence sampling.

On disk a dataset is a directory holding ``meta.json`` plus, per series, a
``<id>.f32`` payload (float32 little-endian, row-major [U x D]) and a
``<id>.i32`` payload (int32 little-endian labels, -1 = unlabeled).
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.config import SyntheticConfig
from utils.errors import (
    ConfigError,
    DataConsistencyError,
    DataFormatError,
    DataValidationError,
    SegmentNotFoundError,
    SizeError,
)
from utils.io_utils import atomic_write_bytes, ensure_dir, write_json

logger = logging.getLogger(__name__)

META_FILE = "meta.json"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
UNLABELED = -1

# rejection attempts before falling back to an exhaustive scan
MAX_REJECTION_ATTEMPTS = 1000


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimeSeries:
    """One long multichannel recording with per-timestep labels."""

    series_id: str
    values: np.ndarray  # [U, D] float32
    labels: np.ndarray  # [U] int32, -1 = unlabeled
    sample_rate_hz: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int32)
        if values.ndim != 2:
            raise SizeError(f"Series {self.series_id}: values must be [U x D], got shape {values.shape}")
        if labels.shape != (values.shape[0],):
            raise SizeError(
                f"Series {self.series_id}: {labels.shape[0] if labels.ndim else 0} labels for {values.shape[0]} timesteps"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.count_nonzero(~np.isfinite(values)))
            raise DataValidationError(f"Series {self.series_id}: {bad} non-finite value(s)")
        if self.sample_rate_hz <= 0 or not np.isfinite(self.sample_rate_hz):
            raise DataValidationError(f"Series {self.series_id}: sample_rate_hz must be positive")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def length(self) -> int:
        return int(self.values.shape[0])

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class Subsequence:
    """A length-T window of a series."""

    values: np.ndarray  # [T, D]
    source_series_id: str
    start_index: int
    label: int = UNLABELED

    @property
    def length(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class TimeSeriesDataset:
    """A collection of series sharing channel count and sampling rate."""

    series: Tuple[TimeSeries, ...]
    num_classes: int
    class_names: Tuple[str, ...]
    split_assignment: Dict[str, str] = field(default_factory=dict)
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.num_classes < 1:
            raise DataValidationError(f"num_classes must be positive, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise DataConsistencyError(
                f"{len(self.class_names)} class names for {self.num_classes} classes"
            )
        ids = [s.series_id for s in self.series]
        if len(set(ids)) != len(ids):
            raise DataConsistencyError("Duplicate series ids in dataset")
        if self.series:
            channels = {s.channels for s in self.series}
            if len(channels) > 1:
                counts = {s.series_id: s.channels for s in self.series}
                raise DataConsistencyError(f"Series disagree on channel count: {sorted(channels)}", details=counts)
            rates = {s.sample_rate_hz for s in self.series}
            if len(rates) > 1:
                raise DataConsistencyError(f"Series disagree on sample rate: {sorted(rates)}")
        for s in self.series:
            labels = s.labels
            bad = (labels != UNLABELED) & ((labels < 0) | (labels >= self.num_classes))
            if np.any(bad):
                raise DataValidationError(
                    f"Series {s.series_id}: labels outside [-1, {self.num_classes})",
                    details={"first_bad_index": int(np.argmax(bad))},
                )
        for series_id, split in self.split_assignment.items():
            if split not in SPLITS:
                raise DataConsistencyError(f"Series {series_id}: unknown split {split!r}")
            if series_id not in ids:
                raise DataConsistencyError(f"Split assignment names unknown series {series_id}")

    @property
    def channels(self) -> Optional[int]:
        return self.series[0].channels if self.series else None

    def get(self, series_id: str) -> TimeSeries:
        for s in self.series:
            if s.series_id == series_id:
                return s
        raise KeyError(series_id)

    def split(self, name: str) -> List[TimeSeries]:
        """Series assigned to a split, in dataset order."""
        if name not in SPLITS:
            raise DataConsistencyError(f"Unknown split {name!r}")
        return [s for s in self.series if self.split_assignment.get(s.series_id) == name]


def assign_splits(series_ids: Sequence[str], seed: int) -> Dict[str, str]:
    """Seeded 70/15/15 series-level split; each series lands in exactly one split."""
    n = len(series_ids)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
    n_val = min(n_val, n - n_train)
    assignment = {}
    for rank, index in enumerate(order):
        if rank < n_train:
            split = "train"
        elif rank < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[series_ids[index]] = split
    return assignment


# --- on-disk format -------------------------------------------------------


def save_dataset(dataset: TimeSeriesDataset, path: Path) -> None:
    """Write the dataset directory; every file is replaced atomically."""
    path = Path(path)
    ensure_dir(path)
    records = []
    for s in dataset.series:
        value_file = f"{s.series_id}.f32"
        label_file = f"{s.series_id}.i32"
        atomic_write_bytes(path / value_file, s.values.astype("<f4").tobytes(order="C"))
        atomic_write_bytes(path / label_file, s.labels.astype("<i4").tobytes(order="C"))
        records.append({
            "series_id": s.series_id,
            "U": s.length,
            "D": s.channels,
            "sample_rate_hz": s.sample_rate_hz,
            "value_file": value_file,
            "label_file": label_file,
            "split": dataset.split_assignment.get(s.series_id),
        })
    meta = {
        "format_version": FORMAT_VERSION,
        "name": dataset.name,
        "num_classes": dataset.num_classes,
        "class_names": list(dataset.class_names),
        "series": records,
    }
    write_json(path / META_FILE, meta)


def _read_payload(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.exists():
        raise DataFormatError(f"Payload file missing: {path}")
    raw = path.read_bytes()
    expected = count * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DataFormatError(f"Payload {path} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype).copy()


def load_dataset(path: Path) -> TimeSeriesDataset:
    """Load a dataset directory written by save_dataset."""
    path = Path(path)
    meta_path = path / META_FILE
    if not meta_path.exists():
        raise DataFormatError(f"Dataset metadata not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        num_classes = int(meta["num_classes"])
        class_names = [str(name) for name in meta["class_names"]]
        records = list(meta["series"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"Corrupt dataset metadata in {meta_path}: {exc}") from exc

    series = []
    splits = {}
    for record in records:
        try:
            series_id = str(record["series_id"])
            length, channels = int(record["U"]), int(record["D"])
            rate = float(record["sample_rate_hz"])
            value_file, label_file = record["value_file"], record["label_file"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"Corrupt series record in {meta_path}: {exc}") from exc
        values = _read_payload(path / value_file, "<f4", length * channels).reshape(length, channels)
        labels = _read_payload(path / label_file, "<i4", length)
        series.append(TimeSeries(series_id=series_id, values=values, labels=labels, sample_rate_hz=rate))
        if record.get("split") is not None:
            splits[series_id] = str(record["split"])

    return TimeSeriesDataset(
        series=tuple(series),
        num_classes=num_classes,
        class_names=tuple(class_names),
        split_assignment=splits,
        name=str(meta.get("name", path.name)),
    )


def import_csv_directory(
    csv_dir: Path,
    class_names: Sequence[str],
    sample_rate_hz: float,
    seed: int = 0,
    name: Optional[str] = None,
) -> TimeSeriesDataset:
    """Convert a directory of CSV files (D value columns + 1 label column per row) into a dataset."""
    csv_dir = Path(csv_dir)
    files = sorted(csv_dir.glob("*.csv"))
    if not files:
        raise DataFormatError(f"No CSV files found in {csv_dir}")
    series = []
    for csv_path in files:
        try:
            table = np.loadtxt(csv_path, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError:
            # tolerate a header row
            table = np.loadtxt(csv_path, delimiter=",", ndmin=2, dtype=np.float64, skiprows=1)
        if table.shape[1] < 2:
            raise DataFormatError(f"{csv_path} needs at least one value column and a label column")
        labels = table[:, -1]
        if not np.all(labels == np.round(labels)):
            raise DataFormatError(f"{csv_path}: label column must hold integers")
        series.append(TimeSeries(
            series_id=csv_path.stem,
            values=table[:, :-1].astype(np.float32),
            labels=labels.astype(np.int32),
            sample_rate_hz=sample_rate_hz,
        ))
    ids = [s.series_id for s in series]
    return TimeSeriesDataset(
        series=tuple(series),
        num_classes=len(class_names),
        class_names=tuple(class_names),
        split_assignment=assign_splits(ids, seed),
        name=name or csv_dir.name,
    )


# --- synthetic motif data ------------------------------------------------


def _motif_templates(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth random curves, [C, motifs_per_class, motif_length, D], peak amplitude 1."""
    t = np.linspace(0.0, 1.0, config.motif_length)
    shape = (config.num_classes, config.motifs_per_class, config.channels)
    templates = np.zeros(shape + (config.motif_length,))
    for harmonic in range(1, 4):
        amplitude = rng.normal(size=shape) / harmonic
        phase = rng.uniform(0.0, 2 * np.pi, size=shape)
        templates += amplitude[..., None] * np.sin(2 * np.pi * harmonic * t + phase[..., None])
    # taper so motifs start and end near zero
    templates *= np.sin(np.pi * t) ** 2
    peak = np.abs(templates).max(axis=-1, keepdims=True)
    templates /= np.where(peak > 0, peak, 1.0)
    return np.moveaxis(templates, -1, 2)


def generate_synthetic(config: SyntheticConfig) -> TimeSeriesDataset:
    """Series of class segments, each embedding its class's motif templates plus noise."""
    low, high = config.segment_length_range
    if low < config.motif_length:
        raise ConfigError(
            f"segment_length_range min ({low}) is shorter than motif_length ({config.motif_length})"
        )
    rng = np.random.default_rng(config.seed)
    templates = _motif_templates(config, rng)
    length, motif_len = config.series_length, config.motif_length

    series = []
    for index in range(config.num_series):
        values = np.zeros((length, config.channels))
        labels = np.empty(length, dtype=np.int32)
        cursor = 0
        while cursor < length:
            seg_len = int(rng.integers(low, high + 1))
            seg_end = min(cursor + seg_len, length)
            label = int(rng.integers(config.num_classes))
            labels[cursor:seg_end] = label
            # non-overlapping motif copies at random gaps; the first copy always fits
            position = cursor
            while position + motif_len <= seg_end:
                gap = int(rng.integers(0, motif_len // 2 + 1))
                if position + gap + motif_len > seg_end:
                    if position > cursor:
                        break
                    gap = seg_end - motif_len - position
                position += gap
                motif = templates[label, int(rng.integers(config.motifs_per_class))]
                values[position:position + motif_len] = motif
                position += motif_len
            cursor = seg_end
        if config.noise_std > 0:
            values += rng.normal(scale=config.noise_std, size=values.shape)
        series.append(TimeSeries(
            series_id=f"series_{index:04d}",
            values=values.astype(np.float32),
            labels=labels,
            sample_rate_hz=config.sample_rate_hz,
        ))

    ids = [s.series_id for s in series]
    return TimeSeriesDataset(
        series=tuple(series),
        num_classes=config.num_classes,
        class_names=tuple(f"class_{c}" for c in range(config.num_classes)),
        split_assignment=assign_splits(ids, config.seed),
        name=config.name,
    )


# --- sampling -------------------------------------------------------------


def uniform_label(labels: np.ndarray) -> int:
    """The window's label when every timestep agrees on one class, else -1."""
    if labels.size == 0:
        return UNLABELED
    first = int(labels[0])
    if first == UNLABELED or np.any(labels != first):
        return UNLABELED
    return first


def make_subsequence(series: TimeSeries, start: int, length: int) -> Subsequence:
    """Cut series[start : start + length]."""
    if start < 0 or start + length > series.length:
        raise SizeError(
            f"Window [{start}, {start + length}) outside series {series.series_id} of length {series.length}"
        )
    return Subsequence(
        values=series.values[start:start + length],
        source_series_id=series.series_id,
        start_index=int(start),
        label=uniform_label(series.labels[start:start + length]),
    )


def class_window_starts(series: TimeSeries, length: int, class_id: int) -> np.ndarray:
    """All start indices whose window is labelled class_id throughout."""
    if length > series.length:
        return np.empty(0, dtype=np.int64)
    hits = np.concatenate([[0], np.cumsum(series.labels == class_id)])
    counts = hits[length:] - hits[:-length]
    return np.flatnonzero(counts == length)


def rand_segment(
    series: TimeSeries,
    length: int,
    rng: np.random.Generator,
    class_filter: Optional[int] = None,
) -> Subsequence:
    """Uniformly placed window; with class_filter, one whose every timestep has that class."""
    if length > series.length:
        raise SizeError(f"T={length} exceeds length {series.length} of series {series.series_id}")
    n_starts = series.length - length + 1
    if class_filter is None:
        return make_subsequence(series, int(rng.integers(n_starts)), length)

    for _ in range(MAX_REJECTION_ATTEMPTS):
        start = int(rng.integers(n_starts))
        if np.all(series.labels[start:start + length] == class_filter):
            return make_subsequence(series, start, length)

    valid = class_window_starts(series, length, class_filter)
    if valid.size == 0:
        raise SegmentNotFoundError(
            f"No window of length {length} with class {class_filter} in series {series.series_id}",
            details={"series_id": series.series_id, "class": class_filter, "length": length},
        )
    return make_subsequence(series, int(rng.choice(valid)), length)


def sample_anchor_and_candidates(
    series: TimeSeries,
    length: int,
    n_cand: int,
    rng: np.random.Generator,
) -> Tuple[Subsequence, List[Subsequence]]:
    """One uniform anchor and n_cand candidates with distinct start indices."""
    if n_cand < 1:
        raise SizeError(f"n_cand must be >= 1, got {n_cand}")
    if series.length < length:
        raise SizeError(f"Series {series.series_id} of length {series.length} is shorter than T={length}")
    n_starts = series.length - length + 1
    if n_cand > n_starts:
        raise SizeError(f"Cannot draw {n_cand} distinct candidates from {n_starts} window positions")
    anchor = make_subsequence(series, int(rng.integers(n_starts)), length)
    starts = rng.choice(n_starts, size=n_cand, replace=False)
    return anchor, [make_subsequence(series, int(start), length) for start in starts]


def labeled_windows(dataset: TimeSeriesDataset, split: str, length: int) -> List[Subsequence]:
    """Disjoint stride-T windows of a split whose timesteps share one class."""
    windows = []
    for s in dataset.split(split):
        for start in range(0, s.length - length + 1, length):
            window = make_subsequence(s, start, length)
            if window.label != UNLABELED:
                windows.append(window)
    return windows


def count_disjoint_windows(series: Sequence[TimeSeries], length: int) -> int:
    """Number of disjoint length-T windows across the given series."""
    return sum(s.length // length for s in series)
