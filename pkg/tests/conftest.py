"""Shared fixtures: put src/ on the path and build small datasets."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from core.data import TimeSeries, TimeSeriesDataset, generate_synthetic  # noqa: E402
from utils.config import RebarConfig, SyntheticConfig  # noqa: E402


@pytest.fixture
def tiny_synthetic_config() -> SyntheticConfig:
    return SyntheticConfig(
        num_classes=3,
        num_series=12,
        series_length=600,
        motif_length=12,
        segment_length_range=(80, 140),
        seed=0,
    )


@pytest.fixture
def tiny_dataset(tiny_synthetic_config) -> TimeSeriesDataset:
    return generate_synthetic(tiny_synthetic_config)


@pytest.fixture
def tiny_rebar_config() -> RebarConfig:
    return RebarConfig(
        in_channels=1,
        embed_channels=8,
        bottleneck_channels=4,
        base_kernel=3,
        num_layers=1,
        num_heads=2,
        init_seed=0,
    )


def block_series(series_id: str, blocks, block_len: int, channels: int = 1, rate: float = 50.0) -> TimeSeries:
    """Series made of constant class blocks; values equal the class id plus a ramp."""
    labels = np.repeat(np.asarray(blocks, dtype=np.int32), block_len)
    ramp = np.linspace(0.0, 0.1, labels.shape[0])
    values = (labels[:, None] + ramp[:, None]) * np.ones((1, channels))
    return TimeSeries(series_id=series_id, values=values.astype(np.float32), labels=labels, sample_rate_hz=rate)


@pytest.fixture
def block_dataset() -> TimeSeriesDataset:
    """Two series each containing classes 0, 1, 2 in long blocks."""
    series = (
        block_series("a", [0, 1, 2, 0], 50),
        block_series("b", [2, 1, 0, 1], 50),
    )
    return TimeSeriesDataset(
        series=series,
        num_classes=3,
        class_names=("zero", "one", "two"),
        split_assignment={"a": "train", "b": "test"},
        name="blocks",
    )
