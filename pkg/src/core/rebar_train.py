"""
Self-reconstruction training of the REBAR network.

Each training item is a subsequence that serves as its own key: the model must
fill in the masked run of the query by retrieving from the unmasked copy.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.data import TimeSeries, TimeSeriesDataset, count_disjoint_windows
from core.masking import make_mask
from core.rebar_net import RebarModel, masked_mse, tensor_norms
from utils.config import RebarTrainConfig, receptive_field
from utils.errors import ConfigError, DataConsistencyError, TrainingDivergedError
from utils.io_utils import derive_rng, write_csv

logger = logging.getLogger(__name__)

# receptive field may differ from 3 x mask length by this share before warning
RF_TOLERANCE = 0.25

# derive_rng stream ids
_WINDOW_STREAM = 0
_MASK_STREAM = 1
_VAL_MASK_STREAM = 2


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainHistory:
    """Per-epoch losses; epoch 0 holds the untrained validation loss."""

    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def initial_val_loss(self) -> float:
        return self.records[0].val_loss

    @property
    def best_val_loss(self) -> float:
        return min(record.val_loss for record in self.records)

    @property
    def final_val_loss(self) -> float:
        return self.records[-1].val_loss

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(r.epoch, r.train_loss, r.val_loss) for r in self.records]


def write_loss_history(history: TrainHistory, path: Path) -> None:
    write_csv(path, ["epoch", "train_loss", "val_loss"], history.rows())


def reconstruction_loss(model: RebarModel, values: torch.Tensor, missing: torch.Tensor) -> torch.Tensor:
    """Batch mean of masked-position MSE, each item reconstructed from itself."""
    output = model(values, missing, values)
    return masked_mse(output.reconstruction, values, missing).mean()


def sample_windows(
    series: Sequence[TimeSeries], length: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw `count` windows uniformly over all valid (series, start) pairs: [count, T, D]."""
    usable = [s for s in series if s.length >= length]
    if not usable:
        raise DataConsistencyError(f"No series of length >= {length} to sample from")
    positions = np.array([s.length - length + 1 for s in usable], dtype=np.float64)
    picks = rng.choice(len(usable), size=count, p=positions / positions.sum())
    windows = []
    for pick in picks:
        s = usable[int(pick)]
        start = int(rng.integers(s.length - length + 1))
        windows.append(s.values[start:start + length])
    return np.stack(windows).astype(np.float32)


def disjoint_windows(series: Sequence[TimeSeries], length: int) -> np.ndarray:
    """All stride-T windows of the given series: [N, T, D]."""
    windows = [
        s.values[start:start + length]
        for s in series
        for start in range(0, s.length - length + 1, length)
    ]
    if not windows:
        raise DataConsistencyError(f"No window of length {length} fits in the given series")
    return np.stack(windows).astype(np.float32)


def mask_count(config: RebarTrainConfig) -> int:
    return config.extended_mask_len


def draw_masks(config: RebarTrainConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    """[count, T] bool masks of the configured training kind."""
    length = config.subseq_len
    return np.stack([
        make_mask(config.train_mask_kind, length, mask_count(config), rng).flags for _ in range(count)
    ])


def check_receptive_field(model: RebarModel, config: RebarTrainConfig) -> None:
    """Warn when the q/k/v receptive field is far from three times the mask length."""
    if model.config.linear_qkv:
        return
    field_size = receptive_field(model.config.base_kernel, model.config.num_layers)
    target = 3 * config.extended_mask_len
    if abs(field_size - target) > RF_TOLERANCE * target:
        logger.warning(
            "Receptive field %d is far from 3 x mask length (%d); reconstruction may under-use context",
            field_size,
            target,
        )


def _evaluate(model: RebarModel, values: np.ndarray, masks: np.ndarray, batch_size: int) -> float:
    dtype = next(model.parameters()).dtype
    total = 0.0
    with torch.no_grad():
        for begin in range(0, values.shape[0], batch_size):
            batch = torch.as_tensor(values[begin:begin + batch_size], dtype=dtype)
            missing = torch.as_tensor(masks[begin:begin + batch_size])
            total += float(reconstruction_loss(model, batch, missing)) * batch.shape[0]
    return total / values.shape[0]


def train_rebar(
    dataset: TimeSeriesDataset,
    model: RebarModel,
    config: RebarTrainConfig,
) -> Tuple[RebarModel, TrainHistory]:
    """
    Train by masked self-reconstruction with early stopping on validation loss.

    Every epoch draws fresh windows and fresh masks. Validation windows are the
    disjoint windows of the val split under masks fixed by the seed, so
    validation losses are comparable across epochs. The returned model carries
    the parameters of the best validation epoch (epoch 0 included).
    """
    if config.ablation_linear_qkv != model.config.linear_qkv:
        raise ConfigError(
            "rebar_train.ablation_linear_qkv must match the model's linear_qkv setting",
            details={"ablation_linear_qkv": config.ablation_linear_qkv, "linear_qkv": model.config.linear_qkv},
        )
    seed = config.seed if config.seed is not None else 0
    length = config.subseq_len
    train_series = dataset.split("train")
    val_series = dataset.split("val")
    if not train_series or not val_series:
        raise DataConsistencyError("REBAR training needs non-empty train and val splits")
    check_receptive_field(model, config)

    val_values = disjoint_windows(val_series, length)
    val_masks = draw_masks(config, val_values.shape[0], derive_rng(seed, _VAL_MASK_STREAM))
    samples_per_epoch = config.windows_per_epoch_factor * count_disjoint_windows(train_series, length)
    window_rng = derive_rng(seed, _WINDOW_STREAM)
    mask_rng = derive_rng(seed, _MASK_STREAM)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    dtype = next(model.parameters()).dtype

    history = TrainHistory()
    best_loss = _evaluate(model, val_values, val_masks, config.batch_size)
    history.records.append(EpochRecord(epoch=0, train_loss=math.nan, val_loss=best_loss))
    best_state = copy.deepcopy(model.state_dict())
    logger.info(
        "Training REBAR: %d samples/epoch, %d val windows, initial val loss %.6f",
        samples_per_epoch,
        val_values.shape[0],
        best_loss,
    )

    stale_epochs = 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        values = sample_windows(train_series, length, samples_per_epoch, window_rng)
        masks = draw_masks(config, samples_per_epoch, mask_rng)
        total = 0.0
        for batch_index, begin in enumerate(range(0, samples_per_epoch, config.batch_size)):
            batch = torch.as_tensor(values[begin:begin + config.batch_size], dtype=dtype)
            missing = torch.as_tensor(masks[begin:begin + config.batch_size])
            loss = reconstruction_loss(model, batch, missing)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"Non-finite reconstruction loss at epoch {epoch}, batch {batch_index}",
                    details={"epoch": epoch, "batch": batch_index, "parameter_norms": dict(tensor_norms(model))},
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * batch.shape[0]

        model.eval()
        train_loss = total / samples_per_epoch
        val_loss = _evaluate(model, val_values, val_masks, config.batch_size)
        history.records.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        logger.info("epoch %d: train %.6f val %.6f", epoch, train_loss, val_loss)

        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                history.stopped_early = True
                logger.info("Early stop after epoch %d (best epoch %d)", epoch, history.best_epoch)
                break

    model.load_state_dict(best_state)
    model.eval()
    return model, history

