"""Self-reconstruction training of the REBAR network."""

import logging
import math

import numpy as np
import pytest
import torch

from core.checkpoint import parameter_checksum
from core.rebar_net import build_rebar_model
from core.rebar_train import (
    check_receptive_field,
    disjoint_windows,
    draw_masks,
    reconstruction_loss,
    sample_windows,
    train_rebar,
    write_loss_history,
)
from utils.config import RebarConfig, RebarTrainConfig
from utils.errors import ConfigError
from utils.io_utils import read_csv_rows


def _train_config(**overrides) -> RebarTrainConfig:
    values = dict(subseq_len=32, extended_mask_len=6, batch_size=16, max_epochs=2, patience=2, seed=5)
    values.update(overrides)
    return RebarTrainConfig(**values)


def _model(seed: int = 0):
    return build_rebar_model(RebarConfig(
        in_channels=1, embed_channels=8, bottleneck_channels=4, base_kernel=7,
        num_layers=2, num_heads=2, init_seed=seed,
    ))


def test_zero_learning_rate_leaves_parameters_unchanged(tiny_dataset):
    model = _model()
    before = parameter_checksum(model)
    model, history = train_rebar(tiny_dataset, model, _train_config(learning_rate=0.0))
    assert parameter_checksum(model) == before
    val_losses = [record.val_loss for record in history.records]
    assert val_losses == pytest.approx([val_losses[0]] * len(val_losses))


def test_training_is_deterministic_and_records_epoch_zero(tiny_dataset, tmp_path):
    first, history = train_rebar(tiny_dataset, _model(), _train_config())
    second, repeat = train_rebar(tiny_dataset, _model(), _train_config())
    assert parameter_checksum(first) == parameter_checksum(second)
    np.testing.assert_array_equal(np.array(history.rows()), np.array(repeat.rows()))
    assert history.records[0].epoch == 0
    assert math.isnan(history.records[0].train_loss)
    assert history.best_val_loss <= history.initial_val_loss

    path = tmp_path / "loss_history.csv"
    write_loss_history(history, path)
    rows = read_csv_rows(path)
    assert rows[0] == ["epoch", "train_loss", "val_loss"]
    assert rows[1][1] == ""
    assert len(rows) == len(history.records) + 1


def test_loss_scales_with_the_square_of_the_input():
    model = _model().double()
    values = torch.randn(3, 32, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    missing = torch.zeros(3, 32, dtype=torch.bool)
    missing[:, 4:10] = True
    loss = reconstruction_loss(model, values, missing)
    scaled = reconstruction_loss(model, values * 10.0, missing)
    # RevIN makes the reconstruction equivariant to scale, so the loss grows with its square
    assert float(scaled) == pytest.approx(100.0 * float(loss), rel=1e-6)


def test_ablation_flag_must_match_model(tiny_dataset):
    with pytest.raises(ConfigError):
        train_rebar(tiny_dataset, _model(), _train_config(ablation_linear_qkv=True))


def test_receptive_field_warning(caplog):
    with caplog.at_level(logging.WARNING):
        check_receptive_field(_model(), _train_config(extended_mask_len=6))
    assert "Receptive field" not in caplog.text
    with caplog.at_level(logging.WARNING):
        check_receptive_field(_model(), _train_config(extended_mask_len=20))
    assert "Receptive field" in caplog.text


def test_window_sampling_and_masks(tiny_dataset):
    rng = np.random.default_rng(0)
    train = tiny_dataset.split("train")
    windows = sample_windows(train, 32, 50, rng)
    assert windows.shape == (50, 32, 1)
    assert disjoint_windows(train, 32).shape[0] == sum(s.length // 32 for s in train)
    masks = draw_masks(_train_config(), 10, rng)
    assert masks.shape == (10, 32)
    assert (masks.sum(axis=1) == 6).all()
    transient = draw_masks(_train_config(train_mask_kind="transient"), 10, rng)
    assert (transient.sum(axis=1) == 6).all()
