"""
Temporal encoder mapping a subsequence to a fixed-length embedding.

Shape: pointwise input projection, residual blocks of two dilated convolutions
each (dilation 2^b), pointwise projection to embed_dim, global max pool over time.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.checkpoint import check_config, read_checkpoint, restore_parameters, save_checkpoint
from core.data import Subsequence
from utils.config import EncoderConfig
from utils.errors import ConfigError, DataValidationError, SizeError

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "encoder"
ENCODE_BATCH = 256


class ResidualConvBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int):
        super().__init__()
        padding = dilation * (kernel - 1) // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=padding, dilation=dilation)
        self.conv2 = nn.Conv1d(channels, channels, kernel, padding=padding, dilation=dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.gelu(x))
        h = self.conv2(F.gelu(h))
        return x + h


class TemporalEncoder(nn.Module):
    """Dilated residual convolution encoder with global max pooling."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.in_channels is None:
            raise ConfigError("EncoderConfig.in_channels must be set before building the encoder")
        self.config = config
        # default torch init, drawn from a private generator state
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.init_seed or 0)
            self.input_fc = nn.Linear(config.in_channels, config.hidden_channels)
            self.blocks = nn.ModuleList([
                ResidualConvBlock(config.hidden_channels, config.kernel, 2**block)
                for block in range(config.num_blocks)
            ])
            self.output_proj = nn.Conv1d(config.hidden_channels, config.embed_dim, 1)

    def timestep_features(self, x: torch.Tensor) -> torch.Tensor:
        """[B, T, D] -> [B, embed_dim, T] features before pooling."""
        h = self.input_fc(x).transpose(1, 2)
        for block in self.blocks:
            h = block(h)
        return self.output_proj(h)

    @staticmethod
    def pool(features: torch.Tensor) -> torch.Tensor:
        return features.max(dim=-1).values

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.in_channels:
            raise SizeError(f"Encoder expects D={self.config.in_channels}, got D={x.shape[-1]}")
        return self.pool(self.timestep_features(x))


def build_encoder(config: EncoderConfig, in_channels: Optional[int] = None) -> TemporalEncoder:
    if config.in_channels is None:
        if in_channels is None:
            raise ConfigError("encoder.in_channels is unset and no dataset channel count was given")
        config = config.model_copy(update={"in_channels": in_channels})
    elif in_channels is not None and config.in_channels != in_channels:
        raise SizeError(f"encoder.in_channels={config.in_channels} but the dataset has D={in_channels}")
    return TemporalEncoder(config)


def encode(subsequence: Subsequence, encoder: TemporalEncoder) -> np.ndarray:
    """Embedding vector [embed_dim] of one subsequence."""
    return encode_windows([subsequence.values], encoder)[0]


def encode_windows(windows: Sequence[np.ndarray], encoder: TemporalEncoder) -> np.ndarray:
    """Embed [T x D] arrays in batches: [N, embed_dim]."""
    if len(windows) == 0:
        return np.zeros((0, encoder.config.embed_dim), dtype=np.float32)
    values = np.stack([np.asarray(w) for w in windows])
    if not np.all(np.isfinite(values)):
        raise DataValidationError("Cannot encode non-finite values")
    if values.shape[-1] != encoder.config.in_channels:
        raise SizeError(f"Encoder expects D={encoder.config.in_channels}, got D={values.shape[-1]}")
    dtype = next(encoder.parameters()).dtype
    was_training = encoder.training
    encoder.eval()
    outputs = []
    with torch.no_grad():
        for begin in range(0, values.shape[0], ENCODE_BATCH):
            batch = torch.as_tensor(values[begin:begin + ENCODE_BATCH], dtype=dtype)
            outputs.append(encoder(batch).cpu().numpy())
    encoder.train(was_training)
    return np.concatenate(outputs).astype(np.float32)


def save_encoder(encoder: TemporalEncoder, path: Path) -> None:
    save_checkpoint(encoder, CHECKPOINT_KIND, encoder.config.model_dump(mode="json"), path)


def load_encoder(path: Path, config: EncoderConfig, in_channels: Optional[int] = None) -> TemporalEncoder:
    checkpoint = read_checkpoint(path, CHECKPOINT_KIND)
    encoder = build_encoder(config, in_channels)
    check_config(checkpoint, encoder.config.model_dump(mode="json"), ignore=("init_seed",))
    restore_parameters(encoder, checkpoint)
    return encoder.eval()
