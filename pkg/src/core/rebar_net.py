"""
REBAR cross-attention reconstruction network.

A masked query subsequence is reconstructed purely from content retrieved out
of a key subsequence. Query, key and value transforms are stacks of dilated
partial convolutions; attention weights decide which key positions are read.
The query reaches the output only through those weights and through the
per-channel RevIN statistics, which are returned so the retrieval path can be
replayed on its own (see reconstruct_from_weights).

Tensors inside the network are channels-first: [batch, channels, time].
Domain wrappers at the bottom take and return numpy [T x D] arrays.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.checkpoint import (
    check_config,
    parameter_checksum,
    read_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from core.data import Subsequence
from core.masking import Mask, MaskedSubsequence, apply_mask
from utils.config import RebarConfig
from utils.errors import ConfigError, InputValidationError, SizeError

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-3


# --- masking-aware building blocks ----------------------------------------


def partial_conv1d(
    x: torch.Tensor,
    missing: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    dilation: int = 1,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Convolution over valid taps only, rescaled by total/valid tap count.

    Args:
        x: [B, C_in, T] input
        missing: [B, T] bool, True where the input is missing
        weight: [C_out, C_in, K] kernel, K odd
        bias: optional [C_out]
        dilation: tap spacing

    Returns:
        ([B, C_out, T] output, [B, T] output missing mask). Border padding
        counts as missing; positions with no valid tap output 0 and stay missing.
    """
    kernel = weight.shape[-1]
    padding = dilation * (kernel - 1) // 2
    valid = (~missing).to(x.dtype).unsqueeze(1)

    out = F.conv1d(x * valid, weight, None, padding=padding, dilation=dilation)
    taps = torch.ones(1, 1, kernel, dtype=x.dtype, device=x.device)
    valid_taps = F.conv1d(valid, taps, None, padding=padding, dilation=dilation)
    has_valid = valid_taps > 0

    scale = torch.where(has_valid, kernel / valid_taps.clamp(min=1.0), torch.zeros_like(valid_taps))
    out = out * scale
    if bias is not None:
        out = out + bias.view(1, -1, 1)
    out = out * has_valid.to(x.dtype)
    return out, ~has_valid.squeeze(1)


def masked_instance_norm(x: torch.Tensor, missing: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-channel instance norm over unmasked positions; masked positions output 0."""
    valid = (~missing).to(x.dtype).unsqueeze(1)
    count = valid.sum(dim=-1, keepdim=True).clamp(min=1.0)
    mean = (x * valid).sum(dim=-1, keepdim=True) / count
    var = (((x - mean) * valid) ** 2).sum(dim=-1, keepdim=True) / count
    return (x - mean) / torch.sqrt(var + eps) * valid


class PartialConv1d(nn.Module):
    """Learnable wrapper around partial_conv1d."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1, dilation: int = 1):
        super().__init__()
        self.dilation = dilation
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor, missing: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return partial_conv1d(x, missing, self.weight, self.bias, self.dilation)


class DilatedConvBlock(nn.Module):
    """Instance norm, 1x1 bottleneck, dilated partial conv, 1x1 expand, residual sum."""

    def __init__(self, channels: int, bottleneck: int, kernel: int, dilation: int, eps: float):
        super().__init__()
        self.eps = eps
        self.squeeze = PartialConv1d(channels, bottleneck, 1)
        self.conv = PartialConv1d(bottleneck, bottleneck, kernel, dilation)
        self.expand = PartialConv1d(bottleneck, channels, 1)

    def forward(self, x: torch.Tensor, missing: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = masked_instance_norm(x, missing, self.eps)
        h, _ = self.squeeze(h, missing)
        h, out_missing = self.conv(F.gelu(h), missing)
        h, _ = self.expand(F.gelu(h), out_missing)
        return x + h, out_missing


class DilatedConvStack(nn.Module):
    """Pointwise input projection followed by blocks with dilation 2^l."""

    def __init__(self, in_channels: int, config: RebarConfig, num_layers: int):
        super().__init__()
        self.project = PartialConv1d(in_channels, config.embed_channels, 1)
        self.blocks = nn.ModuleList([
            DilatedConvBlock(
                config.embed_channels,
                config.bottleneck_channels,
                config.base_kernel,
                2**layer,
                config.revin_eps,
            )
            for layer in range(num_layers)
        ])

    def forward(self, x: torch.Tensor, missing: torch.Tensor) -> torch.Tensor:
        h, missing = self.project(x, missing)
        for block in self.blocks:
            h, missing = block(h, missing)
        return h


def dilated_conv_stack(stack: DilatedConvStack, x: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Run a stack on one [T x C] array; returns [T x embed_channels]."""
    dtype = next(stack.parameters()).dtype
    with torch.no_grad():
        out = stack(
            torch.as_tensor(np.asarray(x).T[None], dtype=dtype),
            torch.as_tensor(np.asarray(missing, dtype=bool)[None]),
        )
    return out[0].T.cpu().numpy()


# --- reversible instance normalization ----------------------------------


@dataclass
class RevinStats:
    """Per-channel query statistics; fallback marks channels with no visible timestep."""

    mean: torch.Tensor  # [B, 1, D]
    std: torch.Tensor  # [B, 1, D]
    fallback: torch.Tensor  # [B, D] bool

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.std + self.mean

    def select(self, index: int) -> "RevinStats":
        return RevinStats(self.mean[index:index + 1], self.std[index:index + 1], self.fallback[index:index + 1])


def revin_stats(query: torch.Tensor, missing: torch.Tensor, eps: float) -> RevinStats:
    """Statistics of a [B, T, D] query over its unmasked timesteps, std floored at eps."""
    valid = (~missing).to(query.dtype).unsqueeze(-1)
    count = valid.sum(dim=1, keepdim=True)
    safe = count.clamp(min=1.0)
    mean = (query * valid).sum(dim=1, keepdim=True) / safe
    var = (((query - mean) * valid) ** 2).sum(dim=1, keepdim=True) / safe
    std = torch.sqrt(var).clamp(min=eps)
    empty = count == 0
    mean = torch.where(empty, torch.zeros_like(mean), mean)
    std = torch.where(empty, torch.ones_like(std), std)
    fallback = empty.expand(-1, -1, query.shape[-1]).squeeze(1)
    return RevinStats(mean=mean.detach(), std=std.detach(), fallback=fallback)


def revin_normalize(
    query: MaskedSubsequence, key: Subsequence, eps: float
) -> Tuple[np.ndarray, np.ndarray, RevinStats]:
    """Normalize query and key with the query's unmasked statistics."""
    q = torch.as_tensor(np.asarray(query.values, dtype=np.float64)[None])
    k = torch.as_tensor(np.asarray(key.values, dtype=np.float64)[None])
    stats = revin_stats(q, torch.as_tensor(query.mask.flags[None]), eps)
    return stats.normalize(q)[0].numpy(), stats.normalize(k)[0].numpy(), stats


def revin_denormalize(x: np.ndarray, stats: RevinStats) -> np.ndarray:
    out = stats.denormalize(torch.as_tensor(np.asarray(x, dtype=np.float64)[None], dtype=stats.mean.dtype))
    return out[0].numpy()


# --- the model -----------------------------------------------------------


@dataclass
class RebarOutput:
    reconstruction: torch.Tensor  # [B, Tq, D]
    attention: torch.Tensor  # [B, H, Tq, Tk]
    stats: RevinStats


class RebarModel(nn.Module):
    """
    Cross-attention reconstruction of a masked query from a key.

    There is no positional encoding and no query value path: the output is
    the aggregated mixture of value features read from the key.
    """

    def __init__(self, config: RebarConfig):
        super().__init__()
        if config.in_channels is None:
            raise ConfigError("RebarConfig.in_channels must be set before building the model")
        self.config = config
        channels = config.in_channels
        embed = config.embed_channels
        layers = 0 if config.linear_qkv else config.num_layers

        self.query_net = DilatedConvStack(channels, config, layers)
        self.key_net = DilatedConvStack(channels, config, layers)
        self.value_net = DilatedConvStack(channels, config, layers)
        self.query_proj = nn.Linear(embed, embed)
        self.key_proj = nn.Linear(embed, embed)
        self.value_proj = nn.Linear(embed, embed)
        self.aggregate = nn.Linear(embed, channels)

        self.reset_parameters(config.init_seed or 0)

    @property
    def num_heads(self) -> int:
        return self.config.num_heads

    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled uniform weights, zero biases, drawn in parameter-name order."""
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.endswith("bias"):
                    param.zero_()
                    continue
                fan_in = param[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                values = torch.rand(param.shape, generator=generator, dtype=torch.float64)
                param.copy_((values * 2.0 - 1.0) * bound)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, embed = x.shape
        return x.view(batch, length, self.num_heads, embed // self.num_heads).transpose(1, 2)

    def attention_logits(self, query_norm: torch.Tensor, missing: torch.Tensor, key_norm: torch.Tensor) -> torch.Tensor:
        """[B, H, Tq, Tk] logits from normalized [B, T, D] query and key."""
        no_missing = torch.zeros(key_norm.shape[:2], dtype=torch.bool, device=key_norm.device)
        q = self.query_net(query_norm.transpose(1, 2), missing).transpose(1, 2)
        k = self.key_net(key_norm.transpose(1, 2), no_missing).transpose(1, 2)
        q = self._split_heads(self.query_proj(q))
        k = self._split_heads(self.key_proj(k))
        logits = q @ k.transpose(-1, -2)
        if self.config.softmax_scale:
            logits = logits / math.sqrt(self.config.embed_channels)
        return logits

    def retrieve(self, attention: torch.Tensor, key_norm: torch.Tensor, stats: RevinStats) -> torch.Tensor:
        """Value path only: mix key value features by attention, aggregate heads, undo RevIN."""
        no_missing = torch.zeros(key_norm.shape[:2], dtype=torch.bool, device=key_norm.device)
        v = self.value_net(key_norm.transpose(1, 2), no_missing).transpose(1, 2)
        v = self._split_heads(self.value_proj(v))
        mixed = attention @ v  # [B, H, Tq, E/H]
        batch, heads, length, width = mixed.shape
        mixed = mixed.transpose(1, 2).reshape(batch, length, heads * width)
        return stats.denormalize(self.aggregate(mixed))

    def forward(self, query: torch.Tensor, missing: torch.Tensor, key: torch.Tensor) -> RebarOutput:
        """
        Args:
            query: [B, Tq, D] values; masked entries are ignored whatever they hold
            missing: [B, Tq] bool, True where the query is masked
            key: [B, Tk, D] unmasked key values
        """
        if query.shape[-1] != self.config.in_channels or key.shape[-1] != self.config.in_channels:
            raise SizeError(
                f"Model expects D={self.config.in_channels}, got query D={query.shape[-1]}, key D={key.shape[-1]}"
            )
        stats = revin_stats(query, missing, self.config.revin_eps)
        visible = (~missing).to(query.dtype).unsqueeze(-1)
        query_norm = stats.normalize(query) * visible
        key_norm = stats.normalize(key)
        attention = torch.softmax(self.attention_logits(query_norm, missing, key_norm), dim=-1)
        reconstruction = self.retrieve(attention, key_norm, stats)
        return RebarOutput(reconstruction=reconstruction, attention=attention, stats=stats)


def build_rebar_model(config: RebarConfig, in_channels: Optional[int] = None) -> RebarModel:
    """Build a model, filling in_channels from the dataset when the config leaves it open."""
    if config.in_channels is None:
        if in_channels is None:
            raise ConfigError("rebar.in_channels is unset and no dataset channel count was given")
        config = config.model_copy(update={"in_channels": in_channels})
    elif in_channels is not None and config.in_channels != in_channels:
        raise SizeError(f"rebar.in_channels={config.in_channels} but the dataset has D={in_channels}")
    return RebarModel(config)


# --- domain-level wrappers ------------------------------------------------


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _check_channels(model: RebarModel, *arrays: np.ndarray) -> None:
    for array in arrays:
        if array.shape[-1] != model.config.in_channels:
            raise SizeError(f"Subsequence has D={array.shape[-1]}, model expects D={model.config.in_channels}")


def rebar_forward(query: MaskedSubsequence, key: Subsequence, model: RebarModel) -> RebarOutput:
    """Reconstruct one masked query from one key; batch dimension kept at 1."""
    _check_channels(model, query.values, key.values)
    dtype = _model_dtype(model)
    with torch.no_grad():
        return model(
            torch.as_tensor(np.asarray(query.values)[None], dtype=dtype),
            torch.as_tensor(query.mask.flags[None]),
            torch.as_tensor(np.asarray(key.values)[None], dtype=dtype),
        )


def reconstruct_from_weights(
    attention: torch.Tensor, key: Subsequence, model: RebarModel, stats: RevinStats
) -> torch.Tensor:
    """
    Replay the retrieval path from given attention weights.

    Nothing about the query enters except `attention` [1, H, Tq, Tk] (or
    [H, Tq, Tk]) and the per-channel RevIN statistics.
    """
    _check_channels(model, key.values)
    dtype = _model_dtype(model)
    attention = torch.as_tensor(attention, dtype=dtype)
    if attention.dim() == 3:
        attention = attention.unsqueeze(0)
    if attention.shape[1] != model.num_heads or attention.shape[-1] != key.length:
        raise SizeError(f"Attention of shape {tuple(attention.shape)} does not fit key of length {key.length}")
    if torch.any(attention < 0) or torch.any((attention.sum(dim=-1) - 1.0).abs() > ROW_SUM_TOLERANCE):
        raise InputValidationError("Attention rows must be non-negative and sum to 1")
    with torch.no_grad():
        key_tensor = torch.as_tensor(np.asarray(key.values)[None], dtype=dtype)
        return model.retrieve(attention, stats.normalize(key_tensor), stats)


def masked_mse(reconstruction: torch.Tensor, target: torch.Tensor, missing: torch.Tensor) -> torch.Tensor:
    """Per-item MSE over masked timesteps and all channels: [B]."""
    weight = missing.to(target.dtype).unsqueeze(-1)
    count = weight.sum(dim=(1, 2)).clamp(min=1.0) * target.shape[-1]
    return (((reconstruction - target) ** 2) * weight).sum(dim=(1, 2)) / count


def rebar_distances(
    anchor: Subsequence, candidates: Sequence[Subsequence], mask: Mask, model: RebarModel
) -> np.ndarray:
    """Distances from one anchor to each candidate, all under the same mask."""
    if mask.count == 0:
        raise InputValidationError("REBAR distance is undefined for an empty mask")
    if not candidates:
        return np.zeros(0)
    for cand in candidates:
        if cand.values.shape != anchor.values.shape:
            raise SizeError(f"Candidate shape {cand.values.shape} differs from anchor shape {anchor.values.shape}")
    masked = apply_mask(anchor, mask)
    _check_channels(model, anchor.values)
    dtype = _model_dtype(model)
    batch = len(candidates)
    with torch.no_grad():
        query = torch.as_tensor(masked.values, dtype=dtype).unsqueeze(0).expand(batch, -1, -1)
        missing = torch.as_tensor(mask.flags).unsqueeze(0).expand(batch, -1)
        keys = torch.as_tensor(np.stack([c.values for c in candidates]), dtype=dtype)
        output = model(query, missing, keys)
        target = torch.as_tensor(anchor.values, dtype=dtype).unsqueeze(0).expand(batch, -1, -1)
        return masked_mse(output.reconstruction, target, missing).double().cpu().numpy()


def rebar_distance(anchor: Subsequence, cand: Subsequence, mask: Mask, model: RebarModel) -> float:
    """Masked-position MSE of the anchor reconstructed by retrieving from cand."""
    return float(rebar_distances(anchor, [cand], mask, model)[0])


# --- distance measures ----------------------------------------------------


class DistanceMeasure(Protocol):
    """Anything that scores candidates against an anchor under a shared mask."""

    name: str

    def distances(self, anchor: Subsequence, candidates: Sequence[Subsequence], mask: Mask) -> np.ndarray:
        ...

    def fingerprint(self) -> str:
        ...


class RebarMeasure:
    """A frozen REBAR model used as a distance."""

    name = "rebar"

    def __init__(self, model: RebarModel):
        self.model = model.eval()

    def distances(self, anchor: Subsequence, candidates: Sequence[Subsequence], mask: Mask) -> np.ndarray:
        return rebar_distances(anchor, candidates, mask, self.model)

    def fingerprint(self) -> str:
        return parameter_checksum(self.model)


def as_measure(measure: Union["RebarModel", DistanceMeasure]) -> DistanceMeasure:
    """Wrap a bare RebarModel; other measures pass through."""
    if isinstance(measure, RebarModel):
        return RebarMeasure(measure)
    return measure


def argmin_index(distances: Sequence[float]) -> int:
    """Index of the smallest distance; ties go to the lowest index."""
    values = np.asarray(distances, dtype=np.float64)
    best = 0
    for index in range(1, values.shape[0]):
        if values[index] < values[best]:
            best = index
    return best


def tensor_norms(model: nn.Module) -> List[Tuple[str, float]]:
    """L2 norm of every parameter, for divergence diagnostics."""
    return [(name, float(param.detach().norm())) for name, param in model.named_parameters()]


# --- persistence ----------------------------------------------------------

CHECKPOINT_KIND = "rebar"


def save_rebar_model(model: RebarModel, path: Path) -> None:
    save_checkpoint(model, CHECKPOINT_KIND, model.config.model_dump(mode="json"), path)


def load_rebar_model(path: Path, config: RebarConfig, in_channels: Optional[int] = None) -> RebarModel:
    """Load a checkpoint, rejecting it when its architecture differs from config."""
    checkpoint = read_checkpoint(path, CHECKPOINT_KIND)
    model = build_rebar_model(config, in_channels)
    check_config(checkpoint, model.config.model_dump(mode="json"), ignore=("init_seed",))
    restore_parameters(model, checkpoint)
    return model.eval()
