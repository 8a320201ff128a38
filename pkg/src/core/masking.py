"""
Missing-value masks for subsequences.

Two families are used: extended masks (one contiguous run, used to train the
reconstruction network) and transient masks (scattered timesteps, used when
the network is applied as a distance).
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.data import Subsequence
from utils.errors import SizeError

MaskKindName = Literal["extended", "transient"]


@dataclass(frozen=True)
class Mask:
    """Boolean flags over T timesteps; True marks a missing position."""

    flags: np.ndarray
    kind: MaskKindName

    def __post_init__(self):
        flags = np.ascontiguousarray(self.flags, dtype=bool)
        if flags.ndim != 1:
            raise SizeError(f"Mask flags must be a vector, got shape {flags.shape}")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @property
    def length(self) -> int:
        return int(self.flags.shape[0])

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.flags))


@dataclass(frozen=True)
class MaskedSubsequence:
    """Zero-filled values travelling with the mask that produced them."""

    values: np.ndarray  # [T, D]
    mask: Mask
    source: Subsequence


def _check_size(length: int, n: int) -> None:
    if length < 1:
        raise SizeError(f"Mask length must be >= 1, got {length}")
    if n < 1 or n > length:
        raise SizeError(f"Masked count n={n} must lie in [1, {length}]")


def extended_mask_at(length: int, n: int, start: int) -> Mask:
    """Extended mask with a fixed start index."""
    _check_size(length, n)
    if start < 0 or start + n > length:
        raise SizeError(f"Run [{start}, {start + n}) does not fit in {length} timesteps")
    flags = np.zeros(length, dtype=bool)
    flags[start:start + n] = True
    return Mask(flags=flags, kind="extended")


def make_extended_mask(length: int, n: int, rng: np.random.Generator) -> Mask:
    """One contiguous missing run of length n with a uniform start in [0, T - n]."""
    _check_size(length, n)
    return extended_mask_at(length, n, int(rng.integers(0, length - n + 1)))


def make_transient_mask(length: int, n: int, rng: np.random.Generator) -> Mask:
    """n distinct missing timesteps chosen uniformly without replacement."""
    _check_size(length, n)
    flags = np.zeros(length, dtype=bool)
    flags[rng.choice(length, size=n, replace=False)] = True
    return Mask(flags=flags, kind="transient")


def make_mask(kind: MaskKindName, length: int, n: int, rng: np.random.Generator) -> Mask:
    if kind == "extended":
        return make_extended_mask(length, n, rng)
    if kind == "transient":
        return make_transient_mask(length, n, rng)
    raise ValueError(f"Unknown mask kind: {kind}")


def transient_count(length: int, fraction: float) -> int:
    """Number of masked timesteps for a transient mask covering `fraction` of T."""
    return min(length, max(1, int(round(fraction * length))))


def apply_mask(subsequence: Subsequence, mask: Mask) -> MaskedSubsequence:
    """Zero-fill masked timesteps; unmasked values are left bit-identical."""
    if mask.length != subsequence.length:
        raise SizeError(f"Mask of length {mask.length} applied to subsequence of length {subsequence.length}")
    values = np.array(subsequence.values, copy=True)
    values[mask.flags] = 0
    return MaskedSubsequence(values=values, mask=mask, source=subsequence)
