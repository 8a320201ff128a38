"""
Measure-labelled contrastive training of the temporal encoder.

For every anchor the frozen distance measure picks, among freshly sampled
candidates from the same series, the one that best reconstructs the anchor.
That candidate is the positive; the remaining candidates are within-series
negatives, and other series' anchors in the batch are between-series negatives.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.data import Subsequence, TimeSeries, TimeSeriesDataset, count_disjoint_windows, sample_anchor_and_candidates
from core.encoder import TemporalEncoder
from core.masking import Mask, make_transient_mask, transient_count
from core.rebar_net import DistanceMeasure, RebarModel, argmin_index, as_measure
from utils.config import ContrastConfig
from utils.errors import (
    ConfigError,
    DataConsistencyError,
    InputValidationError,
    MeasureModifiedError,
    TrainingDivergedError,
)
from utils.io_utils import derive_rng, write_csv

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12

_SAMPLE_STREAM = 0
_MASK_STREAM = 1
_VAL_STREAM = 2

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence[float]]


@dataclass(frozen=True)
class PairLabeling:
    """One positive candidate; every other candidate is a within-series negative."""

    positive_index: int
    within_negative_indices: Tuple[int, ...]
    distances: Tuple[float, ...] = ()


def labeling_from_distances(distances: Sequence[float]) -> PairLabeling:
    if len(distances) == 0:
        raise InputValidationError("Cannot label an empty candidate list")
    positive = argmin_index(distances)
    return PairLabeling(
        positive_index=positive,
        within_negative_indices=tuple(i for i in range(len(distances)) if i != positive),
        distances=tuple(float(d) for d in distances),
    )


def label_candidates(
    anchor: Subsequence,
    candidates: Sequence[Subsequence],
    measure: Union[RebarModel, DistanceMeasure],
    mask: Mask,
) -> PairLabeling:
    """Positive = candidate with the lowest distance under one shared mask; ties go to the lowest index."""
    if not candidates:
        raise InputValidationError("Cannot label an empty candidate list")
    return labeling_from_distances(as_measure(measure).distances(anchor, candidates, mask))


# --- losses ---------------------------------------------------------------


def _as_tensor(values: ArrayLike) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def _unit(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if torch.any(norms <= ZERO_NORM):
        raise InputValidationError("Cosine similarity is undefined for a zero-norm embedding")
    return x / norms


def nt_xent(anchor: ArrayLike, positive: ArrayLike, negatives: ArrayLike, tau: float) -> torch.Tensor:
    """
    -log( e^{cos(a,p)/tau} / (e^{cos(a,p)/tau} + sum_n e^{cos(a,n)/tau}) ).

    anchor and positive are [E]; negatives is [N, E] and may be empty.
    """
    if tau <= 0:
        raise InputValidationError(f"Temperature must be positive, got {tau}")
    a = _unit(_as_tensor(anchor))
    p = _unit(_as_tensor(positive).to(a.dtype))
    negatives = _as_tensor(negatives).to(a.dtype).reshape(-1, a.shape[-1])
    if a.shape != p.shape:
        raise InputValidationError(f"Embedding shapes differ: {tuple(a.shape)} vs {tuple(p.shape)}")
    logits = (a * p).sum(dim=-1, keepdim=True)
    if negatives.shape[0] > 0:
        logits = torch.cat([logits, _unit(negatives) @ a])
    return -torch.log_softmax(logits / tau, dim=-1)[0]


def nt_xent_within(anchor_emb: ArrayLike, pos_emb: ArrayLike, within_neg_embs: ArrayLike, tau: float) -> torch.Tensor:
    """Within-series loss: negatives are the anchor's other candidates."""
    return nt_xent(anchor_emb, pos_emb, within_neg_embs, tau)


def nt_xent_between(anchor_emb: ArrayLike, pos_emb: ArrayLike, other_anchor_embs: ArrayLike, tau: float) -> torch.Tensor:
    """Between-series loss: negatives are the anchors of the other series in the batch."""
    others = _as_tensor(other_anchor_embs)
    if others.numel() == 0:
        raise InputValidationError("Between-series loss needs at least one other anchor (batch_size > 1)")
    return nt_xent(anchor_emb, pos_emb, others, tau)


def combined_loss(within: torch.Tensor, between: Optional[torch.Tensor], alpha: float) -> torch.Tensor:
    """alpha * between + (1 - alpha) * within; between may be omitted when alpha is 0."""
    if not 0.0 <= alpha <= 1.0:
        raise InputValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return within
    if between is None:
        raise InputValidationError("alpha > 0 requires the between-series loss")
    if alpha == 1.0:
        return between
    return alpha * between + (1.0 - alpha) * within


def batch_within_loss(anchors: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean within-series NT-Xent over a batch: anchors/positives [B, E], negatives [B, N, E]."""
    a, p = _unit(anchors), _unit(positives)
    logits = (a * p).sum(dim=-1, keepdim=True)
    if negatives.shape[1] > 0:
        logits = torch.cat([logits, torch.einsum("bne,be->bn", _unit(negatives), a)], dim=1)
    targets = torch.zeros(a.shape[0], dtype=torch.long)
    return F.cross_entropy(logits / tau, targets)


def batch_between_loss(anchors: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean between-series NT-Xent: each anchor's negatives are all other anchors in the batch."""
    if anchors.shape[0] < 2:
        raise InputValidationError("Between-series loss needs at least two anchors in the batch")
    a, p = _unit(anchors), _unit(positives)
    others = a @ a.T
    others = others.masked_fill(torch.eye(a.shape[0], dtype=torch.bool), float("-inf"))
    logits = torch.cat([(a * p).sum(dim=-1, keepdim=True), others], dim=1)
    targets = torch.zeros(a.shape[0], dtype=torch.long)
    return F.cross_entropy(logits / tau, targets)


# --- training -------------------------------------------------------------


@dataclass
class ContrastEpoch:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class ContrastHistory:
    records: List[ContrastEpoch] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    between_negative_evaluations: int = 0

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(r.epoch, r.train_loss, r.val_loss) for r in self.records]


def write_contrast_history(history: ContrastHistory, path: Path) -> None:
    write_csv(path, ["epoch", "train_loss", "val_loss"], history.rows())


@dataclass
class LabeledBatch:
    """Windows for one optimisation step: anchors/positives [B, T, D], negatives [B, N-1, T, D]."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    source_series_ids: Tuple[str, ...] = ()


def draw_labeled_batch(
    series: Sequence[TimeSeries],
    measure: DistanceMeasure,
    length: int,
    config: ContrastConfig,
    sample_rng: np.random.Generator,
    mask_rng: np.random.Generator,
) -> LabeledBatch:
    """
    Sample distinct series and label one anchor's candidates for each.

    The batch holds min(batch_size, len(series)) anchors, one per series, so
    every other anchor in the batch comes from a different series.
    """
    masked_count = transient_count(length, config.transient_mask_fraction)
    size = min(config.batch_size, len(series))
    anchors, positives, negatives, sources = [], [], [], []
    for pick in sample_rng.choice(len(series), size=size, replace=False):
        anchor, candidates = sample_anchor_and_candidates(series[int(pick)], length, config.n_cand, sample_rng)
        sources.append(anchor.source_series_id)
        mask = make_transient_mask(length, masked_count, mask_rng)
        labeling = label_candidates(anchor, candidates, measure, mask)
        anchors.append(anchor.values)
        positives.append(candidates[labeling.positive_index].values)
        negatives.append([candidates[i].values for i in labeling.within_negative_indices])
    shape = (size, config.n_cand - 1, length, anchors[0].shape[-1])
    return LabeledBatch(
        anchors=np.stack(anchors).astype(np.float32),
        positives=np.stack(positives).astype(np.float32),
        negatives=np.asarray(negatives, dtype=np.float32).reshape(shape),
        source_series_ids=tuple(sources),
    )


class ContrastiveTrainer:
    """Runs steps of the combined loss and counts between-series negative evaluations."""

    def __init__(self, encoder: TemporalEncoder, config: ContrastConfig):
        self.encoder = encoder
        self.config = config
        self.between_negative_evaluations = 0
        self.dtype = next(encoder.parameters()).dtype

    def _embed(self, windows: np.ndarray) -> torch.Tensor:
        return self.encoder(torch.as_tensor(windows, dtype=self.dtype))

    def batch_loss(self, batch: LabeledBatch, training: bool = True) -> torch.Tensor:
        """Combined loss of one batch; only training batches add to the between-negative counter."""
        size, n_neg = batch.negatives.shape[:2]
        anchors = self._embed(batch.anchors)
        positives = self._embed(batch.positives)
        if n_neg > 0:
            flat = batch.negatives.reshape((size * n_neg,) + batch.negatives.shape[2:])
            negatives = self._embed(flat).reshape(size, n_neg, -1)
        else:
            negatives = anchors.new_zeros((size, 0, anchors.shape[-1]))
        within = batch_within_loss(anchors, positives, negatives, self.config.tau)
        between = None
        if self.config.alpha > 0:
            between = batch_between_loss(anchors, positives, self.config.tau)
            if training:
                self.between_negative_evaluations += size * (size - 1)
        return combined_loss(within, between, self.config.alpha)


def train_contrastive(
    dataset: TimeSeriesDataset,
    measure: Union[RebarModel, DistanceMeasure],
    encoder: TemporalEncoder,
    config: ContrastConfig,
    subseq_len: int,
) -> Tuple[TemporalEncoder, ContrastHistory]:
    """
    Train the encoder on measure-labelled pairs; the measure stays frozen.

    Each step samples up to batch_size distinct series, one anchor plus
    n_cand candidates per series, and one transient mask per anchor shared by
    all its candidates. Validation batches are drawn once from the val split
    with a fixed seed; the best-validation encoder is returned.
    """
    if config.alpha > 0 and config.batch_size < 2:
        raise ConfigError("alpha > 0 needs batch_size >= 2 to form between-series negatives")
    measure = as_measure(measure)
    seed = config.seed if config.seed is not None else 0
    train_series = [s for s in dataset.split("train") if s.length - subseq_len + 1 >= config.n_cand]
    val_series = [s for s in dataset.split("val") if s.length - subseq_len + 1 >= config.n_cand]
    if not train_series:
        raise DataConsistencyError(
            f"No training series can supply {config.n_cand} candidates of length {subseq_len}"
        )
    if config.alpha > 0 and len(train_series) < 2:
        raise DataConsistencyError("alpha > 0 needs at least two training series to form between-series negatives")
    batch_size = min(config.batch_size, len(train_series))
    steps = config.steps_per_epoch or max(1, math.ceil(count_disjoint_windows(train_series, subseq_len) / batch_size))
    fingerprint = measure.fingerprint()

    val_batches: List[LabeledBatch] = []
    min_val_series = 2 if config.alpha > 0 else 1
    if len(val_series) >= min_val_series:
        val_sample, val_mask = derive_rng(seed, _VAL_STREAM, 0), derive_rng(seed, _VAL_STREAM, 1)
        val_batch = min(config.batch_size, len(val_series))
        val_steps = max(1, math.ceil(count_disjoint_windows(val_series, subseq_len) / val_batch))
        val_batches = [
            draw_labeled_batch(val_series, measure, subseq_len, config, val_sample, val_mask)
            for _ in range(val_steps)
        ]
    else:
        logger.warning("No usable val series; selecting the encoder by training loss")

    sample_rng = derive_rng(seed, _SAMPLE_STREAM)
    mask_rng = derive_rng(seed, _MASK_STREAM)
    trainer = ContrastiveTrainer(encoder, config)
    optimizer = torch.optim.Adam(encoder.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    history = ContrastHistory()
    best_loss = math.inf
    best_state = copy.deepcopy(encoder.state_dict())
    stale_epochs = 0
    logger.info(
        "Contrastive training: %d steps/epoch, batch %d, %d candidates, alpha %.2f, tau %g",
        steps,
        batch_size,
        config.n_cand,
        config.alpha,
        config.tau,
    )

    for epoch in range(1, config.max_epochs + 1):
        encoder.train()
        total = 0.0
        for step in range(steps):
            batch = draw_labeled_batch(train_series, measure, subseq_len, config, sample_rng, mask_rng)
            loss = trainer.batch_loss(batch)
            if not torch.isfinite(loss):
                norms = {name: float(p.detach().norm()) for name, p in encoder.named_parameters()}
                raise TrainingDivergedError(
                    f"Non-finite contrastive loss at epoch {epoch}, step {step}",
                    details={"epoch": epoch, "batch": step, "parameter_norms": norms},
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss)
        train_loss = total / steps

        encoder.eval()
        if val_batches:
            with torch.no_grad():
                val_loss = sum(float(trainer.batch_loss(b, training=False)) for b in val_batches) / len(val_batches)
        else:
            val_loss = train_loss
        history.records.append(ContrastEpoch(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        logger.info("epoch %d: train %.6f val %.6f", epoch, train_loss, val_loss)

        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(encoder.state_dict())
            history.best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                history.stopped_early = True
                logger.info("Early stop after epoch %d (best epoch %d)", epoch, history.best_epoch)
                break

    if measure.fingerprint() != fingerprint:
        raise MeasureModifiedError("The distance measure changed during contrastive training")
    history.between_negative_evaluations = trainer.between_negative_evaluations
    encoder.load_state_dict(best_state)
    encoder.eval()
    return encoder, history
