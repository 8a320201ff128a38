"""
Certification experiments for distance measures and learned embeddings.

Measure side: nearest-neighbour validation (confusion matrix of predicted vs
true class), candidate-set true-positive rate, and the Sliding-MSE baseline.
Embedding side: linear probe, k-means clusterability, embedding export.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.cluster import KMeans
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import (
    accuracy_score,
    adjusted_rand_score,
    average_precision_score,
    normalized_mutual_info_score,
    roc_auc_score,
)
from sklearn.preprocessing import StandardScaler

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.data import (
    Subsequence,
    TimeSeries,
    TimeSeriesDataset,
    class_window_starts,
    labeled_windows,
    make_subsequence,
    rand_segment,
)
from core.encoder import TemporalEncoder, encode_windows
from core.masking import Mask, MaskKindName, make_mask
from core.rebar_net import DistanceMeasure, RebarModel, argmin_index, as_measure
from models.reports import ClusterReport, ProbeReport, TprReport
from utils.errors import InputValidationError, SizeError
from utils.io_utils import derive_rng, write_csv

logger = logging.getLogger(__name__)

MeasureLike = Union[RebarModel, DistanceMeasure]


@dataclass(frozen=True)
class MaskSpec:
    """How evaluation masks are drawn: kind and number of masked timesteps."""

    kind: MaskKindName
    count: int

    def draw(self, length: int, rng: np.random.Generator) -> Mask:
        return make_mask(self.kind, length, self.count, rng)


@dataclass
class ConfusionMatrix:
    """
    Row-normalised predicted-class frequencies.

    Rows of classes that no series could supply are NaN and listed in `absent`.
    """

    probs: np.ndarray  # [C, C]
    counts: np.ndarray  # [C, C] completed trials
    absent: List[int]
    class_names: Tuple[str, ...] = ()

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.probs)

    def mean_diagonal(self) -> float:
        diagonal = self.diagonal
        return float(np.nanmean(diagonal)) if np.any(np.isfinite(diagonal)) else float("nan")

    def row_argmax(self) -> List[Optional[int]]:
        return [None if c in self.absent else int(np.argmax(self.probs[c])) for c in range(self.probs.shape[0])]

    def to_dict(self) -> Dict[str, object]:
        return {
            "class_names": list(self.class_names),
            "probs": [[None if np.isnan(v) else float(v) for v in row] for row in self.probs],
            "counts": self.counts.astype(int).tolist(),
            "absent": list(self.absent),
            "mean_diagonal": None if np.isnan(self.mean_diagonal()) else self.mean_diagonal(),
        }


def _evaluated_series(dataset: TimeSeriesDataset, split: Optional[str]) -> List[TimeSeries]:
    return list(dataset.series) if split is None else dataset.split(split)


def available_classes(series: TimeSeries, length: int, num_classes: int) -> List[int]:
    """Classes with at least one window of uniform label in the series."""
    return [c for c in range(num_classes) if class_window_starts(series, length, c).size > 0]


def nn_validation(
    dataset: TimeSeriesDataset,
    measure: MeasureLike,
    length: int,
    trials: int,
    mask_spec: MaskSpec,
    rng: np.random.Generator,
    split: Optional[str] = None,
) -> ConfusionMatrix:
    """
    Nearest-neighbour validation of a distance measure.

    For each series, true class and trial: draw an anchor of that class and
    one candidate per class available in the series, predict the class of the
    nearest candidate under one shared mask. Trial generators are derived from
    (base seed, series, class, trial), so results do not depend on order.
    """
    measure = as_measure(measure)
    num_classes = dataset.num_classes
    counts = np.zeros((num_classes, num_classes))
    skipped = np.zeros(num_classes, dtype=int)
    base_seed = int(rng.integers(2**63))

    for series_index, series in enumerate(_evaluated_series(dataset, split)):
        available = available_classes(series, length, num_classes)
        for true_class in range(num_classes):
            if true_class not in available:
                skipped[true_class] += 1
                continue
            for trial in range(trials):
                trial_rng = derive_rng(base_seed, series_index, true_class, trial)
                anchor = rand_segment(series, length, trial_rng, class_filter=true_class)
                candidates = [rand_segment(series, length, trial_rng, class_filter=c) for c in available]
                mask = mask_spec.draw(length, trial_rng)
                predicted = available[argmin_index(measure.distances(anchor, candidates, mask))]
                counts[true_class, predicted] += 1

    for class_id in np.flatnonzero(skipped):
        logger.info("Class %d absent from %d series; no trials there", class_id, skipped[class_id])
    completed = counts.sum(axis=1)
    absent = [int(c) for c in np.flatnonzero(completed == 0)]
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = counts / completed[:, None]
    probs[absent] = np.nan
    if absent:
        logger.warning("No series supplied a class window for classes %s", absent)
    return ConfusionMatrix(probs=probs, counts=counts, absent=absent, class_names=dataset.class_names)


def candidate_tpr(
    dataset: TimeSeriesDataset,
    measure: MeasureLike,
    length: int,
    n_cand: int,
    trials: int,
    rng: np.random.Generator,
    mask_spec: Optional[MaskSpec] = None,
    split: Optional[str] = None,
) -> TprReport:
    """
    Share of trials whose selected positive carries the anchor's class.

    The anchor's class is drawn uniformly from the classes available in the
    series; candidates are uniform windows of the same series with distinct starts.
    """
    if n_cand < 1:
        raise InputValidationError(f"n_cand must be >= 1, got {n_cand}")
    measure = as_measure(measure)
    mask_spec = mask_spec or MaskSpec("transient", max(1, length // 2))
    hits = np.zeros(dataset.num_classes)
    totals = np.zeros(dataset.num_classes, dtype=int)
    base_seed = int(rng.integers(2**63))

    for series_index, series in enumerate(_evaluated_series(dataset, split)):
        available = available_classes(series, length, dataset.num_classes)
        n_starts = series.length - length + 1
        if not available or n_starts < n_cand:
            logger.info("Series %s skipped: no labelled anchor or too short for %d candidates", series.series_id, n_cand)
            continue
        for trial in range(trials):
            trial_rng = derive_rng(base_seed, series_index, trial)
            anchor_class = available[int(trial_rng.integers(len(available)))]
            anchor = rand_segment(series, length, trial_rng, class_filter=anchor_class)
            starts = trial_rng.choice(n_starts, size=n_cand, replace=False)
            candidates = [make_subsequence(series, int(s), length) for s in starts]
            mask = mask_spec.draw(length, trial_rng)
            chosen = candidates[argmin_index(measure.distances(anchor, candidates, mask))]
            totals[anchor_class] += 1
            hits[anchor_class] += chosen.label == anchor_class

    per_class = {
        name: (float(hits[c] / totals[c]) if totals[c] else None)
        for c, name in enumerate(dataset.class_names)
    }
    overall = float(hits.sum() / totals.sum()) if totals.sum() else None
    return TprReport(
        overall=overall,
        per_class=per_class,
        trials_per_class={name: int(totals[c]) for c, name in enumerate(dataset.class_names)},
        n_cand=n_cand,
    )


# --- Sliding-MSE baseline -------------------------------------------------


def sliding_mse_distance(
    anchor: Subsequence,
    cand: Subsequence,
    context: Optional[TimeSeries] = None,
    min_overlap: int = 1,
) -> float:
    """
    Lowest MSE between the anchor and the candidate slid by every shift in [-T+1, T-1].

    The candidate is extended on both sides with its true neighbouring values
    from `context` where they exist; positions beyond the series are left out
    of the mean rather than invented. Shifts with fewer than `min_overlap`
    compared timesteps are ignored.
    """
    if anchor.values.shape != cand.values.shape:
        raise SizeError(f"Anchor shape {anchor.values.shape} differs from candidate shape {cand.values.shape}")
    length, channels = anchor.values.shape
    extended = np.full((3 * length - 2, channels), np.nan)
    extended[length - 1:2 * length - 1] = cand.values
    if context is not None:
        lo = max(0, cand.start_index - (length - 1))
        hi = min(context.length, cand.start_index + 2 * length - 1)
        offset = cand.start_index - (length - 1)
        extended[lo - offset:hi - offset] = context.values[lo:hi]

    # windows[s + T - 1] is the candidate shifted by s
    windows = np.moveaxis(sliding_window_view(extended, length, axis=0), -1, 1)
    diff = windows - np.asarray(anchor.values, dtype=np.float64)[None]
    observed = ~np.isnan(diff)
    counts = observed.sum(axis=(1, 2))
    sums = np.where(observed, diff**2, 0.0).sum(axis=(1, 2))
    usable = counts >= max(1, min_overlap) * channels
    mse = np.where(usable, sums / np.maximum(counts, 1), np.inf)
    return float(mse.min())


class SlidingMSEMeasure:
    """Sliding-MSE as a DistanceMeasure; masks are ignored."""

    name = "sliding-mse"

    def __init__(self, dataset: Optional[TimeSeriesDataset] = None, min_overlap: int = 1):
        self.series = {s.series_id: s for s in dataset.series} if dataset is not None else {}
        self.min_overlap = min_overlap

    def distances(self, anchor: Subsequence, candidates: Sequence[Subsequence], mask: Mask) -> np.ndarray:
        return np.array([
            sliding_mse_distance(anchor, c, self.series.get(c.source_series_id), self.min_overlap)
            for c in candidates
        ])

    def fingerprint(self) -> str:
        return f"sliding-mse-overlap{self.min_overlap}"


# --- embedding evaluation -------------------------------------------------


def binary_auroc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """ROC AUC with midrank ties."""
    return float(roc_auc_score(labels, scores))


def binary_average_precision(labels: Sequence[int], scores: Sequence[float]) -> float:
    return float(average_precision_score(labels, scores))


def linear_probe(
    train_embs: np.ndarray,
    train_labels: Sequence[int],
    test_embs: np.ndarray,
    test_labels: Sequence[int],
    l2: float = 1e-4,
    max_iter: int = 1000,
    tol: float = 1e-6,
) -> ProbeReport:
    """
    Multinomial logistic regression on standardised frozen embeddings.

    The L2 penalty l2 * ||w||^2 / 2 on the mean loss corresponds to
    sklearn's C = 1 / (l2 * n_train). AUROC and AP are macro one-vs-rest over
    classes that have both positives and negatives in the test set.
    """
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    if np.unique(train_labels).size < 2:
        raise InputValidationError("Linear probe needs at least two classes in the training labels")
    if len(test_labels) == 0:
        raise InputValidationError("Linear probe needs a non-empty test set")

    scaler = StandardScaler().fit(train_embs)
    penalty = l2 * len(train_labels)
    clf = LogisticRegression(
        C=1.0 / penalty if penalty > 0 else 1e12,
        solver="lbfgs",
        max_iter=max_iter,
        tol=tol,
    )
    clf.fit(scaler.transform(train_embs), train_labels)
    test_features = scaler.transform(test_embs)
    probs = clf.predict_proba(test_features)
    predictions = clf.classes_[np.argmax(probs, axis=1)]

    aurocs, precisions, scored = [], [], []
    for column, class_id in enumerate(clf.classes_):
        positives = test_labels == class_id
        if positives.all() or not positives.any():
            continue
        aurocs.append(binary_auroc(positives, probs[:, column]))
        precisions.append(binary_average_precision(positives, probs[:, column]))
        scored.append(int(class_id))
    unseen = sorted(set(test_labels.tolist()) - set(clf.classes_.tolist()))
    if unseen:
        logger.warning("Test classes %s never appear in the probe's training labels", unseen)

    return ProbeReport(
        accuracy=float(accuracy_score(test_labels, predictions)),
        auroc_macro=float(np.mean(aurocs)) if aurocs else 0.5,
        auprc_macro=float(np.mean(precisions)) if precisions else 0.0,
        n_train=int(len(train_labels)),
        n_test=int(len(test_labels)),
        classes_scored=scored,
    )


def kmeans_cluster(embs: np.ndarray, k: int, seed: int, restarts: int = 10) -> np.ndarray:
    """k-means++ with `restarts` initialisations, lowest inertia kept."""
    embs = np.asarray(embs, dtype=np.float64)
    if k < 1 or k > embs.shape[0]:
        raise InputValidationError(f"k={k} must lie in [1, {embs.shape[0]}]")
    distinct = np.unique(embs, axis=0).shape[0]
    if distinct < k:
        logger.warning("Only %d distinct points for k=%d; some clusters will be degenerate", distinct, k)
    model = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed)
    return model.fit_predict(embs).astype(int)


def _check_partitions(a: Sequence[int], b: Sequence[int]) -> None:
    if len(a) == 0 or len(b) == 0:
        raise InputValidationError("Partition comparison needs non-empty label vectors")
    if len(a) != len(b):
        raise SizeError(f"Label vectors differ in length: {len(a)} vs {len(b)}")


def adjusted_rand_index(a: Sequence[int], b: Sequence[int]) -> float:
    _check_partitions(a, b)
    return float(adjusted_rand_score(a, b))


def normalized_mutual_info(a: Sequence[int], b: Sequence[int]) -> float:
    """NMI normalised by the arithmetic mean of the two entropies."""
    _check_partitions(a, b)
    score = normalized_mutual_info_score(a, b, average_method="arithmetic")
    return float(np.clip(score, 0.0, 1.0))


def cluster_report(embs: np.ndarray, labels: Sequence[int], k: int, seed: int, restarts: int = 10) -> ClusterReport:
    assignments = kmeans_cluster(embs, k, seed, restarts)
    return ClusterReport(
        ari=adjusted_rand_index(labels, assignments),
        nmi=normalized_mutual_info(labels, assignments),
        k=k,
        assignments=assignments.tolist(),
    )


def split_embeddings(
    encoder: TemporalEncoder, dataset: TimeSeriesDataset, split: str, length: int
) -> Tuple[np.ndarray, np.ndarray, List[Subsequence]]:
    """Embeddings and labels of the disjoint class-uniform windows of a split."""
    windows = labeled_windows(dataset, split, length)
    embs = encode_windows([w.values for w in windows], encoder)
    labels = np.array([w.label for w in windows], dtype=int)
    return embs, labels, windows


def export_embeddings(
    encoder: TemporalEncoder,
    dataset: TimeSeriesDataset,
    split: str,
    path: Path,
    length: int,
) -> int:
    """Write series_id, start_index, label and one column per embedding dimension; returns the row count."""
    embs, _, windows = split_embeddings(encoder, dataset, split, length)
    header = ["series_id", "start_index", "label"] + [f"e{i}" for i in range(encoder.config.embed_dim)]
    rows = [
        [w.source_series_id, w.start_index, w.label] + [float(v) for v in emb]
        for w, emb in zip(windows, embs)
    ]
    write_csv(path, header, rows)
    return len(rows)


def mask_protocol_table(
    dataset: TimeSeriesDataset,
    measures: Dict[str, MeasureLike],
    eval_masks: Dict[str, MaskSpec],
    length: int,
    trials: int,
    seed: int,
    split: Optional[str] = None,
) -> Dict[str, Dict[str, float]]:
    """Mean nn_validation diagonal for every (training mask, evaluation mask) pair."""
    table: Dict[str, Dict[str, float]] = {}
    for train_kind, measure in measures.items():
        table[train_kind] = {}
        for eval_kind, mask_spec in eval_masks.items():
            matrix = nn_validation(dataset, measure, length, trials, mask_spec, np.random.default_rng(seed), split)
            table[train_kind][eval_kind] = matrix.mean_diagonal()
            logger.info("train %s / eval %s: mean diagonal %.4f", train_kind, eval_kind, table[train_kind][eval_kind])
    return table

