"""Measure validation experiments, baseline distance and embedding metrics."""

import numpy as np
import pytest

from conftest import block_series
from core.data import Subsequence, TimeSeriesDataset
from core.encoder import build_encoder
from core.evaluation import (
    MaskSpec,
    SlidingMSEMeasure,
    adjusted_rand_index,
    binary_auroc,
    binary_average_precision,
    candidate_tpr,
    export_embeddings,
    kmeans_cluster,
    linear_probe,
    mask_protocol_table,
    nn_validation,
    normalized_mutual_info,
    sliding_mse_distance,
)
from utils.config import EncoderConfig
from utils.errors import InputValidationError, SizeError
from utils.io_utils import read_csv_rows

TRANSIENT_5 = MaskSpec("transient", 5)


class OracleMeasure:
    name = "oracle"

    def distances(self, anchor, candidates, mask):
        return np.array([0.0 if c.label == anchor.label else 1.0 for c in candidates])

    def fingerprint(self) -> str:
        return "oracle"


class ConstantMeasure:
    name = "constant"

    def distances(self, anchor, candidates, mask):
        return np.zeros(len(candidates))

    def fingerprint(self) -> str:
        return "constant"


def _window(values, start=0) -> Subsequence:
    return Subsequence(values=np.asarray(values, dtype=np.float64).reshape(-1, 1), source_series_id="s", start_index=start)


def test_oracle_measure_gives_identity_matrix(block_dataset):
    matrix = nn_validation(block_dataset, OracleMeasure(), 20, 5, TRANSIENT_5, np.random.default_rng(0))
    np.testing.assert_array_equal(matrix.probs, np.eye(3))
    assert matrix.row_argmax() == [0, 1, 2]
    assert matrix.mean_diagonal() == pytest.approx(1.0)
    assert matrix.counts.sum() == 2 * 3 * 5


def test_constant_measure_predicts_first_class(block_dataset):
    matrix = nn_validation(block_dataset, ConstantMeasure(), 20, 4, TRANSIENT_5, np.random.default_rng(0))
    np.testing.assert_array_equal(matrix.probs[:, 0], np.ones(3))
    np.testing.assert_allclose(matrix.probs.sum(axis=1), np.ones(3))


def test_absent_class_row_is_reported_not_fabricated():
    dataset = TimeSeriesDataset(
        series=(block_series("a", [0, 1, 0], 40),),
        num_classes=3,
        class_names=("x", "y", "z"),
        split_assignment={"a": "test"},
    )
    matrix = nn_validation(dataset, OracleMeasure(), 20, 3, TRANSIENT_5, np.random.default_rng(1))
    assert matrix.absent == [2]
    assert np.isnan(matrix.probs[2]).all()
    assert matrix.to_dict()["probs"][2] == [None, None, None]


def test_validation_results_do_not_depend_on_run_order(block_dataset):
    first = nn_validation(block_dataset, SlidingMSEMeasure(block_dataset), 20, 3, TRANSIENT_5, np.random.default_rng(4))
    second = nn_validation(block_dataset, SlidingMSEMeasure(block_dataset), 20, 3, TRANSIENT_5, np.random.default_rng(4))
    np.testing.assert_array_equal(first.counts, second.counts)


def test_candidate_tpr_is_perfect_on_single_class_data():
    dataset = TimeSeriesDataset(
        series=(block_series("a", [0] * 6, 40), block_series("b", [0] * 6, 40)),
        num_classes=1,
        class_names=("only",),
    )
    report = candidate_tpr(dataset, ConstantMeasure(), 20, 20, 5, np.random.default_rng(0))
    assert report.overall == 1.0
    assert report.trials_per_class == {"only": 10}
    with pytest.raises(InputValidationError):
        candidate_tpr(dataset, ConstantMeasure(), 20, 0, 5, np.random.default_rng(0))


def test_candidate_tpr_with_oracle_is_high(block_dataset):
    report = candidate_tpr(block_dataset, OracleMeasure(), 20, 20, 10, np.random.default_rng(2))
    # a candidate set of 20 almost always holds a window of the anchor's class
    assert report.overall >= 0.9
    assert set(report.per_class) == {"zero", "one", "two"}


def test_sliding_mse_examples():
    anchor = _window([0.0, 1.0, 0.0])
    assert sliding_mse_distance(anchor, anchor) == 0.0
    assert sliding_mse_distance(anchor, _window([1.0, 0.0, 0.0])) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, c = _window(rng.normal(size=8)), _window(rng.normal(size=8))
        assert sliding_mse_distance(a, c) <= float(np.mean((a.values - c.values) ** 2)) + 1e-12
    with pytest.raises(SizeError):
        sliding_mse_distance(anchor, _window([1.0, 0.0]))


def test_sliding_mse_reads_true_neighbours_from_context():
    series = block_series("s", [0, 1], 10)
    cand = Subsequence(values=series.values[5:10], source_series_id="s", start_index=5)
    anchor = Subsequence(values=series.values[8:13], source_series_id="s", start_index=8)
    # with full overlap required, only the true neighbours can line the candidate up with the anchor
    assert sliding_mse_distance(anchor, cand, context=series, min_overlap=5) == pytest.approx(0.0, abs=1e-12)
    assert sliding_mse_distance(anchor, cand, min_overlap=5) > 0.0
    dataset = TimeSeriesDataset(series=(series,), num_classes=2, class_names=("a", "b"))
    measure = SlidingMSEMeasure(dataset, min_overlap=5)
    assert measure.distances(anchor, [cand], None)[0] == pytest.approx(0.0, abs=1e-12)


def test_partition_metrics():
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5, abs=1e-9)
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert normalized_mutual_info([0, 0, 1, 2], [2, 2, 0, 1]) == pytest.approx(1.0)
    assert adjusted_rand_index([0, 0, 1, 1], [0, 0, 0, 0]) == pytest.approx(0.0, abs=1e-12)
    assert 0.0 <= normalized_mutual_info([0, 1, 0, 1], [0, 0, 1, 1]) <= 1.0
    with pytest.raises(InputValidationError):
        adjusted_rand_index([], [])
    with pytest.raises(SizeError):
        normalized_mutual_info([0, 1], [0])


def test_ranking_metrics():
    assert binary_average_precision([1, 0, 1], [0.9, 0.8, 0.7]) == pytest.approx(0.8333, abs=1e-4)
    assert binary_auroc([1, 0], [0.5, 0.5]) == pytest.approx(0.5)
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    labels = [0, 0, 1, 1]
    assert binary_auroc(labels, scores) == pytest.approx(binary_auroc(labels, np.exp(scores)))


def test_linear_probe_on_separable_embeddings():
    rng = np.random.default_rng(0)
    train = np.vstack([rng.normal(-5, 0.5, size=(20, 2)), rng.normal(5, 0.5, size=(20, 2))])
    test = np.vstack([rng.normal(-5, 0.5, size=(10, 2)), rng.normal(5, 0.5, size=(10, 2))])
    labels_train = [0] * 20 + [1] * 20
    labels_test = [0] * 10 + [1] * 10
    report = linear_probe(train, labels_train, test, labels_test)
    assert report.accuracy == 1.0
    assert report.auroc_macro == 1.0
    assert report.classes_scored == [0, 1]
    with pytest.raises(InputValidationError):
        linear_probe(train, [0] * 40, test, labels_test)


def test_kmeans_blobs_boundary_and_determinism():
    rng = np.random.default_rng(1)
    blobs = np.vstack([rng.normal(0, 0.1, size=(15, 3)), rng.normal(10, 0.1, size=(15, 3))])
    truth = [0] * 15 + [1] * 15
    assignments = kmeans_cluster(blobs, 2, seed=0)
    assert adjusted_rand_index(truth, assignments) == pytest.approx(1.0)
    assert set(kmeans_cluster(blobs, 1, seed=0)) == {0}
    np.testing.assert_array_equal(assignments, kmeans_cluster(blobs, 2, seed=0))
    with pytest.raises(InputValidationError):
        kmeans_cluster(blobs, 31, seed=0)


def test_export_embeddings(tmp_path, block_dataset):
    encoder = build_encoder(EncoderConfig(in_channels=1, hidden_channels=8, num_blocks=2, embed_dim=16, init_seed=0))
    path = tmp_path / "test.csv"
    rows = export_embeddings(encoder, block_dataset, "test", path, 25)
    assert rows == 8
    content = read_csv_rows(path)
    assert content[0][:4] == ["series_id", "start_index", "label", "e0"]
    assert len(content[0]) == 3 + 16
    first = path.read_bytes()
    export_embeddings(encoder, block_dataset, "test", path, 25)
    assert path.read_bytes() == first
    assert export_embeddings(encoder, block_dataset, "val", tmp_path / "val.csv", 25) == 0
    assert len(read_csv_rows(tmp_path / "val.csv")) == 1


def test_mask_protocol_table_structure(block_dataset):
    table = mask_protocol_table(
        block_dataset,
        {"extended": OracleMeasure(), "transient": ConstantMeasure()},
        {"extended": MaskSpec("extended", 3), "transient": MaskSpec("transient", 5)},
        20,
        2,
        seed=0,
    )
    assert set(table) == {"extended", "transient"}
    assert all(set(row) == {"extended", "transient"} for row in table.values())
    assert table["extended"]["transient"] == pytest.approx(1.0)
    assert table["transient"]["extended"] == pytest.approx(1 / 3)
