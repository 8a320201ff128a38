"""End-to-end CLI runs on a tiny synthetic configuration."""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from core.checkpoint import parameter_checksum
from core.data import load_dataset
from core.encoder import load_encoder
from rebar_pipeline import main
from utils.config import load_run_config

TINY_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "tiny.json"


def _run(capsys, *argv) -> tuple:
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _error_code(stderr: str) -> str:
    document = json.loads(stderr[stderr.index("{"):])
    assert document["success"] is False
    return document["error"]["code"]


@pytest.fixture
def run_dir(tmp_path) -> Path:
    return tmp_path / "run"


def test_full_pipeline(capsys, run_dir):
    common = ["--config", str(TINY_CONFIG), "-o", str(run_dir)]
    for command in (["synth"], ["train-measure"], ["validate-measure"], ["train-encoder"], ["eval"]):
        code, _, err = _run(capsys, *command, *common)
        assert code == 0, err

    assert (run_dir / "dataset" / "meta.json").exists()
    assert (run_dir / "measure" / "rebar.ckpt").exists()
    assert (run_dir / "encoder" / "rebar" / "encoder.ckpt").exists()
    history = (run_dir / "measure" / "loss_history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,val_loss"

    confusion = next((run_dir / "validation").glob("confusion_*.json"))
    matrix = json.loads(confusion.read_text())["probs"]
    for row in matrix:
        if row[0] is not None:
            assert sum(row) == pytest.approx(1.0)

    config = load_run_config(TINY_CONFIG)
    encoder = load_encoder(run_dir / "encoder" / "rebar" / "encoder.ckpt", config.encoder, in_channels=1)
    stem = f"{load_dataset(run_dir / 'dataset').name}_rebar-{parameter_checksum(encoder)[:8]}_s0"
    report_path = run_dir / "eval" / "rebar" / f"evaluation_{stem}.json"
    assert report_path.exists()
    assert (run_dir / "eval" / "rebar" / f"reports_{stem}.csv").exists()
    report = json.loads(report_path.read_text())
    assert 0.0 <= report["trained"]["probe"]["accuracy"] <= 1.0
    assert report["probe_accuracy_gain"] == pytest.approx(
        report["trained"]["probe"]["accuracy"] - report["random_init"]["probe"]["accuracy"]
    )
    manifest = json.loads((run_dir / "eval" / "rebar" / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {"dataset", "encoder_checkpoint"}
    assert manifest["seed"] == 0
    assert "torch" in manifest["versions"]

    # outputs are protected unless --force is given
    code, _, err = _run(capsys, "eval", *common)
    assert code == 3
    assert _error_code(err) == "ARTIFACT_EXISTS"
    first = report_path.read_bytes()
    code, _, err = _run(capsys, "eval", *common, "--force")
    assert code == 0, err
    assert report_path.read_bytes() == first


def test_sliding_mse_measure_needs_no_checkpoint(capsys, run_dir):
    common = ["--config", str(TINY_CONFIG), "-o", str(run_dir)]
    assert _run(capsys, "synth", *common)[0] == 0
    code, out, err = _run(capsys, "validate-measure", *common, "--measure", "sliding-mse")
    assert code == 0, err
    assert "sliding-mse" in out
    tpr = next((run_dir / "validation").glob("tpr_*sliding-mse*.json"))
    assert json.loads(tpr.read_text())["n_cand"] == 4


def test_missing_prior_stage_is_reported(capsys, run_dir):
    common = ["--config", str(TINY_CONFIG), "-o", str(run_dir)]
    code, _, err = _run(capsys, "train-measure", *common)
    assert code == 3
    assert _error_code(err) == "MISSING_ARTIFACT"
    assert _run(capsys, "synth", *common)[0] == 0
    code, _, err = _run(capsys, "eval", *common)
    assert code == 3
    assert _error_code(err) == "MISSING_ARTIFACT"


def test_invalid_configuration_exits_with_config_code(capsys, run_dir):
    code, _, err = _run(capsys, "synth", "--config", str(TINY_CONFIG), "-o", str(run_dir), "--set", "rebar.base_kernel=4")
    assert code == 2
    assert _error_code(err) == "CONFIG_INVALID"


def test_unwritable_output_reports_io_error(capsys, tmp_path):
    blocker = tmp_path / "occupied"
    blocker.write_text("x")
    code, _, err = _run(capsys, "synth", "--config", str(TINY_CONFIG), "-o", str(blocker / "run"))
    assert code == 4
    assert _error_code(err) == "IO_ERROR"


def test_ingest_csv_directory(capsys, tmp_path):
    csv_dir = tmp_path / "csv"
    csv_dir.mkdir()
    rng = np.random.default_rng(0)
    for index in range(4):
        labels = np.repeat([0, 1], 50)
        table = np.column_stack([rng.normal(size=(100, 2)), labels])
        np.savetxt(csv_dir / f"rec{index}.csv", table, delimiter=",", fmt="%.6f")
    code, _, err = _run(
        capsys, "ingest", "--csv-dir", str(csv_dir), "--class-names", "rest,move",
        "--sample-rate", "20", "-o", str(tmp_path / "run"),
    )
    assert code == 0, err
    meta = json.loads((tmp_path / "run" / "dataset" / "meta.json").read_text())
    assert meta["class_names"] == ["rest", "move"]
    assert len(meta["series"]) == 4


def test_mask_study(capsys, run_dir):
    common = ["--config", str(TINY_CONFIG), "-o", str(run_dir), "--set", "rebar_train.max_epochs=1"]
    assert _run(capsys, "synth", *common)[0] == 0
    code, _, err = _run(capsys, "mask-study", *common)
    assert code == 0, err
    study = json.loads(next((run_dir / "mask_study").glob("mask_study_*.json")).read_text())
    assert set(study["mean_diagonal"]) == {"extended", "transient"}
    assert all(set(row) == {"extended", "transient"} for row in study["mean_diagonal"].values())


@pytest.mark.slow
def test_synthetic_measure_separates_classes(capsys, tmp_path):
    """Measure validity on the default synthetic dataset."""
    run_dir = tmp_path / "synthetic"
    common = ["--preset", "synthetic", "-o", str(run_dir)]
    for command in (["synth"], ["train-measure"], ["validate-measure"]):
        code, _, err = _run(capsys, *command, *common)
        assert code == 0, err
    report = json.loads(next((run_dir / "validation").glob("confusion_*.json")).read_text())
    probs = np.array(report["probs"], dtype=float)
    assert list(np.argmax(probs, axis=1)) == [0, 1, 2]
    assert report["mean_diagonal"] >= 0.5
    tpr = json.loads(next((run_dir / "validation").glob("tpr_*.json")).read_text())
    assert tpr["overall"] >= 0.7


@pytest.mark.slow
def test_synthetic_representation_gain(capsys, tmp_path):
    """Trained encoder beats its random initialisation and keeps up with Sliding-MSE labels."""
    run_dir = tmp_path / "synthetic"
    common = ["--preset", "synthetic", "-o", str(run_dir)]
    for command in (["synth"], ["train-measure"], ["train-encoder"], ["eval"]):
        code, _, err = _run(capsys, *command, *common)
        assert code == 0, err
    report = json.loads(next((run_dir / "eval" / "rebar").glob("evaluation_*.json")).read_text())
    assert report["probe_accuracy_gain"] >= 0.10
    assert report["trained"]["clustering"]["ari"] > 0.3
    for command in (["train-encoder"], ["eval"]):
        code, _, err = _run(capsys, *command, *common, "--measure", "sliding-mse")
        assert code == 0, err
    sliding = json.loads(next((run_dir / "eval" / "sliding-mse").glob("evaluation_*.json")).read_text())
    assert report["trained"]["probe"]["accuracy"] >= sliding["trained"]["probe"]["accuracy"] - 0.02
    shutil.rmtree(run_dir)


@pytest.mark.slow
def test_extended_training_with_transient_evaluation_ranks_first(capsys, tmp_path):
    run_dir = tmp_path / "synthetic"
    common = ["--preset", "synthetic", "-o", str(run_dir)]
    for command in (["synth"], ["mask-study"]):
        code, _, err = _run(capsys, *command, *common)
        assert code == 0, err
    report = json.loads(next((run_dir / "mask_study").glob("mask_study_*.json")).read_text())
    assert report["best"] == ["extended", "transient"]
    table = report["mean_diagonal"]
    cells = [value for row in table.values() for value in row.values() if value is not None]
    assert table["extended"]["transient"] == max(cells)
