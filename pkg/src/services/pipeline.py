"""
Pipeline service: one method per CLI command.

Run directory layout (root = RunConfig.resolved_output_dir()):
    dataset/                       meta.json + payloads (unless data.path is set)
    measure/                       rebar.ckpt, loss_history.csv, manifest.json
    validation/                    confusion_* and tpr_* CSV/JSON, manifest_<measure>.json
    encoder/<measure>/             encoder.ckpt, loss_history.csv, manifest.json
    eval/<measure>/                evaluation_*.json, reports_*.csv, embeddings_<split>.csv
    mask_study/                    measure_<kind>.ckpt, mask_study_*.json/csv
"""

import dataclasses
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.checkpoint import parameter_checksum
from core.contrastive import train_contrastive, write_contrast_history
from core.data import (
    META_FILE,
    TimeSeriesDataset,
    generate_synthetic,
    import_csv_directory,
    load_dataset,
    save_dataset,
)
from core.encoder import TemporalEncoder, build_encoder, load_encoder, save_encoder
from core.evaluation import (
    MaskSpec,
    SlidingMSEMeasure,
    candidate_tpr,
    cluster_report,
    export_embeddings,
    linear_probe,
    mask_protocol_table,
    nn_validation,
    split_embeddings,
)
from core.masking import transient_count
from core.rebar_net import DistanceMeasure, RebarMeasure, build_rebar_model, load_rebar_model, save_rebar_model
from core.rebar_train import train_rebar, write_loss_history
from models.reports import EncoderEvaluation, EvaluationReport, MaskStudyReport
from utils.config import RebarConfig, RebarTrainConfig, RunConfig, SyntheticConfig
from utils.errors import ConfigError
from utils.io_utils import ensure_dir, write_csv, write_json

from .artifacts import ArtifactManager

logger = logging.getLogger(__name__)

MEASURES = ("rebar", "sliding-mse")


def measure_tag(measure: DistanceMeasure) -> str:
    """Short identifier embedded in report file names."""
    return f"{measure.name}-{hashlib.sha256(measure.fingerprint().encode('utf-8')).hexdigest()[:8]}"


class PipelineService:
    """Runs pipeline stages against one run directory."""

    def __init__(
        self,
        config: RunConfig,
        force: bool = False,
        rebar_checkpoint: Optional[Path] = None,
        encoder_checkpoint: Optional[Path] = None,
    ):
        self.config = config
        self.artifacts = ArtifactManager(config.resolved_output_dir(), force=force)
        self._rebar_checkpoint = Path(rebar_checkpoint) if rebar_checkpoint else None
        self._encoder_checkpoint = Path(encoder_checkpoint) if encoder_checkpoint else None

    # --- paths -----------------------------------------------------------

    @property
    def root(self) -> Path:
        return self.artifacts.root

    @property
    def dataset_dir(self) -> Path:
        if self.config.data.path:
            return Path(self.config.data.path)
        return self.root / "dataset"

    @property
    def rebar_checkpoint(self) -> Path:
        return self._rebar_checkpoint or self.root / "measure" / "rebar.ckpt"

    def encoder_checkpoint(self, measure_name: str) -> Path:
        return self._encoder_checkpoint or self.root / "encoder" / measure_name / "encoder.ckpt"

    @property
    def subseq_len(self) -> int:
        return self.config.rebar_train.subseq_len

    # --- shared loading ----------------------------------------------------

    def load_dataset(self) -> TimeSeriesDataset:
        self.artifacts.require(self.dataset_dir / META_FILE, "dataset", produced_by="synth or ingest")
        dataset = load_dataset(self.dataset_dir)
        logger.info("Loaded dataset %s: %d series, %d classes", dataset.name, len(dataset.series), dataset.num_classes)
        return dataset

    def rebar_model_config(self) -> RebarConfig:
        """Model config with the ablation flag from rebar_train folded in."""
        linear = self.config.rebar.linear_qkv or self.config.rebar_train.ablation_linear_qkv
        return self.config.rebar.model_copy(update={"linear_qkv": linear})

    def rebar_train_config(self) -> RebarTrainConfig:
        linear = self.config.rebar.linear_qkv or self.config.rebar_train.ablation_linear_qkv
        return self.config.rebar_train.model_copy(update={"ablation_linear_qkv": linear})

    def load_measure(self, measure_name: str, dataset: TimeSeriesDataset) -> DistanceMeasure:
        if measure_name == "sliding-mse":
            return SlidingMSEMeasure(dataset)
        if measure_name != "rebar":
            raise ConfigError(f"Unknown measure {measure_name!r}", details={"available": list(MEASURES)})
        path = self.artifacts.require(self.rebar_checkpoint, "REBAR checkpoint", produced_by="train-measure")
        return RebarMeasure(load_rebar_model(path, self.rebar_model_config(), dataset.channels))

    def eval_mask_spec(self, kind: Optional[str] = None) -> MaskSpec:
        evaluation = self.config.evaluation
        kind = kind or evaluation.mask_kind
        if kind == "transient":
            return MaskSpec("transient", transient_count(self.subseq_len, evaluation.mask_fraction))
        return MaskSpec("extended", self.config.rebar_train.extended_mask_len)

    def _measure_inputs(self, measure_name: str) -> Dict[str, Path]:
        inputs = {"dataset": self.dataset_dir}
        if measure_name == "rebar":
            inputs["rebar_checkpoint"] = self.rebar_checkpoint
        return inputs

    # --- commands --------------------------------------------------------

    def cmd_ingest(self, csv_dir: Path, class_names: Sequence[str], sample_rate_hz: float) -> Path:
        """Convert a directory of CSV recordings into a dataset directory."""
        self.artifacts.guard_outputs([self.dataset_dir / META_FILE])
        dataset = import_csv_directory(
            Path(csv_dir), class_names, sample_rate_hz, seed=self.config.seed, name=self.config.name
        )
        save_dataset(dataset, self.dataset_dir)
        self.artifacts.write_manifest(
            self.dataset_dir,
            "ingest",
            self.config,
            inputs={"csv_dir": Path(csv_dir)},
            outputs=[self.dataset_dir / META_FILE],
            summary={"series": len(dataset.series), "num_classes": dataset.num_classes},
            name="manifest_ingest.json",
        )
        logger.info("Ingested %d series into %s", len(dataset.series), self.dataset_dir)
        return self.dataset_dir

    def cmd_synth(self) -> Path:
        """Generate the synthetic motif dataset and save it."""
        synthetic = self.config.data.synthetic or SyntheticConfig()
        self.artifacts.guard_outputs([self.dataset_dir / META_FILE])
        dataset = generate_synthetic(synthetic)
        save_dataset(dataset, self.dataset_dir)
        self.artifacts.write_manifest(
            self.dataset_dir,
            "synth",
            self.config,
            inputs={},
            outputs=[self.dataset_dir / META_FILE],
            summary={
                "series": len(dataset.series),
                "splits": {split: len(dataset.split(split)) for split in ("train", "val", "test")},
            },
            name="manifest_synth.json",
        )
        logger.info("Wrote synthetic dataset (%d series) to %s", len(dataset.series), self.dataset_dir)
        return self.dataset_dir

    def cmd_train_measure(self) -> Path:
        """Train the REBAR network and write its checkpoint and loss history."""
        directory = self.stage_dir_for(self.rebar_checkpoint)
        history_path = directory / "loss_history.csv"
        self.artifacts.guard_outputs([self.rebar_checkpoint, history_path])
        dataset = self.load_dataset()

        model = build_rebar_model(self.rebar_model_config(), dataset.channels)
        model, history = train_rebar(dataset, model, self.rebar_train_config())
        save_rebar_model(model, self.rebar_checkpoint)
        write_loss_history(history, history_path)
        self.artifacts.write_manifest(
            directory,
            "train-measure",
            self.config,
            inputs={"dataset": self.dataset_dir},
            outputs=[self.rebar_checkpoint, history_path],
            summary={
                "epochs": len(history.records) - 1,
                "best_epoch": history.best_epoch,
                "initial_val_loss": history.initial_val_loss,
                "best_val_loss": history.best_val_loss,
                "stopped_early": history.stopped_early,
                "receptive_field": model.config.receptive_field,
            },
        )
        logger.info("Saved REBAR checkpoint to %s", self.rebar_checkpoint)
        return self.rebar_checkpoint

    def cmd_validate_measure(self, measure_name: str = "rebar") -> Dict[str, Path]:
        """Nearest-neighbour confusion matrix and candidate TPR for a measure."""
        dataset = self.load_dataset()
        measure = self.load_measure(measure_name, dataset)
        evaluation = self.config.evaluation
        directory = self.artifacts.stage_dir("validation")
        stem = f"{dataset.name}_{measure_tag(measure)}_s{self.config.seed}"
        paths = {
            "confusion_csv": directory / f"confusion_{stem}.csv",
            "confusion_json": directory / f"confusion_{stem}.json",
            "tpr_csv": directory / f"tpr_{stem}.csv",
            "tpr_json": directory / f"tpr_{stem}.json",
        }
        self.artifacts.guard_outputs(paths.values())

        mask_spec = self.eval_mask_spec()
        matrix = nn_validation(
            dataset, measure, self.subseq_len, evaluation.trials, mask_spec, np.random.default_rng(self.config.seed)
        )
        tpr = candidate_tpr(
            dataset,
            measure,
            self.subseq_len,
            evaluation.n_cand,
            evaluation.trials,
            np.random.default_rng(self.config.seed + 1),
            mask_spec=mask_spec,
        )

        write_csv(
            paths["confusion_csv"],
            ["true_class"] + list(dataset.class_names),
            [[name] + list(row) for name, row in zip(dataset.class_names, matrix.probs)],
        )
        write_json(paths["confusion_json"], {"measure": measure.name, "mask": dataclasses.asdict(mask_spec), **matrix.to_dict()})
        write_csv(
            paths["tpr_csv"],
            ["class", "tpr", "trials"],
            [[name, tpr.per_class[name], tpr.trials_per_class[name]] for name in dataset.class_names]
            + [["overall", tpr.overall, sum(tpr.trials_per_class.values())]],
        )
        write_json(paths["tpr_json"], tpr.model_dump(mode="json"))
        self.artifacts.write_manifest(
            directory,
            f"validate-measure --measure {measure_name}",
            self.config,
            inputs=self._measure_inputs(measure_name),
            outputs=list(paths.values()),
            summary={"mean_diagonal": matrix.to_dict()["mean_diagonal"], "tpr": tpr.overall},
            name=f"manifest_{measure_name}.json",
        )
        logger.info("Mean diagonal %.4f, candidate TPR %s", matrix.mean_diagonal(), tpr.overall)
        return paths

    def cmd_train_encoder(self, measure_name: str = "rebar") -> Path:
        """Contrastive training of the encoder with pairs labelled by the chosen measure."""
        checkpoint = self.encoder_checkpoint(measure_name)
        directory = self.stage_dir_for(checkpoint)
        history_path = directory / "loss_history.csv"
        self.artifacts.guard_outputs([checkpoint, history_path])
        dataset = self.load_dataset()
        measure = self.load_measure(measure_name, dataset)

        encoder = build_encoder(self.config.encoder, dataset.channels)
        encoder, history = train_contrastive(dataset, measure, encoder, self.config.contrastive, self.subseq_len)
        save_encoder(encoder, checkpoint)
        write_contrast_history(history, history_path)
        self.artifacts.write_manifest(
            directory,
            f"train-encoder --measure {measure_name}",
            self.config,
            inputs=self._measure_inputs(measure_name),
            outputs=[checkpoint, history_path],
            summary={
                "epochs": len(history.records),
                "best_epoch": history.best_epoch,
                "stopped_early": history.stopped_early,
                "between_negative_evaluations": history.between_negative_evaluations,
            },
        )
        logger.info("Saved encoder checkpoint to %s", checkpoint)
        return checkpoint

    def cmd_eval(self, measure_name: str = "rebar") -> Dict[str, Path]:
        """Linear probe, clustering and embedding export for a trained encoder and a random-init baseline."""
        checkpoint = self.artifacts.require(
            self.encoder_checkpoint(measure_name), "encoder checkpoint", produced_by="train-encoder"
        )
        dataset = self.load_dataset()
        evaluation = self.config.evaluation
        trained = load_encoder(checkpoint, self.config.encoder, dataset.channels)
        baseline = build_encoder(self.config.encoder, dataset.channels)

        directory = self.artifacts.stage_dir("eval", measure_name)
        stem = f"{dataset.name}_{measure_name}-{parameter_checksum(trained)[:8]}_s{self.config.seed}"
        paths = {
            "report_json": directory / f"evaluation_{stem}.json",
            "report_csv": directory / f"reports_{stem}.csv",
            "embeddings": directory / f"embeddings_{evaluation.export_split}.csv",
        }
        self.artifacts.guard_outputs(paths.values())

        trained_eval = self._evaluate_encoder("trained", trained, dataset)
        baseline_eval = self._evaluate_encoder("random_init", baseline, dataset)
        report = EvaluationReport(
            dataset=dataset.name,
            split="test",
            trained=trained_eval,
            random_init=baseline_eval,
            probe_accuracy_gain=trained_eval.probe.accuracy - baseline_eval.probe.accuracy,
        )
        write_json(paths["report_json"], report.model_dump(mode="json"))
        write_csv(
            paths["report_csv"],
            ["encoder", "accuracy", "auroc_macro", "auprc_macro", "ari", "nmi"],
            [
                [e.encoder, e.probe.accuracy, e.probe.auroc_macro, e.probe.auprc_macro, e.clustering.ari, e.clustering.nmi]
                for e in (trained_eval, baseline_eval)
            ],
        )
        rows = export_embeddings(trained, dataset, evaluation.export_split, paths["embeddings"], self.subseq_len)
        self.artifacts.write_manifest(
            directory,
            f"eval --measure {measure_name}",
            self.config,
            inputs={"dataset": self.dataset_dir, "encoder_checkpoint": checkpoint},
            outputs=list(paths.values()),
            summary={
                "accuracy": trained_eval.probe.accuracy,
                "random_init_accuracy": baseline_eval.probe.accuracy,
                "ari": trained_eval.clustering.ari,
                "nmi": trained_eval.clustering.nmi,
                "exported_rows": rows,
            },
        )
        logger.info(
            "Probe accuracy %.4f (random init %.4f), ARI %.4f, NMI %.4f",
            trained_eval.probe.accuracy,
            baseline_eval.probe.accuracy,
            trained_eval.clustering.ari,
            trained_eval.clustering.nmi,
        )
        return paths

    def _evaluate_encoder(self, label: str, encoder: TemporalEncoder, dataset: TimeSeriesDataset) -> EncoderEvaluation:
        evaluation = self.config.evaluation
        train_embs, train_labels, _ = split_embeddings(encoder, dataset, "train", self.subseq_len)
        test_embs, test_labels, _ = split_embeddings(encoder, dataset, "test", self.subseq_len)
        probe = linear_probe(
            train_embs,
            train_labels,
            test_embs,
            test_labels,
            l2=evaluation.probe_l2,
            max_iter=evaluation.probe_max_iter,
            tol=evaluation.probe_tol,
        )
        clusters = cluster_report(
            test_embs, test_labels, dataset.num_classes, self.config.seed, evaluation.kmeans_restarts
        )
        return EncoderEvaluation(encoder=label, probe=probe, clustering=clusters)

    def cmd_mask_study(self) -> Dict[str, Path]:
        """Train with extended and with transient masks; validate each under both mask kinds."""
        dataset = self.load_dataset()
        directory = self.artifacts.stage_dir("mask_study")
        dataset_name = dataset.name
        paths = {
            "json": directory / f"mask_study_{dataset_name}_s{self.config.seed}.json",
            "csv": directory / f"mask_study_{dataset_name}_s{self.config.seed}.csv",
        }
        kinds = ("extended", "transient")
        checkpoints = {kind: directory / f"measure_{kind}.ckpt" for kind in kinds}
        self.artifacts.guard_outputs(list(paths.values()) + list(checkpoints.values()))

        measures: Dict[str, DistanceMeasure] = {}
        for kind in kinds:
            model = build_rebar_model(self.rebar_model_config(), dataset.channels)
            train_config = self.rebar_train_config().model_copy(update={"train_mask_kind": kind})
            model, _ = train_rebar(dataset, model, train_config)
            save_rebar_model(model, checkpoints[kind])
            measures[kind] = RebarMeasure(model)

        eval_masks = {kind: self.eval_mask_spec(kind) for kind in kinds}
        table = mask_protocol_table(
            dataset, measures, eval_masks, self.subseq_len, self.config.evaluation.trials, self.config.seed
        )
        finite = [(value, train, ev) for train, row in table.items() for ev, value in row.items() if np.isfinite(value)]
        best = list(max(finite)[1:]) if finite else None
        report = MaskStudyReport(
            dataset=dataset.name,
            mean_diagonal={
                train: {ev: (float(v) if np.isfinite(v) else None) for ev, v in row.items()}
                for train, row in table.items()
            },
            best=best,
        )
        write_json(paths["json"], report.model_dump(mode="json"))
        write_csv(
            paths["csv"],
            ["train_mask", "eval_mask", "mean_diagonal"],
            [[train, ev, value] for train, row in table.items() for ev, value in row.items()],
        )
        self.artifacts.write_manifest(
            directory,
            "mask-study",
            self.config,
            inputs={"dataset": self.dataset_dir},
            outputs=list(paths.values()) + list(checkpoints.values()),
            summary={"best": best},
        )
        return paths

    # --- helpers -----------------------------------------------------------

    def stage_dir_for(self, path: Path) -> Path:
        return ensure_dir(path.parent)

    def storage_summary(self) -> Dict[str, Any]:
        return self.artifacts.get_storage_stats()

