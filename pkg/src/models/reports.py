"""Report, manifest and error models emitted by the pipeline."""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class ErrorResponse(BaseModel):
    """Error document printed to stderr when a command fails."""
    success: bool = False
    error: Dict[str, Any]


class ProbeReport(BaseModel):
    """Linear-probe scores on frozen embeddings."""
    accuracy: float = Field(ge=0.0, le=1.0)
    auroc_macro: float = Field(ge=0.0, le=1.0)
    auprc_macro: float = Field(ge=0.0, le=1.0)
    n_train: int = 0
    n_test: int = 0
    classes_scored: List[int] = Field(default_factory=list, description="Classes with both positives and negatives in test")


class ClusterReport(BaseModel):
    """k-means agreement with the true labels."""
    ari: float = Field(ge=-1.0, le=1.0)
    nmi: float = Field(ge=0.0, le=1.0)
    k: int
    assignments: List[int]


class TprReport(BaseModel):
    """Share of trials whose chosen positive has the anchor's class."""
    overall: Optional[float] = None
    per_class: Dict[str, Optional[float]]
    trials_per_class: Dict[str, int]
    n_cand: int


class EncoderEvaluation(BaseModel):
    """Probe and clustering results for one encoder."""
    encoder: str
    probe: ProbeReport
    clustering: ClusterReport


class EvaluationReport(BaseModel):
    """Everything cmd_eval produces for a trained encoder and its random-init baseline."""
    dataset: str
    split: str
    trained: EncoderEvaluation
    random_init: EncoderEvaluation
    probe_accuracy_gain: float


class MaskStudyReport(BaseModel):
    """Mean diagonal of nn_validation for each (train mask, eval mask) pair."""
    dataset: str
    mean_diagonal: Dict[str, Dict[str, Optional[float]]]
    best: Optional[List[str]] = None


class RunManifest(BaseModel):
    """Traceability record written next to every command's outputs."""
    command: str
    config_hash: str
    seed: int
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input path -> sha256")
    outputs: List[str] = Field(default_factory=list)
    versions: Dict[str, str] = Field(default_factory=dict)
    summary: Dict[str, Any] = Field(default_factory=dict)
