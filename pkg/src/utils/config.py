"""Configuration models for the REBAR pipeline.

Every section of the run configuration file is a pydantic model. Validation
errors are collected across all sections and re-raised as one ConfigError.
"""

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError

OUTPUT_ROOT_ENV = "REBAR_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

MaskKind = Literal["extended", "transient"]
MeasureName = Literal["rebar", "sliding-mse"]
SplitName = Literal["train", "val", "test"]

ModelT = TypeVar("ModelT", bound=BaseModel)


class _Section(BaseModel):
    """Base for config sections: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SyntheticConfig(_Section):
    """Parameters of the deterministic motif dataset generator."""

    name: str = Field(default="synthetic", description="Dataset name used in report file names")
    num_classes: int = Field(default=3, ge=2, description="Number of classes C")
    num_series: int = Field(default=10, ge=1, description="Number of series N")
    series_length: int = Field(default=3000, ge=1, description="Timesteps per series U")
    channels: int = Field(default=1, ge=1, description="Channels per timestep D")
    motifs_per_class: int = Field(default=2, ge=1, description="Motif templates per class")
    motif_length: int = Field(default=24, ge=1, description="Timesteps per motif template")
    segment_length_range: Tuple[int, int] = Field(
        default=(300, 600), description="Inclusive (min, max) length of a class segment"
    )
    noise_std: float = Field(default=0.1, ge=0.0, description="Gaussian noise added everywhere")
    sample_rate_hz: float = Field(default=50.0, gt=0.0, description="Nominal sampling rate")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Generator seed")

    @model_validator(mode="after")
    def _check_segments(self) -> "SyntheticConfig":
        low, high = self.segment_length_range
        if low < 1 or high < low:
            raise ValueError(f"segment_length_range must satisfy 1 <= min <= max, got {self.segment_length_range}")
        if low < self.motif_length:
            raise ValueError(
                f"segment_length_range min ({low}) must be >= motif_length ({self.motif_length})"
            )
        return self


class DataConfig(_Section):
    """Where the dataset comes from."""

    path: Optional[str] = Field(default=None, description="Dataset directory (meta.json + payloads)")
    synthetic: Optional[SyntheticConfig] = Field(default=None, description="Synthetic generator settings")


class RebarConfig(_Section):
    """Architecture of the REBAR cross-attention network."""

    in_channels: Optional[int] = Field(default=None, ge=1, description="D; filled from the dataset when omitted")
    embed_channels: int = Field(default=256, ge=1)
    bottleneck_channels: int = Field(default=32, ge=1)
    base_kernel: int = Field(default=15, ge=1)
    num_layers: int = Field(default=2, ge=0)
    num_heads: int = Field(default=4, ge=1)
    softmax_scale: bool = Field(default=True, description="Divide logits by sqrt(embed_channels)")
    revin_eps: float = Field(default=1e-5, gt=0.0)
    linear_qkv: bool = Field(default=False, description="Pointwise linear f_q/f_k/f_v (ablation)")
    init_seed: Optional[int] = Field(default=None, ge=0)

    @field_validator("base_kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"base_kernel must be odd, got {value}")
        return value

    @model_validator(mode="after")
    def _heads_divide_embedding(self) -> "RebarConfig":
        if self.embed_channels % self.num_heads != 0:
            raise ValueError(
                f"embed_channels ({self.embed_channels}) must be divisible by num_heads ({self.num_heads})"
            )
        return self

    @property
    def receptive_field(self) -> int:
        """Timesteps influencing one output of f_q/f_k/f_v."""
        if self.linear_qkv:
            return 1
        return receptive_field(self.base_kernel, self.num_layers)


class RebarTrainConfig(_Section):
    """Self-reconstruction training of the REBAR network."""

    extended_mask_len: int = Field(default=15, ge=1, description="n of the extended mask")
    subseq_len: int = Field(default=128, ge=2, description="Subsequence length T used by every stage")
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0.0)
    max_epochs: int = Field(default=50, ge=1)
    patience: int = Field(default=5, ge=1)
    seed: Optional[int] = Field(default=None, ge=0)
    ablation_linear_qkv: bool = Field(default=False)
    train_mask_kind: MaskKind = Field(default="extended", description="Mask family used for training")
    windows_per_epoch_factor: int = Field(
        default=4, ge=1, description="Samples per epoch as a multiple of disjoint training windows"
    )

    @model_validator(mode="after")
    def _mask_shorter_than_window(self) -> "RebarTrainConfig":
        if self.extended_mask_len >= self.subseq_len:
            raise ValueError(
                f"extended_mask_len ({self.extended_mask_len}) must be < subseq_len ({self.subseq_len})"
            )
        return self


class EncoderConfig(_Section):
    """Dilated-convolution temporal encoder."""

    in_channels: Optional[int] = Field(default=None, ge=1)
    hidden_channels: int = Field(default=64, ge=1)
    num_blocks: int = Field(default=10, ge=0)
    kernel: int = Field(default=3, ge=1)
    embed_dim: int = Field(default=320, gt=0)
    pooling: Literal["max"] = Field(default="max", description="Global pooling over time")
    init_seed: Optional[int] = Field(default=None, ge=0)

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"kernel must be odd, got {value}")
        return value


class ContrastConfig(_Section):
    """REBAR-labelled contrastive training."""

    n_cand: int = Field(default=20, ge=1, description="Candidates per anchor")
    tau: float = Field(default=0.1, gt=0.0, description="NT-Xent temperature")
    alpha: float = Field(default=0.0, ge=0.0, le=1.0, description="Weight of the between-series loss")
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0.0)
    max_epochs: int = Field(default=50, ge=1)
    patience: int = Field(default=5, ge=1)
    transient_mask_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    steps_per_epoch: Optional[int] = Field(default=None, ge=1, description="Defaults to disjoint windows / batch")
    seed: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _between_needs_batch(self) -> "ContrastConfig":
        if self.alpha > 0 and self.batch_size < 2:
            raise ValueError("alpha > 0 needs batch_size >= 2 to form between-series negatives")
        return self


class EvaluationConfig(_Section):
    """Validation experiments and representation evaluation."""

    trials: int = Field(default=50, ge=1, description="Trials per series and class")
    n_cand: int = Field(default=20, ge=1, description="Candidate set size for the TPR experiment")
    mask_kind: MaskKind = Field(default="transient", description="Mask applied when measuring distances")
    mask_fraction: float = Field(default=0.5, gt=0.0, le=1.0, description="Masked share for transient masks")
    measure: MeasureName = Field(default="rebar")
    probe_l2: float = Field(default=1e-4, ge=0.0)
    probe_max_iter: int = Field(default=1000, ge=1)
    probe_tol: float = Field(default=1e-6, gt=0.0)
    kmeans_restarts: int = Field(default=10, ge=1)
    export_split: SplitName = Field(default="test")


class RunConfig(_Section):
    """A complete, validated pipeline configuration."""

    name: str = Field(default="rebar", min_length=1)
    seed: int = Field(default=0, ge=0)
    output_dir: Optional[str] = Field(default=None)
    data: DataConfig = Field(default_factory=DataConfig)
    rebar: RebarConfig = Field(default_factory=RebarConfig)
    rebar_train: RebarTrainConfig = Field(default_factory=RebarTrainConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    contrastive: ContrastConfig = Field(default_factory=ContrastConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def _fill_seeds(self) -> "RunConfig":
        # sections without an explicit seed derive one from the run seed
        filled = {
            ("rebar", "init_seed"): self.seed + 1,
            ("rebar_train", "seed"): self.seed + 2,
            ("encoder", "init_seed"): self.seed + 3,
            ("contrastive", "seed"): self.seed + 4,
        }
        for (section, key), value in filled.items():
            model = getattr(self, section)
            if getattr(model, key) is None:
                setattr(model, key, value)
        return self

    def resolved_output_dir(self) -> Path:
        """Output directory, defaulting to $REBAR_OUTPUT_ROOT/<name>."""
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.getenv(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / self.name

    def to_dict(self) -> Dict[str, Any]:
        """Convert configuration to a JSON-ready dictionary."""
        return self.model_dump(mode="json")


def receptive_field(kernel: int, num_layers: int) -> int:
    """1 + (kernel - 1) * sum of dilations 2^0 .. 2^(num_layers-1)."""
    return 1 + (kernel - 1) * (2**num_layers - 1)


# Published per-dataset hyperparameters; T, mask length and layer count follow
# the subsequence lengths and receptive fields used for each modality.
PRESETS: Dict[str, Dict[str, Any]] = {
    "har": {
        "rebar": {"num_layers": 2, "base_kernel": 15},
        "rebar_train": {"subseq_len": 128, "extended_mask_len": 15, "batch_size": 64},
        "contrastive": {"tau": 0.1, "alpha": 0.0, "learning_rate": 1e-3, "batch_size": 64, "n_cand": 20},
    },
    "ppg": {
        "rebar": {"num_layers": 6, "base_kernel": 15},
        "rebar_train": {"subseq_len": 3840, "extended_mask_len": 300, "batch_size": 16},
        "contrastive": {"tau": 10.0, "alpha": 0.5, "learning_rate": 1e-4, "batch_size": 16, "n_cand": 20},
    },
    "ecg": {
        "rebar": {"num_layers": 6, "base_kernel": 15},
        "rebar_train": {"subseq_len": 2500, "extended_mask_len": 300, "batch_size": 16},
        "contrastive": {"tau": 0.01, "alpha": 1.0, "learning_rate": 1e-3, "batch_size": 16, "n_cand": 20},
    },
    "synthetic": {
        "data": {"synthetic": {}},
        "rebar": {"embed_channels": 64, "bottleneck_channels": 16, "num_layers": 2, "base_kernel": 15},
        "rebar_train": {"subseq_len": 128, "extended_mask_len": 15, "batch_size": 32, "max_epochs": 50},
        "encoder": {"hidden_channels": 32, "num_blocks": 6},
        "contrastive": {"tau": 0.1, "alpha": 0.0, "batch_size": 16, "max_epochs": 50},
    },
}


def deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge overlay into a copy of base."""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(data: Dict[str, Any], assignment: str) -> None:
    """Apply one `section.key=value` override in place. Values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"Override must look like section.key=value: {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = [part for part in dotted.strip().split(".") if part]
    if not keys:
        raise ConfigError(f"Override has an empty key: {assignment!r}")
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = {}
            node[key] = child
        if not isinstance(child, dict):
            raise ConfigError(f"Override path {dotted!r} crosses a non-section value at {key!r}")
        node = child
    node[keys[-1]] = value


def format_validation_errors(exc: ValidationError) -> List[Dict[str, str]]:
    """Flatten a pydantic ValidationError into field/message records."""
    return [
        {"field": ".".join(str(part) for part in error["loc"]) or "<root>", "message": error["msg"]}
        for error in exc.errors()
    ]


def build_config(model_cls: Type[ModelT], data: Optional[Dict[str, Any]] = None, **kwargs: Any) -> ModelT:
    """Validate a config section, converting pydantic errors to ConfigError."""
    payload = dict(data or {})
    payload.update(kwargs)
    try:
        return model_cls.model_validate(payload)
    except ValidationError as exc:
        errors = format_validation_errors(exc)
        raise ConfigError(
            f"{model_cls.__name__} failed validation ({len(errors)} field(s))", details=errors
        ) from exc


def load_run_config(
    path: Optional[Path] = None,
    preset: Optional[str] = None,
    overrides: Optional[List[str]] = None,
) -> RunConfig:
    """Build a RunConfig from preset, JSON file and --set overrides, in that order."""
    data: Dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}", details={"available": sorted(PRESETS)})
        data = copy.deepcopy(PRESETS[preset])
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Configuration file not found: {path}")
        try:
            file_data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Configuration file is not valid JSON: {path}", details=str(exc)) from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"Configuration file must hold a JSON object: {path}")
        data = deep_merge(data, file_data)
    for assignment in overrides or []:
        apply_override(data, assignment)
    return build_config(RunConfig, data)
