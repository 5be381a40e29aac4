# File: src/app/schemas/training.py
from typing import List, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.app.schemas.perturbation import PerturbationSpec, default_training_specs
from src.app.schemas.quantizer import QuantizerConfig


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    feature_dim: int = Field(ge=1)
    encoder_hidden: List[int] = [64]
    hidden_dim: int = Field(default=64, ge=1)
    pool_factor: int = Field(default=2, ge=1)
    quantizer: QuantizerConfig = QuantizerConfig()
    n_classes: int = Field(ge=2)

    @model_validator(mode="after")
    def check_dims(self) -> "ModelConfig":
        problems = []
        if any(h < 1 for h in self.encoder_hidden):
            problems.append("encoder_hidden sizes must be positive")
        if self.quantizer.hidden_dim != self.hidden_dim:
            problems.append(
                f"quantizer.hidden_dim ({self.quantizer.hidden_dim}) must equal hidden_dim ({self.hidden_dim})"
            )
        if problems:
            raise ValueError("; ".join(problems))
        return self


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    consensus: float = Field(default=0.25, ge=0.0)
    commitment: float = Field(default=0.25, ge=0.0)
    codebook: float = Field(default=1.0, ge=0.0)


class NoiseAwareConfig(BaseModel):
    """
    Minority-branch routing: each step k ~ U{1..floor((n-1)/2)} branches see the
    perturbed stream. `enabled=False` feeds every branch the clean stream.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = True
    spec_set: List[PerturbationSpec] = Field(default_factory=lambda: default_training_specs())

    @model_validator(mode="after")
    def check_specs(self) -> "NoiseAwareConfig":
        if self.enabled and not self.spec_set:
            raise ValueError("spec_set must be non-empty when noise-aware training is enabled")
        return self


class OptimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(default=1e-3, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    grad_clip: float = Field(default=1.0, gt=0.0)
    warmup_steps: int = Field(default=100, ge=0)

    @model_validator(mode="after")
    def check_betas(self) -> "OptimConfig":
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=8, ge=0)
    batch_size: int = Field(default=16, ge=1)
    consensus_stop_grad: bool = False


class LossBreakdown(BaseModel):
    """l_total = l_task + w.consensus*l_consensus + w.commitment*l_commitment + w.codebook*l_codebook"""

    model_config = ConfigDict(frozen=True)

    l_task: float
    l_consensus: float
    l_commitment: float
    l_codebook: float
    l_total: float
    weights: LossWeights

    def recomputed_total(self) -> float:
        w = self.weights
        return (
            self.l_task
            + w.consensus * self.l_consensus
            + w.commitment * self.l_commitment
            + w.codebook * self.l_codebook
        )


class EpochRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    epoch: int
    steps: int
    l_task: float
    l_consensus: float
    l_commitment: float
    l_codebook: float
    l_total: float
    clean_frame_accuracy: float


HISTORY_FIELDS = [
    "epoch",
    "steps",
    "l_task",
    "l_consensus",
    "l_commitment",
    "l_codebook",
    "l_total",
    "clean_frame_accuracy",
]
