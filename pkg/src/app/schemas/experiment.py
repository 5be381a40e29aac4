# File: src/app/schemas/experiment.py
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator

from src.app.schemas.perturbation import PerturbationSpec
from src.app.schemas.signal import CorpusSpec, FeatureConfig
from src.app.schemas.training import LossWeights, ModelConfig, NoiseAwareConfig, OptimConfig, TrainConfig
from src.app.schemas.validators import CommonValidators


class VoteAnalysisConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_values: List[int] = [1, 3, 5]
    d: int = Field(default=13, ge=1, le=62)
    p_values: List[float] = [0.05, 0.1, 0.2]
    trials: int = Field(default=100_000, ge=1)

    @field_validator("n_values")
    @classmethod
    def n_values_must_be_odd(cls, v: List[int]) -> List[int]:
        return CommonValidators().validate_odd_counts(v, "n_values")

    @field_validator("p_values")
    @classmethod
    def p_values_in_range(cls, v: List[float]) -> List[float]:
        if any(not 0.0 <= p <= 1.0 for p in v):
            raise ValueError("p_values must lie in [0, 1]")
        return v


class ExperimentConfig(BaseModel):
    """
    One experiment file. All randomness derives from `seed`; the corpus seed
    inside `corpus` is replaced by a derived one when an experiment runs.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(default=0, ge=0)
    output_dir: Path = Path("runs")

    corpus: CorpusSpec
    n_eval_utterances: int = Field(default=50, ge=1)
    features: FeatureConfig = FeatureConfig()
    model: ModelConfig

    noise_aware: NoiseAwareConfig = NoiseAwareConfig()
    loss_weights: LossWeights = LossWeights()
    optim: OptimConfig = OptimConfig()
    train: TrainConfig = TrainConfig()

    eval_suite: Optional[List[PerturbationSpec]] = None
    noise_pool: Optional[Path] = None
    ood_noise_pool: Optional[Path] = None
    synth_noise_pool: bool = False
    noise_clips_per_family: int = Field(default=4, ge=1)

    ablation_seeds: List[int] = [0, 1, 2]
    voter_counts: List[int] = [3, 5, 7]
    vote_analysis: VoteAnalysisConfig = VoteAnalysisConfig()

    @field_validator("voter_counts")
    @classmethod
    def voter_counts_must_be_odd(cls, v: List[int]) -> List[int]:
        return CommonValidators().validate_odd_counts(v, "voter_counts")

    # cross-field checks read earlier fields from info.data

    @field_validator("model")
    @classmethod
    def model_matches_data(cls, model: ModelConfig, info: ValidationInfo) -> ModelConfig:
        problems = []
        features = info.data.get("features")
        corpus = info.data.get("corpus")
        if features is not None and model.feature_dim != features.n_bands:
            problems.append(f"model.feature_dim ({model.feature_dim}) must equal features.n_bands ({features.n_bands})")
        if corpus is not None and model.n_classes != corpus.alphabet_size:
            problems.append(
                f"model.n_classes ({model.n_classes}) must equal corpus.alphabet_size ({corpus.alphabet_size})"
            )
        if problems:
            raise ValueError("; ".join(problems))
        return model

    @field_validator("eval_suite")
    @classmethod
    def eval_suite_labels_unique(cls, v: Optional[List[PerturbationSpec]]) -> Optional[List[PerturbationSpec]]:
        if v is None:
            return v
        labels = [spec.label for spec in v]
        if not labels:
            raise ValueError("eval_suite must not be empty")
        if len(set(labels)) != len(labels):
            raise ValueError(f"eval_suite labels must be unique, got {labels}")
        return v

    @field_validator("synth_noise_pool")
    @classmethod
    def synth_pool_excludes_explicit_pools(cls, v: bool, info: ValidationInfo) -> bool:
        if v and (info.data.get("noise_pool") is not None or info.data.get("ood_noise_pool") is not None):
            raise ValueError("synth_noise_pool cannot be combined with explicit noise_pool/ood_noise_pool")
        return v

    @field_validator("ablation_seeds")
    @classmethod
    def ablation_seeds_not_empty(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("ablation_seeds must not be empty")
        return v
