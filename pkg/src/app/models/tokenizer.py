# File: src/app/models/tokenizer.py
"""
Encoder -> average pooling -> Voting-LFQ -> linear proxy head.

The encoder is a stack of affine layers with relu between them, applied frame
by frame to normalized filterbank features. Pooled hidden frames feed the
quantizer; the head maps the consensus score s to class logits and is only
used for training and frame-accuracy checks, never for tokenization.
"""
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.app.core.seeding import make_rng
from src.app.models import tensor as T
from src.app.models.tensor import Tensor
from src.app.models.voting_lfq import BranchBank, quantize_frame_infer, sign_pm
from src.app.schemas.signal import FeatureConfig
from src.app.schemas.training import ModelConfig
from src.app.utils.exceptions import (
    ResourceNotFoundException,
    UnsupportedFormatException,
    ValidationException,
)
from src.app.utils.helpers import write_json

CHECKPOINT_FORMAT_VERSION = 1
STD_FLOOR = 1e-6

Layer = Tuple[Tensor, Tensor]


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> Layer:
    bound = 1.0 / math.sqrt(fan_in)
    weight = Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True)
    bias = Tensor(np.zeros(fan_out), requires_grad=True)
    return weight, bias


class TokenizerModel:
    def __init__(
        self,
        config: ModelConfig,
        encoder: List[Layer],
        bank: BranchBank,
        head: Layer,
        feature_mean: Optional[np.ndarray] = None,
        feature_std: Optional[np.ndarray] = None,
        feature_config: Optional[FeatureConfig] = None,
    ):
        if bank.hidden_dim != config.hidden_dim or bank.code_dim != config.quantizer.code_dim:
            raise ValidationException("Branch bank shape does not match the model config.")
        if head[0].shape != (config.n_classes, config.quantizer.code_dim):
            raise ValidationException(
                f"Head weight shape {head[0].shape} != ({config.n_classes}, {config.quantizer.code_dim})"
            )
        if feature_config is None:
            feature_config = FeatureConfig(n_bands=config.feature_dim)
        elif feature_config.n_bands != config.feature_dim:
            raise ValidationException(
                f"Front end yields {feature_config.n_bands} bands but the model expects {config.feature_dim}"
            )
        self.config = config
        self.encoder = encoder
        self.bank = bank
        self.head = head
        self.feature_mean = np.zeros(config.feature_dim) if feature_mean is None else np.asarray(feature_mean)
        self.feature_std = np.ones(config.feature_dim) if feature_std is None else np.asarray(feature_std)
        self.feature_config = feature_config

    @classmethod
    def initialize(
        cls, config: ModelConfig, seed: int, feature_config: Optional[FeatureConfig] = None
    ) -> "TokenizerModel":
        sizes = [config.feature_dim, *config.encoder_hidden, config.hidden_dim]
        encoder = [
            _uniform_layer(make_rng(seed, f"init/encoder/{i}"), fan_in, fan_out)
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        bank = BranchBank.initialize(config.quantizer, seed)
        head = _uniform_layer(make_rng(seed, "init/head"), config.quantizer.code_dim, config.n_classes)
        return cls(config, encoder, bank, head, feature_config=feature_config)

    @property
    def pool_factor(self) -> int:
        return self.config.pool_factor

    @property
    def code_dim(self) -> int:
        return self.config.quantizer.code_dim

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, (W, b) in enumerate(self.encoder):
            params[f"encoder.{i}.weight"] = W
            params[f"encoder.{i}.bias"] = b
        params.update(self.bank.parameters())
        params["head.weight"], params["head.bias"] = self.head
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def fit_normalizer(self, feature_sets: Sequence[np.ndarray]) -> None:
        """Per-band mean and std over every frame of the given feature matrices."""
        if not feature_sets:
            raise ValidationException("fit_normalizer needs at least one feature matrix.")
        stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in feature_sets], axis=0)
        self.feature_mean = stacked.mean(axis=0)
        self.feature_std = np.maximum(stacked.std(axis=0), STD_FLOOR)

    def _check_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ValidationException(
                f"Expected features of shape (frames, {self.config.feature_dim}), got {features.shape}"
            )
        if features.shape[0] == 0:
            raise ValidationException("Cannot encode an empty feature matrix.")
        return features

    def encode(self, features: np.ndarray) -> Tensor:
        """Frame-wise hidden states (frames, hidden_dim)."""
        x = Tensor((self._check_features(features) - self.feature_mean) / self.feature_std)
        last = len(self.encoder) - 1
        for i, (W, b) in enumerate(self.encoder):
            x = T.affine(x, W, b)
            if i < last:
                x = T.relu(x)
        return x

    def pool(self, hidden: Tensor) -> Tensor:
        return T.avg_pool_time(hidden, self.pool_factor)

    def encode_pooled(self, features: np.ndarray) -> Tensor:
        return self.pool(self.encode(features))

    def head_logits(self, s: Tensor) -> Tensor:
        W, b = self.head
        return T.affine(s, W, b)

    def n_tokens(self, n_frames: int) -> int:
        """Pooled frame count; a ragged tail is padded up to a full group."""
        return math.ceil(n_frames / self.pool_factor)

    def hidden_frames(self, features: np.ndarray) -> np.ndarray:
        return self.encode_pooled(features).values

    def tokens(self, features: np.ndarray) -> np.ndarray:
        """Voted token per pooled frame, plain numpy and safe to call from several threads."""
        return np.atleast_1d(quantize_frame_infer(self.hidden_frames(features), self.bank))

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Proxy-head class per pooled frame, fed with the consensus of the sign codes."""
        h = self.hidden_frames(features)
        codes = [sign_pm(h @ W.values.T + b.values) for W, b in zip(self.bank.weights, self.bank.biases)]
        s = np.mean(codes, axis=0)
        W, b = self.head
        return np.argmax(s @ W.values.T + b.values, axis=1)

    def save(self, path: Union[str, Path]) -> Path:
        """Parameters, normalizer and front end; a tied bank stores its shared pair once."""
        arrays = {name: p.values for name, p in self.parameters().items()}
        arrays["normalizer.mean"] = self.feature_mean
        arrays["normalizer.std"] = self.feature_std
        return write_json(
            path,
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "config": self.config.model_dump(mode="json"),
                "features": self.feature_config.model_dump(mode="json"),
                "tied_branches": self.bank.is_tied,
                "arrays": {
                    name: {"shape": list(values.shape), "values": values.ravel().tolist()}
                    for name, values in arrays.items()
                },
            },
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TokenizerModel":
        path = Path(path)
        if not path.is_file():
            raise ResourceNotFoundException(f"Checkpoint not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UnsupportedFormatException(f"Checkpoint is not valid JSON: {path} ({exc})")
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise UnsupportedFormatException(
                f"Unsupported checkpoint format_version {payload.get('format_version')!r}"
            )

        if "features" not in payload:
            raise UnsupportedFormatException(f"Checkpoint has no feature front end: {path}")
        config = ModelConfig.model_validate(payload["config"])
        feature_config = FeatureConfig.model_validate(payload["features"])
        arrays = {
            name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["arrays"].items()
        }

        def take(name: str) -> np.ndarray:
            if name not in arrays:
                raise UnsupportedFormatException(f"Checkpoint is missing array {name!r}")
            return arrays[name]

        def param(name: str) -> Tensor:
            return Tensor(take(name), requires_grad=True)

        n_layers = len(config.encoder_hidden) + 1
        encoder = [(param(f"encoder.{i}.weight"), param(f"encoder.{i}.bias")) for i in range(n_layers)]
        n = config.quantizer.n_branches
        if payload.get("tied_branches", False):
            bank = BranchBank.tied(param("branch.0.weight"), param("branch.0.bias"), n)
        else:
            bank = BranchBank([param(f"branch.{i}.weight") for i in range(n)], [param(f"branch.{i}.bias") for i in range(n)])
        head = (param("head.weight"), param("head.bias"))
        return cls(config, encoder, bank, head, take("normalizer.mean"), take("normalizer.std"), feature_config)
