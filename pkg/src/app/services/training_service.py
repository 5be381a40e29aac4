# File: src/app/services/training_service.py
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.app.core.logger import create_logger
from src.app.core.seeding import make_rng
from src.app.models import tensor as T
from src.app.models.optim import OptimState, adamw_step
from src.app.models.tensor import Tape, Tensor
from src.app.models.tokenizer import TokenizerModel
from src.app.models.voting_lfq import quantize_frame_train
from src.app.schemas.perturbation import AppliedPerturbation
from src.app.schemas.signal import FeatureConfig, Utterance, Waveform
from src.app.schemas.training import (
    EpochRecord,
    LossBreakdown,
    LossWeights,
    NoiseAwareConfig,
    OptimConfig,
    TrainConfig,
)
from src.app.services.loss_service import codebook_entropy_loss, commitment_loss, consensus_loss
from src.app.services.noise_service import perturb
from src.app.services.signal_service import extract_features
from src.app.utils.exceptions import NonFiniteException, ValidationException

logger = create_logger("training", "training_service.log")


def route_branches(n: int, rng: np.random.Generator) -> List[bool]:
    """
    Pick the branches that read the perturbed stream this step.

    k ~ U{1..floor((n-1)/2)} and a uniform k-subset is flagged; a single branch
    is never perturbed.
    """
    if n < 1 or n % 2 == 0:
        raise ValidationException(f"route_branches needs an odd branch count, got {n}")
    flags = [False] * n
    if n == 1:
        return flags
    k = int(rng.integers(1, (n - 1) // 2 + 1))
    for i in rng.choice(n, size=k, replace=False):
        flags[int(i)] = True
    return flags


def pooled_labels(labels: Sequence[int], pool_factor: int) -> List[int]:
    """Each pooled frame takes the label of its first constituent frame."""
    return list(labels[::pool_factor])


class PreparedBatch(BaseModel):
    """Everything one step consumes, fixed before the forward pass."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    clean: List[np.ndarray]
    perturbed: Optional[List[np.ndarray]] = None
    labels: List[int]
    routing: Optional[List[List[bool]]] = None
    applied: List[AppliedPerturbation] = []


def compute_losses(
    model: TokenizerModel,
    batch: PreparedBatch,
    weights: LossWeights,
    consensus_stop_grad: bool = False,
    surrogate: bool = False,
) -> Tuple[Tensor, LossBreakdown]:
    """
    Composite objective for one prepared batch:

        l_total = l_task + w.consensus * l_consensus + w.commitment * l_commitment + w.codebook * l_codebook

    With `surrogate` the sign is replaced by the identity so the graph is
    smooth enough for finite-difference checks.
    """
    clip = model.config.quantizer.ste_clip
    if batch.routing is None:
        h = T.concat([model.encode_pooled(f) for f in batch.clean], axis=0)
        s, pre_quant, _ = quantize_frame_train(h, model.bank, clip=clip, surrogate=surrogate)
    else:
        # each utterance feeds its perturbed frames to its own branch subset
        scores, per_utterance = [], []
        for clean, noisy, flags in zip(batch.clean, batch.perturbed, batch.routing):
            s_u, pre_u, _ = quantize_frame_train(
                model.encode_pooled(clean),
                model.bank,
                model.encode_pooled(noisy),
                flags,
                clip=clip,
                surrogate=surrogate,
            )
            scores.append(s_u)
            per_utterance.append(pre_u)
        s = T.concat(scores, axis=0)
        pre_quant = [T.concat(list(branch), axis=0) for branch in zip(*per_utterance)]
    l_task = T.softmax_xent(model.head_logits(s), batch.labels)
    l_consensus = consensus_loss(pre_quant, stop_grad=consensus_stop_grad) if len(pre_quant) > 1 else Tensor(0.0)
    l_commitment = commitment_loss(pre_quant)
    l_codebook = codebook_entropy_loss(pre_quant)

    total = T.add(
        T.add(l_task, T.scale(l_consensus, weights.consensus)),
        T.add(T.scale(l_commitment, weights.commitment), T.scale(l_codebook, weights.codebook)),
    )
    breakdown = LossBreakdown(
        l_task=l_task.item(),
        l_consensus=l_consensus.item(),
        l_commitment=l_commitment.item(),
        l_codebook=l_codebook.item(),
        l_total=total.item(),
        weights=weights,
    )
    return total, breakdown


class TrainingService:
    def __init__(
        self,
        model: TokenizerModel,
        feature_config: FeatureConfig,
        noise_aware: NoiseAwareConfig,
        weights: LossWeights,
        optim_config: OptimConfig,
        train_config: TrainConfig = TrainConfig(),
    ):
        if feature_config.n_bands != model.config.feature_dim:
            raise ValidationException(
                f"Front end yields {feature_config.n_bands} bands but the model expects {model.config.feature_dim}"
            )
        # the checkpoint records the front end the model was trained on
        model.feature_config = feature_config
        self.model = model
        self.feature_config = feature_config
        self.noise_aware = noise_aware
        self.weights = weights
        self.train_config = train_config
        self.optim_state = OptimState.for_params(model.parameters(), optim_config)
        self._feature_cache: Dict[str, np.ndarray] = {}

    def features(self, utterance: Utterance) -> np.ndarray:
        """Clean features, extracted once per utterance id."""
        cached = self._feature_cache.get(utterance.utterance_id)
        if cached is None:
            cached = extract_features(utterance.waveform, self.feature_config)
            if cached.shape[0] != len(utterance.labels):
                raise ValidationException(
                    f"{utterance.utterance_id}: {cached.shape[0]} frames but {len(utterance.labels)} labels"
                )
            self._feature_cache[utterance.utterance_id] = cached
        return cached

    def prepare_batch(
        self,
        utterances: Sequence[Utterance],
        noise_rng: np.random.Generator,
        routing_rng: np.random.Generator,
    ) -> PreparedBatch:
        """
        Perturbation and branch routing are both resampled per utterance.
        """
        if not utterances:
            raise ValidationException("A training batch needs at least one utterance.")

        clean = [self.features(u) for u in utterances]
        labels = [label for u in utterances for label in pooled_labels(u.labels, self.model.pool_factor)]
        if not self.noise_aware.enabled:
            return PreparedBatch(clean=clean, labels=labels)

        n_branches = self.model.config.quantizer.n_branches
        perturbed, applied, routing = [], [], []
        for utterance in utterances:
            noisy, record = perturb(utterance.waveform, self.noise_aware.spec_set, noise_rng)
            perturbed.append(extract_features(noisy, self.feature_config))
            applied.append(record)
            routing.append(route_branches(n_branches, routing_rng))
        return PreparedBatch(clean=clean, perturbed=perturbed, labels=labels, routing=routing, applied=applied)

    def train_step(
        self,
        utterances: Sequence[Utterance],
        noise_rng: np.random.Generator,
        routing_rng: np.random.Generator,
    ) -> LossBreakdown:
        batch = self.prepare_batch(utterances, noise_rng, routing_rng)
        params = self.model.parameters()
        self.model.zero_grad()

        with Tape() as tape:
            total, breakdown = compute_losses(
                self.model, batch, self.weights, self.train_config.consensus_stop_grad
            )
            if not np.isfinite(breakdown.l_total):
                raise NonFiniteException(
                    "Non-finite training loss.",
                    {"step": self.optim_state.step + 1, "losses": breakdown.model_dump(exclude={"weights"})},
                )
            tape.backward(total)

        adamw_step(params, self.optim_state)
        return breakdown

    def train(
        self,
        corpus: Sequence[Utterance],
        seed: int,
        epochs: Optional[int] = None,
        eval_corpus: Optional[Sequence[Utterance]] = None,
    ) -> List[EpochRecord]:
        """
        Shuffled mini-batch epochs over `corpus`. The feature normalizer is fitted
        on the clean training features before the first step. Clean frame
        accuracy is measured on `eval_corpus` (the training corpus if omitted).
        """
        epochs = self.train_config.epochs if epochs is None else epochs
        if epochs == 0:
            return []
        if not corpus:
            raise ValidationException("Cannot train on an empty corpus.")

        self.model.fit_normalizer([self.features(u) for u in corpus])
        noise_rng = make_rng(seed, "noise")
        routing_rng = make_rng(seed, "routing")
        order_rng = make_rng(seed, "order")
        batch_size = self.train_config.batch_size

        history = []
        for epoch in range(1, epochs + 1):
            order = order_rng.permutation(len(corpus))
            steps: List[LossBreakdown] = []
            for start in range(0, len(order), batch_size):
                batch = [corpus[int(i)] for i in order[start : start + batch_size]]
                try:
                    steps.append(self.train_step(batch, noise_rng, routing_rng))
                except NonFiniteException as exc:
                    exc.diagnostics.update({"epoch": epoch, "batch_start": start})
                    logger.error(f"Training diverged: {exc.message} {exc.diagnostics}")
                    raise

            record = EpochRecord(
                epoch=epoch,
                steps=len(steps),
                l_task=float(np.mean([b.l_task for b in steps])),
                l_consensus=float(np.mean([b.l_consensus for b in steps])),
                l_commitment=float(np.mean([b.l_commitment for b in steps])),
                l_codebook=float(np.mean([b.l_codebook for b in steps])),
                l_total=float(np.mean([b.l_total for b in steps])),
                clean_frame_accuracy=self.clean_frame_accuracy(eval_corpus or corpus),
            )
            logger.info(
                f"epoch {epoch}: total={record.l_total:.4f} task={record.l_task:.4f} "
                f"consensus={record.l_consensus:.4f} commitment={record.l_commitment:.4f} "
                f"codebook={record.l_codebook:.4f} clean_acc={record.clean_frame_accuracy:.4f}"
            )
            history.append(record)
        return history

    def clean_frame_accuracy(self, corpus: Sequence[Utterance]) -> float:
        correct = total = 0
        for utterance in corpus:
            predicted = self.model.predict(self.features(utterance))
            gold = np.asarray(pooled_labels(utterance.labels, self.model.pool_factor))
            correct += int(np.sum(predicted == gold))
            total += gold.size
        return correct / total if total else 0.0


def tokenize(model: TokenizerModel, waveform: Waveform, feature_config: Optional[FeatureConfig] = None) -> List[int]:
    """features -> encoder -> pool -> voted token per pooled frame, on the model's own front end by default."""
    features = extract_features(waveform, feature_config or model.feature_config)
    return [int(t) for t in model.tokens(features)]


def predict_labels(
    model: TokenizerModel, waveform: Waveform, feature_config: Optional[FeatureConfig] = None
) -> List[int]:
    return [int(c) for c in model.predict(extract_features(waveform, feature_config or model.feature_config))]
