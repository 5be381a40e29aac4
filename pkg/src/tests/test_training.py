# File: src/tests/test_training.py
import json
import math
from collections import Counter

import numpy as np
import pytest

from src.app.core.seeding import make_rng
from src.app.models.tensor import Tape, Tensor, grad_check
from src.app.models import tensor as T
from src.app.models.tokenizer import TokenizerModel
from src.app.models.voting_lfq import BranchBank, project
from src.app.schemas.perturbation import PerturbationSpec
from src.app.schemas.quantizer import QuantizerConfig
from src.app.schemas.signal import CorpusSpec, FeatureConfig, Waveform
from src.app.schemas.training import (
    LossWeights,
    ModelConfig,
    NoiseAwareConfig,
    OptimConfig,
    TrainConfig,
)
from src.app.services.loss_service import consensus_loss
from src.app.services.signal_service import extract_features, synth_corpus
from src.app.services.training_service import (
    PreparedBatch,
    TrainingService,
    compute_losses,
    pooled_labels,
    predict_labels,
    route_branches,
    tokenize,
)
from src.app.utils.exceptions import (
    NonFiniteException,
    ResourceNotFoundException,
    UnsupportedFormatException,
    ValidationException,
)

ZERO_WEIGHTS = LossWeights(consensus=0.0, commitment=0.0, codebook=0.0)
IDENTITY_NOISE = NoiseAwareConfig(spec_set=[PerturbationSpec(kind="none")])


def _service(model, feature_config, noise_aware=IDENTITY_NOISE, weights=LossWeights(), **train):
    return TrainingService(
        model,
        feature_config,
        noise_aware,
        weights,
        OptimConfig(lr=1e-2, warmup_steps=0),
        TrainConfig(batch_size=2, **train),
    )


def test_route_branches_three_always_perturbs_one(rng):
    for _ in range(200):
        assert sum(route_branches(3, rng)) == 1


def test_route_branches_single_branch_stays_clean(rng):
    assert route_branches(1, rng) == [False]


def test_route_branches_rejects_even_counts(rng):
    with pytest.raises(ValidationException):
        route_branches(4, rng)


def test_route_branches_frequency_for_five(rng):
    counts = Counter()
    draws = 10_000
    for _ in range(draws):
        flags = route_branches(5, rng)
        assert 1 <= sum(flags) < 2.5
        counts.update(i for i, f in enumerate(flags) if f)
    for i in range(5):
        assert counts[i] / draws == pytest.approx(0.3, abs=0.02)


def test_pooled_labels_take_first_frame():
    assert pooled_labels([1, 1, 2, 2, 3], 2) == [1, 2, 3]


def test_model_parameter_names(model):
    names = list(model.parameters())
    assert names[:4] == ["encoder.0.weight", "encoder.0.bias", "encoder.1.weight", "encoder.1.bias"]
    assert "branch.2.weight" in names
    assert names[-2:] == ["head.weight", "head.bias"]


def test_token_count_follows_padding_rule(model, feature_config):
    features = np.random.default_rng(0).standard_normal((7, feature_config.n_bands))
    tokens = model.tokens(features)
    assert len(tokens) == model.n_tokens(7) == 4
    assert np.all((tokens >= 0) & (tokens < 2**model.code_dim))


def test_tokenize_is_deterministic(model, corpus, feature_config):
    w = corpus[0].waveform
    assert tokenize(model, w, feature_config) == tokenize(model, w, feature_config)


def test_tokenize_rejects_short_audio(model, feature_config):
    with pytest.raises(ValidationException):
        tokenize(model, Waveform(samples=np.zeros(10)), feature_config)


def test_loss_breakdown_total_is_weighted_sum(model, corpus, feature_config):
    service = _service(model, feature_config, NoiseAwareConfig())
    batch = service.prepare_batch(corpus[:2], make_rng(0, "noise"), make_rng(0, "routing"))
    _, breakdown = compute_losses(model, batch, LossWeights())
    assert breakdown.l_total == pytest.approx(breakdown.recomputed_total(), abs=1e-12)
    assert len(batch.routing) == 2
    assert all(sum(flags) == 1 for flags in batch.routing)


def test_routing_is_drawn_per_utterance(model_config, corpus, feature_config):
    quantizer = model_config.quantizer.model_copy(update={"n_branches": 5})
    model = TokenizerModel.initialize(model_config.model_copy(update={"quantizer": quantizer}), seed=0)
    service = _service(model, feature_config, NoiseAwareConfig())
    routing_rng = make_rng(0, "routing")
    mixed = 0
    for _ in range(20):
        batch = service.prepare_batch(corpus, make_rng(0, "noise"), routing_rng)
        assert len(batch.routing) == len(corpus) == len(batch.perturbed)
        for flags in batch.routing:
            assert len(flags) == 5
            assert 1 <= sum(flags) <= 2
        mixed += len({tuple(flags) for flags in batch.routing}) > 1
    assert mixed > 0


def test_clean_only_batch_has_no_routing(model, corpus, feature_config):
    batch = _service(model, feature_config, NoiseAwareConfig(enabled=False)).prepare_batch(
        corpus, make_rng(0, "noise"), make_rng(0, "routing")
    )
    assert batch.routing is None
    assert batch.perturbed is None


def test_zero_weights_and_identity_noise_reduce_to_cross_entropy(model, corpus, feature_config):
    service = _service(model, feature_config)
    batch = service.prepare_batch(corpus[:2], make_rng(0, "noise"), make_rng(0, "routing"))
    _, breakdown = compute_losses(model, batch, ZERO_WEIGHTS)

    h = T.concat([model.encode_pooled(f) for f in batch.clean], axis=0)
    codes = [T.sign_ste(T.affine(h, W, b)) for W, b in zip(model.bank.weights, model.bank.biases)]
    single_path = T.softmax_xent(model.head_logits(T.mean_over_branches(codes)), batch.labels)
    assert breakdown.l_total == pytest.approx(single_path.item(), abs=1e-12)


def test_full_loss_gradient_on_identity_surrogate():
    config = ModelConfig(
        feature_dim=6,
        encoder_hidden=[5],
        hidden_dim=8,
        pool_factor=2,
        quantizer=QuantizerConfig(n_branches=3, code_dim=4, hidden_dim=8),
        n_classes=3,
    )
    feature_config = FeatureConfig(n_bands=6)
    corpus = synth_corpus(
        CorpusSpec(n_utterances=2, alphabet_size=3, segment_frames=3, symbols_per_utterance=2, seed=4),
        feature_config,
    )
    model = TokenizerModel.initialize(config, seed=2)
    service = _service(model, feature_config, NoiseAwareConfig())
    model.fit_normalizer([service.features(u) for u in corpus])
    batch = service.prepare_batch(corpus, make_rng(1, "noise"), make_rng(1, "routing"))

    result = grad_check(
        lambda: compute_losses(model, batch, LossWeights(), surrogate=True)[0],
        model.parameters(),
        eps=1e-6,
    )
    assert result.max_rel_error < 1e-5, result.mismatches[:3]


def _hand_model(branch_weights):
    """One-dimensional model: identity encoder, scalar branches, head [[1], [-1]]."""
    config = ModelConfig(
        feature_dim=1,
        encoder_hidden=[],
        hidden_dim=1,
        pool_factor=1,
        quantizer=QuantizerConfig(n_branches=len(branch_weights), code_dim=1, hidden_dim=1),
        n_classes=2,
    )
    encoder = [(Tensor(np.eye(1), requires_grad=True), Tensor(np.zeros(1), requires_grad=True))]
    bank = BranchBank.from_arrays([[[w]] for w in branch_weights], [[0.0]] * len(branch_weights))
    head = (Tensor(np.array([[1.0], [-1.0]]), requires_grad=True), Tensor(np.zeros(2), requires_grad=True))
    return TokenizerModel(config, encoder, bank, head)


def _reference_losses(p, labels, head_weight):
    """Plain numpy losses for pre-quantization values p of shape (branches, frames, bits)."""
    frames = p.shape[1]
    codes = np.where(p >= 0, 1.0, -1.0)
    logits = codes.mean(axis=0) @ head_weight.T
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

    def entropy(q):
        return -q * np.log(q) - (1 - q) * np.log(1 - q)

    q = 1.0 / (1.0 + np.exp(-2.0 * p.reshape(-1, p.shape[2])))
    return {
        "l_task": -log_probs[np.arange(frames), labels].mean(),
        "l_consensus": ((p - p.mean(axis=0)) ** 2).sum(axis=(1, 2)).mean() / frames,
        "l_commitment": ((p - codes) ** 2).mean(),
        "l_codebook": entropy(q).mean() - entropy(q.mean(axis=0)).mean(),
    }


def test_loss_breakdown_on_a_hand_built_model():
    model = _hand_model([1.0, 2.0, -1.0])
    batch = PreparedBatch(clean=[np.array([[1.0], [-0.5]])], labels=[0, 1])
    _, breakdown = compute_losses(model, batch, LossWeights())

    # codes (+, +, -) then (-, -, +) vote s = 1/3, -1/3
    assert breakdown.l_task == pytest.approx(math.log1p(math.exp(-2.0 / 3.0)), rel=1e-12)
    assert breakdown.l_consensus == pytest.approx(35.0 / 36.0, rel=1e-12)
    assert breakdown.l_commitment == pytest.approx(0.25, rel=1e-12)

    p = np.array([[1.0, -0.5], [2.0, -1.0], [-1.0, 0.5]])[..., None]
    expected = _reference_losses(p, [0, 1], model.head[0].values)
    assert breakdown.l_codebook == pytest.approx(expected["l_codebook"], rel=1e-9)
    assert breakdown.l_total == pytest.approx(
        expected["l_task"] + 0.25 * 35.0 / 36.0 + 0.25 * 0.25 + expected["l_codebook"], rel=1e-9
    )


def test_loss_breakdown_routes_each_utterance_separately():
    model = _hand_model([1.0, 2.0, -1.0])
    batch = PreparedBatch(
        clean=[np.array([[1.0]]), np.array([[-0.5]])],
        perturbed=[np.array([[-3.0]]), np.array([[2.0]])],
        labels=[0, 1],
        routing=[[True, False, False], [False, False, True]],
    )
    _, breakdown = compute_losses(model, batch, LossWeights())

    # branch 0 reads the first utterance's perturbed frame, branch 2 the second's
    p = np.array([[-3.0, -0.5], [2.0, -1.0], [-1.0, -2.0]])[..., None]
    expected = _reference_losses(p, [0, 1], model.head[0].values)
    for term, value in expected.items():
        assert getattr(breakdown, term) == pytest.approx(value, rel=1e-9), term


def test_loss_breakdown_survives_a_checkpoint(tmp_path, model, corpus, feature_config):
    service = _service(model, feature_config, NoiseAwareConfig())
    service.train(corpus, seed=2, epochs=1)
    batch = service.prepare_batch(corpus, make_rng(3, "noise"), make_rng(3, "routing"))
    loaded = TokenizerModel.load(model.save(tmp_path / "model.json"))
    assert compute_losses(loaded, batch, LossWeights())[1] == compute_losses(model, batch, LossWeights())[1]


def test_loss_gradients_match_finite_differences_on_random_models():
    rng = np.random.default_rng(2024)
    for case in range(100):
        n = int(rng.choice([1, 3, 5]))
        hidden = int(rng.integers(2, 4))
        config = ModelConfig(
            feature_dim=int(rng.integers(1, 4)),
            encoder_hidden=[int(rng.integers(2, 4))],
            hidden_dim=hidden,
            pool_factor=int(rng.integers(1, 3)),
            quantizer=QuantizerConfig(n_branches=n, code_dim=int(rng.integers(1, 4)), hidden_dim=hidden),
            n_classes=int(rng.integers(2, 4)),
        )
        model = TokenizerModel.initialize(config, seed=case)
        clean = [rng.standard_normal((int(rng.integers(1, 6)), config.feature_dim)) for _ in range(2)]
        perturbed = [f + 0.3 * rng.standard_normal(f.shape) for f in clean]
        labels = [int(c) for f in clean for c in rng.integers(0, config.n_classes, size=model.n_tokens(len(f)))]
        batch = PreparedBatch(
            clean=clean,
            perturbed=perturbed,
            labels=labels,
            routing=[route_branches(n, rng) for _ in clean],
        )
        weights = LossWeights(consensus=float(rng.uniform(0, 1)), commitment=float(rng.uniform(0, 1)))

        result = grad_check(
            lambda: compute_losses(model, batch, weights, surrogate=True)[0], model.parameters(), eps=1e-6
        )
        assert result.max_rel_error < 1e-5, (case, result.mismatches[:3])


def test_train_zero_epochs_leaves_model_unchanged(model, corpus, feature_config):
    before = {name: p.values.copy() for name, p in model.parameters().items()}
    history = _service(model, feature_config).train(corpus, seed=0, epochs=0)
    assert history == []
    for name, p in model.parameters().items():
        np.testing.assert_array_equal(p.values, before[name])


def test_train_is_deterministic(model_config, corpus, feature_config):
    histories = []
    for _ in range(2):
        model = TokenizerModel.initialize(model_config, seed=3)
        histories.append(_service(model, feature_config, NoiseAwareConfig()).train(corpus, seed=9, epochs=2))
    assert histories[0] == histories[1]
    assert len(histories[0]) == 2
    assert histories[0][0].steps == 2


def test_train_history_has_every_loss_term(model, corpus, feature_config):
    record = _service(model, feature_config, NoiseAwareConfig()).train(corpus, seed=1, epochs=1)[0]
    for term in ("l_task", "l_consensus", "l_commitment", "l_codebook", "l_total"):
        assert np.isfinite(getattr(record, term))
    assert 0.0 <= record.clean_frame_accuracy <= 1.0


def test_training_reduces_task_loss(model, corpus, feature_config):
    history = _service(model, feature_config).train(corpus, seed=1, epochs=30)
    assert history[-1].l_task < history[0].l_task


def test_single_branch_training_has_no_consensus_term(corpus, feature_config):
    config = ModelConfig(
        feature_dim=8,
        encoder_hidden=[8],
        hidden_dim=8,
        quantizer=QuantizerConfig(n_branches=1, code_dim=4, hidden_dim=8),
        n_classes=4,
    )
    model = TokenizerModel.initialize(config, seed=0)
    service = _service(model, feature_config, NoiseAwareConfig(enabled=False))
    record = service.train(corpus, seed=0, epochs=1)[0]
    assert record.l_consensus == 0.0


def test_divergence_is_reported_with_epoch(model, corpus, feature_config):
    model.head[0].values[0, 0] = np.nan
    service = _service(model, feature_config)
    with pytest.raises(NonFiniteException) as info:
        service.train(corpus, seed=0, epochs=1)
    assert info.value.diagnostics["epoch"] == 1


def test_label_count_must_match_frames(model, corpus, feature_config):
    broken = corpus[0].model_copy(update={"labels": corpus[0].labels[:-1]})
    with pytest.raises(ValidationException):
        _service(model, feature_config).features(broken)


def test_predict_labels_length(model, corpus, feature_config):
    labels = predict_labels(model, corpus[0].waveform, feature_config)
    assert len(labels) == len(pooled_labels(corpus[0].labels, model.pool_factor))


def test_checkpoint_round_trip_preserves_tokens(tmp_path, model, corpus, feature_config):
    model.fit_normalizer([extract_features(u.waveform, feature_config) for u in corpus])
    path = model.save(tmp_path / "model.json")
    loaded = TokenizerModel.load(path)
    w = corpus[1].waveform
    assert tokenize(loaded, w, feature_config) == tokenize(model, w, feature_config)
    np.testing.assert_array_equal(loaded.feature_std, model.feature_std)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ResourceNotFoundException):
        TokenizerModel.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"format_version": 99}')
    with pytest.raises(UnsupportedFormatException):
        TokenizerModel.load(bad)



def test_checkpoint_keeps_its_front_end(tmp_path, model_config, corpus_spec):
    features = FeatureConfig(n_bands=8, hop_samples=200, f_max_hz=3000.0)
    model = TokenizerModel.initialize(model_config, seed=5, feature_config=features)
    loaded = TokenizerModel.load(model.save(tmp_path / "model.json"))
    assert loaded.feature_config == features

    w = synth_corpus(corpus_spec, features)[0].waveform
    assert tokenize(loaded, w) == tokenize(model, w, features)
    assert len(tokenize(loaded, w)) != len(tokenize(loaded, w, FeatureConfig(n_bands=8)))


def test_checkpoint_without_front_end_is_rejected(tmp_path, model):
    path = model.save(tmp_path / "model.json")
    payload = json.loads(path.read_text())
    del payload["features"]
    path.write_text(json.dumps(payload))
    with pytest.raises(UnsupportedFormatException):
        TokenizerModel.load(path)


def test_front_end_band_count_must_match_model(model, model_config):
    with pytest.raises(ValidationException):
        TokenizerModel.initialize(model_config, seed=0, feature_config=FeatureConfig(n_bands=6))
    with pytest.raises(ValidationException):
        _service(model, FeatureConfig(n_bands=6))


def test_training_records_its_front_end(model):
    features = FeatureConfig(n_bands=8, f_max_hz=3500.0)
    _service(model, features)
    assert model.feature_config == features


def test_tied_checkpoint_round_trip(tmp_path, model, corpus):
    W, b = model.bank.weights[0], model.bank.biases[0]
    tied = TokenizerModel(
        model.config, model.encoder, BranchBank.tied(W, b, 3), model.head, feature_config=model.feature_config
    )
    assert tied.bank.is_tied
    assert not model.bank.is_tied

    path = tied.save(tmp_path / "tied.json")
    assert "branch.1.weight" not in json.loads(path.read_text())["arrays"]
    loaded = TokenizerModel.load(path)
    assert loaded.bank.is_tied
    assert loaded.bank.n_branches == 3
    for utterance in corpus:
        assert tokenize(loaded, utterance.waveform) == tokenize(tied, utterance.waveform)


def test_consensus_anchor_on_frozen_model(model, corpus, feature_config):
    service = _service(model, feature_config, NoiseAwareConfig())
    batch = service.prepare_batch(corpus[:2], make_rng(5, "noise"), make_rng(5, "routing"))
    parts = [
        project(model.encode_pooled(clean), model.bank, model.encode_pooled(noisy), flags)
        for clean, noisy, flags in zip(batch.clean, batch.perturbed, batch.routing)
    ]
    pre_quant = [Tensor(np.concatenate([p.values for p in branch]), requires_grad=True) for branch in zip(*parts)]
    with Tape() as tape:
        tape.backward(consensus_loss(pre_quant))
    mean = np.mean([p.values for p in pre_quant], axis=0)
    for p in pre_quant:
        assert np.all(np.sum(p.grad * (p.values - mean), axis=1) >= 0)


def test_tied_branches_without_noise_match_single_branch(model_config, corpus, feature_config):
    model = TokenizerModel.initialize(model_config, seed=4)
    W, b = model.bank.weights[0], model.bank.biases[0]
    tied = TokenizerModel(model.config, model.encoder, BranchBank.tied(W, b, 3), model.head)
    single_config = model_config.model_copy(
        update={"quantizer": model_config.quantizer.model_copy(update={"n_branches": 1})}
    )
    single = TokenizerModel(single_config, model.encoder, BranchBank.tied(W, b, 1), model.head)
    for utterance in corpus:
        assert tokenize(tied, utterance.waveform, feature_config) == tokenize(single, utterance.waveform, feature_config)
