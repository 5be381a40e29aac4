# File: src/app/services/metrics_service.py
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import welch

from src.app.core.logger import create_logger
from src.app.core.seeding import make_rng
from src.app.models.tokenizer import TokenizerModel
from src.app.schemas.metrics import ITEM_FIELDS, ItemRecord, PerturbationSummary, RobustnessReport
from src.app.schemas.perturbation import PerturbationSpec
from src.app.schemas.signal import FeatureConfig, Utterance, Waveform
from src.app.services.noise_service import perturb
from src.app.services.signal_service import extract_features
from src.app.services.training_service import pooled_labels
from src.app.utils.exceptions import ValidationException
from src.app.utils.helpers import write_csv, write_json

PSD_SEGMENT = 1024
PSD_MIN_SAMPLES = 2**12
PSD_FIT_LOW_HZ = 20.0
PSD_FIT_HIGH_FRACTION = 0.4

logger = create_logger("metrics", "metrics_service.log")


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Minimum number of insertions, deletions and substitutions turning a into b."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        current = [i]
        for j, y in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,
                    current[j - 1] + 1,
                    previous[j - 1] + (x != y),
                )
            )
        previous = current
    return previous[-1]


def ued_percent(clean_tokens: Sequence[int], noisy_tokens: Sequence[int]) -> float:
    """Edit distance as a percentage of the clean sequence length."""
    if len(clean_tokens) == 0:
        raise ValidationException("UED is undefined for an empty clean token sequence.")
    return 100.0 * levenshtein(list(clean_tokens), list(noisy_tokens)) / len(clean_tokens)


def frame_error_rate(predicted: Sequence[int], gold: Sequence[int]) -> float:
    predicted, gold = np.asarray(predicted), np.asarray(gold)
    if predicted.shape != gold.shape:
        raise ValidationException(f"frame_error_rate needs equal lengths, got {predicted.shape} vs {gold.shape}")
    if gold.size == 0:
        raise ValidationException("frame_error_rate needs at least one frame.")
    return 100.0 * float(np.mean(predicted != gold))


def psd_slope(w: Waveform) -> float:
    """
    Exponent of the power spectral density, PSD ~ f^slope.

    Welch periodogram (Hann, 1024-sample segments, 50% overlap), then a least
    squares line through log10 PSD vs log10 f over [20 Hz, 0.4 * Nyquist].
    """
    if len(w) < PSD_MIN_SAMPLES:
        raise ValidationException(f"psd_slope needs at least {PSD_MIN_SAMPLES} samples, got {len(w)}")
    freqs, psd = welch(
        w.samples,
        fs=w.sample_rate_hz,
        window="hann",
        nperseg=PSD_SEGMENT,
        noverlap=PSD_SEGMENT // 2,
    )
    band = (freqs >= PSD_FIT_LOW_HZ) & (freqs <= PSD_FIT_HIGH_FRACTION * w.sample_rate_hz / 2.0) & (psd > 0)
    slope, _ = np.polyfit(np.log10(freqs[band]), np.log10(psd[band]), 1)
    return float(slope)


def _evaluate_utterance(
    model: TokenizerModel,
    utterance: Utterance,
    suite: Sequence[PerturbationSpec],
    feature_config: FeatureConfig,
    seed: int,
) -> Tuple[List[ItemRecord], int, int]:
    features = extract_features(utterance.waveform, feature_config)
    clean_tokens = model.tokens(features)

    gold = np.asarray(pooled_labels(utterance.labels, model.pool_factor))
    frame_errors = int(np.sum(model.predict(features) != gold))

    items = []
    for spec in suite:
        rng = make_rng(seed, f"eval/{spec.label}/{utterance.utterance_id}")
        noisy, applied = perturb(utterance.waveform, [spec], rng)
        noisy_tokens = model.tokens(extract_features(noisy, feature_config))
        items.append(
            ItemRecord(
                utterance_id=utterance.utterance_id,
                perturbation=spec.label,
                realized_intensity=applied.realized_intensity,
                noise_clip_id=applied.noise_clip_id,
                ued=ued_percent(clean_tokens.tolist(), noisy_tokens.tolist()),
            )
        )
    return items, frame_errors, int(gold.size)


def summarize(items: Sequence[ItemRecord], suite_labels: Sequence[str]) -> List[PerturbationSummary]:
    summaries = []
    for label in suite_labels:
        values = np.asarray([item.ued for item in items if item.perturbation == label])
        summaries.append(
            PerturbationSummary(
                perturbation=label,
                mean_ued=float(values.mean()) if values.size else 0.0,
                std_ued=float(values.std()) if values.size else 0.0,
                count=int(values.size),
            )
        )
    return summaries


def eval_robustness(
    model: TokenizerModel,
    corpus: Sequence[Utterance],
    suite: Sequence[PerturbationSpec],
    feature_config: FeatureConfig,
    seed: int,
    workers: int = 1,
) -> RobustnessReport:
    """
    Tokenize every utterance clean and under each suite perturbation, and
    score the pair with UED.

    Each (perturbation, utterance) draws from its own derived stream, so the
    report does not depend on the worker count.
    """
    if not corpus:
        raise ValidationException("eval_robustness needs a non-empty corpus.")
    if not suite:
        raise ValidationException("eval_robustness needs at least one perturbation.")
    labels = [spec.label for spec in suite]
    if len(set(labels)) != len(labels):
        raise ValidationException(f"Perturbation labels must be unique in an eval suite: {labels}")

    def run(utterance: Utterance):
        return _evaluate_utterance(model, utterance, suite, feature_config, seed)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(executor.map(run, corpus))

    items = [item for utterance_items, _, _ in results for item in utterance_items]
    frame_errors = sum(errors for _, errors, _ in results)
    frames = sum(count for _, _, count in results)

    per_perturbation = summarize(items, labels)
    report = RobustnessReport(
        per_perturbation=per_perturbation,
        average_ued=float(np.mean([s.mean_ued for s in per_perturbation])),
        clean_frame_error_rate=100.0 * frame_errors / frames,
        n_utterances=len(corpus),
        items=items,
    )
    for summary in per_perturbation:
        logger.info(
            f"{summary.perturbation}: UED {summary.mean_ued:.2f} +- {summary.std_ued:.2f} (n={summary.count})"
        )
    logger.info(f"average UED {report.average_ued:.2f}, clean frame error {report.clean_frame_error_rate:.2f}")
    return report


def ued_table_row(report: RobustnessReport) -> Dict[str, float]:
    """One row of per-perturbation mean UED plus the unweighted average."""
    row = {s.perturbation: s.mean_ued for s in report.per_perturbation}
    row["avg"] = report.average_ued
    return row


def write_report(report: RobustnessReport, out_dir: Union[str, Path], prefix: Optional[str] = None) -> Dict[str, Path]:
    """report.json (summary) and items.csv (one row per utterance and perturbation)."""
    out_dir = Path(out_dir)
    stem = f"{prefix}_" if prefix else ""
    return {
        "report": write_json(out_dir / f"{stem}report.json", report.summary_dict()),
        "items": write_csv(
            out_dir / f"{stem}items.csv",
            [item.model_dump() for item in report.items],
            ITEM_FIELDS,
        ),
    }
