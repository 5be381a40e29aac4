# File: src/app/services/signal_service.py
from functools import lru_cache
from pathlib import Path
from typing import List, Sequence, Union

import librosa
import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from src.app.core.logger import create_logger
from src.app.schemas.signal import CorpusSpec, FeatureConfig, Utterance, Waveform
from src.app.utils.exceptions import (
    ResourceNotFoundException,
    UnsupportedFormatException,
    ValidationException,
)
from src.app.utils.helpers import read_jsonl, write_jsonl

PCM_SCALE = 32768.0
LOG_FLOOR = 1e-8
BASE_F0_HZ = 110.0

logger = create_logger("signal", "signal_service.log")


def load_wav(path: Union[str, Path]) -> Waveform:
    """
    Read a RIFF/WAVE 16-bit PCM mono file into a Waveform scaled to [-1, 1).

    Stereo or non-PCM16 files are rejected rather than silently downmixed.
    """
    path = Path(path)
    if not path.is_file():
        raise ResourceNotFoundException(f"WAV file not found: {path}")

    try:
        sample_rate, data = wavfile.read(str(path))
    except ValueError as e:
        raise UnsupportedFormatException(f"Not a readable RIFF/WAVE file: {path} ({e})")

    if data.dtype != np.int16:
        raise UnsupportedFormatException(
            f"Only 16-bit PCM is supported, got {data.dtype} in {path}"
        )
    if data.ndim != 1:
        raise UnsupportedFormatException(
            f"Only mono audio is supported, got {data.shape[1]} channels in {path}"
        )

    return Waveform(samples=data.astype(np.float64) / PCM_SCALE, sample_rate_hz=int(sample_rate))


def save_wav(w: Waveform, path: Union[str, Path]) -> Path:
    """Write 16-bit PCM mono; samples outside [-1, 1] are clamped first."""
    path = Path(path)
    clamped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.clip(np.round(clamped * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1).astype(np.int16)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(str(path), w.sample_rate_hz, pcm)
    except OSError as e:
        logger.error(e)
        raise ResourceNotFoundException(f"Cannot write WAV file: {path} ({e})")
    return path


def symbol_f0_hz(symbol: int, alphabet_size: int) -> float:
    # Two octaves above 110 Hz spread across the alphabet
    return BASE_F0_HZ * 2.0 ** (symbol / alphabet_size * 2.0)


def _render_tone(
    n_samples: int,
    start_sample: int,
    f0: float,
    spec: CorpusSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    nyquist = spec.sample_rate_hz / 2.0
    top = min(spec.max_harmonic_hz, 0.95 * nyquist)
    n_harmonics = max(1, int(top // f0))

    t = (start_sample + np.arange(n_samples)) / spec.sample_rate_hz
    k = np.arange(1, n_harmonics + 1)
    weights = 1.0 / k
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_harmonics)
    tone = np.sin(2.0 * np.pi * f0 * np.outer(t, k) + phases) @ weights
    tone /= weights.sum()

    jitter = rng.uniform(1.0 - spec.amplitude_jitter, 1.0 + spec.amplitude_jitter)
    return spec.amplitude * jitter * tone


def synth_corpus(spec: CorpusSpec, cfg: FeatureConfig = FeatureConfig()) -> List[Utterance]:
    """
    Generate a labelled corpus of harmonic-tone "phoneme" sequences.

    Each symbol spans `segment_frames` feature frames; the waveform is sized so
    that extract_features yields exactly one frame per label.
    """
    rng = np.random.default_rng(spec.seed)
    n_frames = spec.symbols_per_utterance * spec.segment_frames
    n_samples = (n_frames - 1) * cfg.hop_samples + cfg.frame_len_samples
    segment_len = spec.segment_frames * cfg.hop_samples
    width = len(str(spec.n_utterances - 1))

    utterances = []
    for u in range(spec.n_utterances):
        if spec.forced_symbols is not None:
            symbols = list(spec.forced_symbols)
        else:
            symbols = [int(s) for s in rng.integers(0, spec.alphabet_size, size=spec.symbols_per_utterance)]

        samples = np.zeros(n_samples)
        for i, symbol in enumerate(symbols):
            start = i * segment_len
            end = n_samples if i == len(symbols) - 1 else start + segment_len
            samples[start:end] = _render_tone(
                end - start, start, symbol_f0_hz(symbol, spec.alphabet_size), spec, rng
            )

        labels = [s for s in symbols for _ in range(spec.segment_frames)]
        utterances.append(
            Utterance(
                waveform=Waveform(samples=samples, sample_rate_hz=spec.sample_rate_hz),
                labels=labels,
                utterance_id=f"utt-{u:0{width}d}",
            )
        )

    logger.info(
        f"Synthesized {spec.n_utterances} utterances, V={spec.alphabet_size}, "
        f"{n_frames} frames each, seed={spec.seed}"
    )
    return utterances


@lru_cache(maxsize=32)
def _filterbank(
    sample_rate: int, n_fft: int, n_bands: int, f_min: float, f_max: float
) -> np.ndarray:
    fb = librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=n_bands, fmin=f_min, fmax=f_max, htk=False, norm=None
    ).astype(np.float64)
    fb.setflags(write=False)
    return fb


def _f_max(cfg: FeatureConfig, sample_rate: int) -> float:
    nyquist = sample_rate / 2.0
    return nyquist if cfg.f_max_hz is None else min(cfg.f_max_hz, nyquist)


def band_centers_hz(cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    edges = librosa.mel_frequencies(
        n_mels=cfg.n_bands + 2, fmin=cfg.f_min_hz, fmax=_f_max(cfg, sample_rate), htk=False
    )
    return edges[1:-1]


def extract_features(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """
    Log-magnitude triangular filterbank features, shape (frames, n_bands).

    frames = 1 + (len - frame_len) // hop
    """
    if len(w) < cfg.frame_len_samples:
        raise ValidationException(
            f"Waveform too short: {len(w)} samples < frame length {cfg.frame_len_samples}"
        )

    frames = np.lib.stride_tricks.sliding_window_view(w.samples, cfg.frame_len_samples)[
        :: cfg.hop_samples
    ]
    window = get_window(cfg.window, cfg.frame_len_samples, fftbins=True)
    magnitude = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1))

    fb = _filterbank(
        w.sample_rate_hz, cfg.n_fft, cfg.n_bands, cfg.f_min_hz, _f_max(cfg, w.sample_rate_hz)
    )
    return np.log(magnitude @ fb.T + LOG_FLOOR)


def write_corpus(utterances: Sequence[Utterance], out_dir: Union[str, Path]) -> Path:
    """Write one WAV per utterance plus a JSONL manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    records = []
    for utt in utterances:
        wav_path = save_wav(utt.waveform, wav_dir / f"{utt.utterance_id}.wav")
        records.append(
            {
                "id": utt.utterance_id,
                "wav_path": wav_path.relative_to(out_dir).as_posix(),
                "labels": list(utt.labels),
            }
        )
    return write_jsonl(out_dir / "manifest.jsonl", records)


def read_manifest(path: Union[str, Path]) -> List[Utterance]:
    path = Path(path)
    if not path.is_file():
        raise ResourceNotFoundException(f"Corpus manifest not found: {path}")

    utterances = []
    for record in read_jsonl(path):
        utterances.append(
            Utterance(
                waveform=load_wav(path.parent / record["wav_path"]),
                labels=record["labels"],
                utterance_id=record["id"],
            )
        )
    return utterances
