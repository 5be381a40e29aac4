# File: src/app/services/noise_service.py
import json
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import TypeAdapter
from scipy.signal import butter, chirp, lfilter

from src.app.core.logger import create_logger
from src.app.schemas.perturbation import (
    NOISE_ALPHA,
    AppliedPerturbation,
    PerturbationKind,
    PerturbationSpec,
)
from src.app.schemas.signal import Waveform
from src.app.services.signal_service import load_wav, save_wav
from src.app.utils.exceptions import ResourceNotFoundException, ValidationException

SeedLike = Union[int, np.random.Generator]

logger = create_logger("noise", "noise_service.log")


def measure_power(w: Waveform) -> float:
    """Mean squared sample value."""
    if len(w) == 0:
        raise ValidationException("Cannot measure the power of an empty waveform.")
    return float(np.mean(w.samples**2))


def fit_noise_length(
    noise: np.ndarray, n_samples: int, rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, int]:
    """
    Tile a short noise clip, or crop a long one, to exactly n_samples.

    Cropping starts at a uniformly random offset when rng is given, else at 0.
    Returns the fitted noise and the crop offset.
    """
    if noise.shape[0] == 0:
        raise ValidationException("Noise clip is empty.")
    if noise.shape[0] < n_samples:
        reps = -(-n_samples // noise.shape[0])
        return np.tile(noise, reps)[:n_samples], 0
    offset = 0
    if rng is not None and noise.shape[0] > n_samples:
        offset = int(rng.integers(0, noise.shape[0] - n_samples + 1))
    return noise[offset : offset + n_samples], offset


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """
    Return clean + g * noise with g chosen so the mix has exactly snr_db.

    g = sqrt(P_clean / (P_noise * 10^(snr_db / 10))), powers measured over the
    clean length after tiling/cropping the noise.
    """
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise ValidationException(
            f"Sample rate mismatch: clean {clean.sample_rate_hz} Hz vs noise {noise.sample_rate_hz} Hz"
        )
    fitted, _ = fit_noise_length(noise.samples, len(clean))
    p_clean = measure_power(clean)
    p_noise = float(np.mean(fitted**2))
    if p_clean <= 0.0:
        raise ValidationException("Clean signal has zero power; SNR is undefined.")
    if p_noise <= 0.0:
        raise ValidationException("Noise has zero power; SNR is undefined.")

    if np.isposinf(snr_db):
        return clean
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(samples=clean.samples + gain * fitted, sample_rate_hz=clean.sample_rate_hz)


def gen_colored_noise(
    n_samples: int, alpha: float, seed: SeedLike, sample_rate_hz: int = 16000
) -> Waveform:
    """
    Spectral synthesis of 1/f^alpha noise normalized to unit power.

    A white complex Gaussian spectrum is scaled by f^(-alpha/2) with the DC bin
    zeroed, then inverse transformed. alpha: 0 white, 1 pink, 2 brown.
    """
    if n_samples < 2:
        raise ValidationException("Colored noise needs at least 2 samples.")
    if alpha not in (0, 1, 2):
        raise ValidationException(f"Unsupported noise exponent alpha={alpha}; use 0, 1 or 2.")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate_hz)
    spectrum = rng.standard_normal(freqs.shape[0]) + 1j * rng.standard_normal(freqs.shape[0])

    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-alpha / 2.0)
    y = np.fft.irfft(spectrum * scale, n=n_samples)
    y /= np.sqrt(np.mean(y**2))
    return Waveform(samples=y, sample_rate_hz=sample_rate_hz)


def bit_crush(w: Waveform, depth: int) -> Waveform:
    """Re-quantize to `depth` bits: clamp(round(x*q), -q, q-1)/q with q = 2^(depth-1)."""
    if int(depth) != depth or not 1 <= depth <= 16:
        raise ValidationException(f"Bit depth must be an integer in [1, 16], got {depth}")
    q = float(2 ** (int(depth) - 1))
    y = np.clip(np.round(w.samples * q), -q, q - 1.0) / q
    return Waveform(samples=y, sample_rate_hz=w.sample_rate_hz)


class NoisePool:
    """WAV noise clips keyed by their path relative to the pool directory."""

    def __init__(self, root: Path, clips: Dict[str, Waveform]):
        self.root = root
        self.clips = clips
        self.clip_ids = sorted(clips)

    @classmethod
    def from_directory(cls, path: Union[str, Path]) -> "NoisePool":
        return _load_pool(str(Path(path).resolve()))

    def __len__(self) -> int:
        return len(self.clip_ids)


@lru_cache(maxsize=16)
def _load_pool(root: str) -> NoisePool:
    root_path = Path(root)
    if not root_path.is_dir():
        raise ResourceNotFoundException(f"Noise pool directory not found: {root_path}")

    clips, silent = {}, []
    for p in sorted(root_path.rglob("*.wav")):
        clip_id = p.relative_to(root_path).as_posix()
        clip = load_wav(p)
        # zero-power clips leave the SNR undefined
        if len(clip) == 0 or measure_power(clip) == 0.0:
            silent.append(clip_id)
            continue
        clips[clip_id] = clip
    if silent:
        logger.warning(f"Skipping {len(silent)} silent clips in {root_path}: {silent}")
    if not clips:
        raise ResourceNotFoundException(f"Noise pool directory has no usable WAV clips: {root_path}")

    logger.info(f"Loaded noise pool {root_path} with {len(clips)} clips")
    return NoisePool(root_path, clips)


def sample_intensity(spec: PerturbationSpec, rng: np.random.Generator) -> Optional[float]:
    if spec.kind == PerturbationKind.none:
        return None
    if spec.intensity is not None:
        return float(spec.intensity)
    low, high = spec.range
    if spec.kind == PerturbationKind.bit_crush:
        return float(rng.integers(int(low), int(high) + 1))
    return float(rng.uniform(low, high))


def perturb(
    w: Waveform, spec_set: Sequence[PerturbationSpec], rng: np.random.Generator
) -> Tuple[Waveform, AppliedPerturbation]:
    """
    Pick one spec uniformly, draw its intensity uniformly
    from its range, and apply it. Output length and sample rate equal the input's.
    """
    if not spec_set:
        raise ValidationException("perturb needs at least one PerturbationSpec.")

    index = int(rng.integers(0, len(spec_set)))
    spec = spec_set[index]
    intensity = sample_intensity(spec, rng)

    if spec.kind == PerturbationKind.none:
        return w, AppliedPerturbation(kind=spec.kind, spec_index=index, label=spec.label)

    if spec.kind == PerturbationKind.bit_crush:
        out = bit_crush(w, int(intensity))
        return out, AppliedPerturbation(
            kind=spec.kind, spec_index=index, realized_intensity=intensity, label=spec.label
        )

    if spec.kind == PerturbationKind.real_noise:
        pool = NoisePool.from_directory(spec.noise_pool)
        clip_id = pool.clip_ids[int(rng.integers(0, len(pool)))]
        clip = pool.clips[clip_id]
        fitted, offset = fit_noise_length(clip.samples, len(w), rng)
        noise = Waveform(samples=fitted, sample_rate_hz=clip.sample_rate_hz)
        out = mix_at_snr(w, noise, intensity)
        return out, AppliedPerturbation(
            kind=spec.kind,
            spec_index=index,
            realized_intensity=intensity,
            noise_clip_id=clip_id,
            clip_offset=offset,
            label=spec.label,
        )

    noise_seed = int(rng.integers(0, 2**63 - 1))
    noise = gen_colored_noise(len(w), NOISE_ALPHA[spec.kind], noise_seed, w.sample_rate_hz)
    out = mix_at_snr(w, noise, intensity)
    return out, AppliedPerturbation(
        kind=spec.kind,
        spec_index=index,
        realized_intensity=intensity,
        noise_seed=noise_seed,
        label=spec.label,
    )


def measured_snr_db(clean: Waveform, mixed: Waveform) -> float:
    """SNR of `mixed` treating (mixed - clean) as the noise."""
    residual = mixed.samples - clean.samples
    return float(10.0 * np.log10(np.mean(clean.samples**2) / np.mean(residual**2)))


def load_perturbation_specs(path: Union[str, Path]) -> List[PerturbationSpec]:
    """Read a JSON list of {kind, intensity|range[, noise_pool, name]} objects."""
    path = Path(path)
    if not path.is_file():
        raise ResourceNotFoundException(f"Perturbation spec file not found: {path}")

    raw = json.loads(path.read_text(encoding="utf-8"))
    for entry in raw:
        if entry.get("noise_pool") and not Path(entry["noise_pool"]).is_absolute():
            entry["noise_pool"] = str(path.parent / entry["noise_pool"])
    return TypeAdapter(List[PerturbationSpec]).validate_python(raw)


def _hum(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    base = rng.choice([50.0, 60.0])
    return sum(np.sin(2 * np.pi * base * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 6))


def _beeps(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(n)
    t = np.arange(n) / sr
    for _ in range(int(rng.integers(2, 6))):
        start = int(rng.integers(0, n))
        length = int(rng.integers(sr // 20, sr // 5))
        seg = slice(start, min(n, start + length))
        out[seg] += np.sin(2 * np.pi * rng.uniform(500.0, 3000.0) * t[seg])
    return out


def _band_noise(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    low = rng.uniform(100.0, 1500.0)
    high = min(low * rng.uniform(1.5, 4.0), 0.45 * sr)
    b, a = butter(4, [low / (sr / 2), high / (sr / 2)], btype="band")
    return lfilter(b, a, rng.standard_normal(n))


def _clicks(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(n)
    hits = rng.integers(0, n, size=int(rng.integers(20, 80)))
    out[hits] = rng.uniform(-1.0, 1.0, size=hits.shape[0])
    decay = np.exp(-np.arange(sr // 100) / (sr / 2000))
    return np.convolve(out, decay)[:n]


def _sweep(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    return chirp(t, f0=rng.uniform(200.0, 800.0), t1=t[-1], f1=rng.uniform(2000.0, 6000.0))


def _crackle(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    b, a = butter(2, 2000.0 / (sr / 2), btype="high")
    bed = lfilter(b, a, rng.standard_normal(n)) * 0.3
    return bed + _clicks(n, sr, rng)


# In-domain families go to train/, held-out families to ood/
TRAIN_FAMILIES = {"hum": _hum, "beeps": _beeps, "band": _band_noise}
OOD_FAMILIES = {"clicks": _clicks, "sweep": _sweep, "crackle": _crackle}


def synth_noise_pool(
    out_dir: Union[str, Path],
    clips_per_family: int,
    seed: int,
    sample_rate_hz: int = 16000,
    duration_s: float = 2.0,
) -> Dict[str, Path]:
    """
    Write synthetic environmental noise clips as a desk stand-in for a real
    noise collection. Returns {"train": dir, "ood": dir}.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    n = int(duration_s * sample_rate_hz)
    dirs = {}
    for split, families in (("train", TRAIN_FAMILIES), ("ood", OOD_FAMILIES)):
        split_dir = out_dir / split
        for family, render in families.items():
            for i in range(clips_per_family):
                x = np.asarray(render(n, sample_rate_hz, rng), dtype=np.float64)
                peak = np.max(np.abs(x))
                x = 0.5 * x / peak if peak > 0 else x
                save_wav(Waveform(samples=x, sample_rate_hz=sample_rate_hz), split_dir / family / f"{family}_{i:03d}.wav")
        dirs[split] = split_dir
    logger.info(f"Synthesized noise pool at {out_dir} ({clips_per_family} clips per family)")
    return dirs
