# File: src/app/schemas/signal.py
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Waveform(BaseModel):
    """Mono sample sequence with its sample rate."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray
    sample_rate_hz: int = 16000

    @field_validator("samples", mode="before")
    @classmethod
    def samples_must_be_finite(cls, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("Waveform samples must be a 1-D (mono) sequence.")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Waveform samples must all be finite.")
        return arr

    @field_validator("sample_rate_hz")
    @classmethod
    def sample_rate_must_be_positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("Sample rate must be positive.")
        return v

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


class Utterance(BaseModel):
    model_config = ConfigDict(frozen=True)

    waveform: Waveform
    labels: List[int]
    utterance_id: str


class FeatureConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    frame_len_samples: int = 400
    hop_samples: int = 160
    n_bands: int = 40
    n_fft: int = 512
    window: Literal["hann", "hamming"] = "hann"
    f_min_hz: float = 0.0
    f_max_hz: Optional[float] = 4000.0

    @model_validator(mode="after")
    def check_framing(self) -> "FeatureConfig":
        problems = []
        if self.frame_len_samples < 1:
            problems.append("frame_len_samples must be positive")
        if self.hop_samples < 1 or self.hop_samples > self.frame_len_samples:
            problems.append("hop_samples must be in [1, frame_len_samples]")
        if self.n_bands < 1:
            problems.append("n_bands must be at least 1")
        if self.n_fft < self.frame_len_samples:
            problems.append("n_fft must be at least frame_len_samples")
        if self.f_max_hz is not None and self.f_max_hz <= self.f_min_hz:
            problems.append("f_max_hz must exceed f_min_hz")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def frame_count(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_len_samples) // self.hop_samples


class CorpusSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_utterances: int = Field(gt=0)
    alphabet_size: int = Field(ge=2)
    segment_frames: int = Field(gt=0)
    symbols_per_utterance: int = Field(gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    sample_rate_hz: int = Field(default=16000, gt=0)
    amplitude: float = Field(default=0.5, gt=0.0, le=1.0)
    amplitude_jitter: float = Field(default=0.1, ge=0.0, lt=1.0)
    max_harmonic_hz: float = Field(default=4000.0, gt=0.0)
    forced_symbols: Optional[List[int]] = None

    @model_validator(mode="after")
    def check_forced_symbols(self) -> "CorpusSpec":
        if self.forced_symbols is None:
            return self
        if len(self.forced_symbols) != self.symbols_per_utterance:
            raise ValueError("forced_symbols must have symbols_per_utterance entries")
        if any(s < 0 or s >= self.alphabet_size for s in self.forced_symbols):
            raise ValueError("forced_symbols must lie in [0, alphabet_size - 1]")
        return self
