# File: src/app/schemas/perturbation.py
import enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, model_validator


class PerturbationKind(str, enum.Enum):
    gaussian = "gaussian"
    pink = "pink"
    brown = "brown"
    bit_crush = "bit_crush"
    real_noise = "real_noise"
    none = "none"


NOISE_KINDS = (
    PerturbationKind.gaussian,
    PerturbationKind.pink,
    PerturbationKind.brown,
    PerturbationKind.real_noise,
)

# Spectral exponent of the generated noise colours (PSD ~ f^-alpha)
NOISE_ALPHA: Dict[PerturbationKind, float] = {
    PerturbationKind.gaussian: 0.0,
    PerturbationKind.pink: 1.0,
    PerturbationKind.brown: 2.0,
}


class PerturbationSpec(BaseModel):
    """
    One perturbation family with a fixed intensity or an inclusive range.

    Intensity is an SNR in dB for noise kinds and a bit depth for bit_crush.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: PerturbationKind
    intensity: Optional[float] = None
    range: Optional[Tuple[float, float]] = None
    noise_pool: Optional[Path] = None
    name: Optional[str] = None

    @model_validator(mode="after")
    def check_intensity(self) -> "PerturbationSpec":
        problems = []
        if self.kind == PerturbationKind.none:
            if self.intensity is not None or self.range is not None:
                problems.append("kind 'none' takes no intensity")
        elif (self.intensity is None) == (self.range is None):
            problems.append("exactly one of intensity or range is required")

        if self.range is not None and self.range[0] > self.range[1]:
            problems.append("range low must not exceed range high")

        if self.kind == PerturbationKind.bit_crush:
            for value in self.bounds():
                if value != int(value) or not 1 <= value <= 16:
                    problems.append("bit depth must be an integer in [1, 16]")
                    break

        if self.kind == PerturbationKind.real_noise and self.noise_pool is None:
            problems.append("real_noise requires a noise_pool directory")
        if self.kind != PerturbationKind.real_noise and self.noise_pool is not None:
            problems.append("noise_pool is only valid for real_noise")

        if problems:
            raise ValueError("; ".join(problems))
        return self

    def bounds(self) -> Tuple[float, ...]:
        if self.range is not None:
            return tuple(self.range)
        if self.intensity is not None:
            return (self.intensity, self.intensity)
        return ()

    @property
    def label(self) -> str:
        return self.name or self.kind.value


class AppliedPerturbation(BaseModel):
    """Replay record of one perturb() call."""

    model_config = ConfigDict(frozen=True)

    kind: PerturbationKind
    spec_index: int
    realized_intensity: Optional[float] = None
    noise_clip_id: Optional[str] = None
    clip_offset: Optional[int] = None
    noise_seed: Optional[int] = None
    label: str




def default_training_specs(noise_pool: Optional[Path] = None) -> List[PerturbationSpec]:
    """Training perturbation families with their intensity ranges."""
    specs = [
        PerturbationSpec(kind=PerturbationKind.gaussian, range=(16.0, 30.0)),
        PerturbationSpec(kind=PerturbationKind.pink, range=(16.0, 24.0)),
        PerturbationSpec(kind=PerturbationKind.brown, range=(12.0, 24.0)),
        PerturbationSpec(kind=PerturbationKind.bit_crush, range=(8, 14)),
    ]
    if noise_pool is not None:
        specs.append(
            PerturbationSpec(kind=PerturbationKind.real_noise, range=(12.0, 24.0), noise_pool=noise_pool)
        )
    return specs


def default_eval_suite(
    noise_pool: Optional[Path] = None, ood_noise_pool: Optional[Path] = None
) -> List[PerturbationSpec]:
    """Fixed evaluation intensities; real-noise rows only when pools are given."""
    suite = [
        PerturbationSpec(kind=PerturbationKind.gaussian, intensity=25.0),
        PerturbationSpec(kind=PerturbationKind.pink, intensity=22.0),
        PerturbationSpec(kind=PerturbationKind.brown, intensity=16.0),
        PerturbationSpec(kind=PerturbationKind.bit_crush, intensity=10),
    ]
    if noise_pool is not None:
        suite.append(
            PerturbationSpec(kind=PerturbationKind.real_noise, intensity=16.0, noise_pool=noise_pool)
        )
    if ood_noise_pool is not None:
        suite.append(
            PerturbationSpec(
                kind=PerturbationKind.real_noise,
                intensity=16.0,
                noise_pool=ood_noise_pool,
                name="real_noise_ood",
            )
        )
    return suite
