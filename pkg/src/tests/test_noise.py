# File: src/tests/test_noise.py
import json

import numpy as np
import pytest
from pydantic import ValidationError

from src.app.schemas.perturbation import (
    PerturbationKind,
    PerturbationSpec,
    default_eval_suite,
    default_training_specs,
)
from src.app.schemas.signal import Waveform
from src.app.services.metrics_service import psd_slope
from src.app.services.noise_service import (
    NoisePool,
    bit_crush,
    fit_noise_length,
    gen_colored_noise,
    load_perturbation_specs,
    measure_power,
    measured_snr_db,
    mix_at_snr,
    perturb,
    sample_intensity,
)
from src.app.services.signal_service import save_wav
from src.app.utils.exceptions import ResourceNotFoundException, ValidationException


def _tone(n=16000, amplitude=0.3):
    t = np.arange(n) / 16000
    return Waveform(samples=amplitude * np.sin(2 * np.pi * 220.0 * t))


@pytest.mark.parametrize("snr_db", [0.0, 10.0, 25.0])
def test_mix_at_snr_hits_target(snr_db):
    clean = _tone()
    noise = gen_colored_noise(len(clean), 0, seed=1)
    mixed = mix_at_snr(clean, noise, snr_db)
    assert len(mixed) == len(clean)
    assert measured_snr_db(clean, mixed) == pytest.approx(snr_db, abs=1e-9)


def test_mix_at_snr_unit_powers_gives_expected_gain():
    clean = Waveform(samples=np.array([1.0, -1.0, 1.0, -1.0]))
    noise = Waveform(samples=np.array([1.0, 1.0, -1.0, -1.0]))
    mixed = mix_at_snr(clean, noise, 20.0)
    np.testing.assert_allclose(mixed.samples - clean.samples, 0.1 * noise.samples)


def test_mix_at_snr_tiles_short_noise():
    clean = _tone(1000)
    noise = Waveform(samples=np.array([0.5, -0.5, 0.25]))
    mixed = mix_at_snr(clean, noise, 10.0)
    assert len(mixed) == 1000
    assert measured_snr_db(clean, mixed) == pytest.approx(10.0, abs=1e-9)


def test_mix_at_snr_infinite_snr_returns_clean():
    clean = _tone(100)
    mixed = mix_at_snr(clean, gen_colored_noise(100, 0, seed=2), float("inf"))
    np.testing.assert_array_equal(mixed.samples, clean.samples)


def test_mix_at_snr_rejects_silent_noise():
    with pytest.raises(ValidationException):
        mix_at_snr(_tone(100), Waveform(samples=np.zeros(100)), 10.0)


def test_mix_at_snr_rejects_rate_mismatch():
    noise = Waveform(samples=np.ones(100), sample_rate_hz=8000)
    with pytest.raises(ValidationException):
        mix_at_snr(_tone(100), noise, 10.0)


def test_fit_noise_length_crops_at_random_offset(rng):
    noise = np.arange(100, dtype=float)
    fitted, offset = fit_noise_length(noise, 10, rng)
    np.testing.assert_array_equal(fitted, noise[offset : offset + 10])


@pytest.mark.parametrize("alpha", [0, 1, 2])
def test_colored_noise_has_unit_power(alpha):
    w = gen_colored_noise(2**14, alpha, seed=5)
    assert measure_power(w) == pytest.approx(1.0, rel=1e-9)
    assert len(w) == 2**14


@pytest.mark.parametrize("alpha", [0, 1, 2])
def test_colored_noise_spectral_slope(alpha):
    slopes = [psd_slope(gen_colored_noise(2**16, alpha, seed=s)) for s in range(20)]
    for slope in slopes:
        assert slope == pytest.approx(-alpha, abs=0.15)


def test_colored_noise_seed_is_reproducible():
    a = gen_colored_noise(4096, 1, seed=9)
    b = gen_colored_noise(4096, 1, seed=9)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_colored_noise_rejects_other_exponents():
    with pytest.raises(ValidationException):
        gen_colored_noise(4096, 1.5, seed=0)


def test_bit_crush_one_bit_depth():
    out = bit_crush(Waveform(samples=[-0.6, 0.6, 0.9, 0.2]), 1)
    np.testing.assert_array_equal(out.samples, [-1.0, 0.0, 0.0, 0.0])


def test_bit_crush_eight_bits():
    out = bit_crush(Waveform(samples=[0.5, -1.0, 0.999]), 8)
    np.testing.assert_allclose(out.samples, [0.5, -1.0, 127 / 128])


def test_bit_crush_rejects_bad_depth():
    with pytest.raises(ValidationException):
        bit_crush(_tone(10), 0)


def test_spec_requires_exactly_one_intensity_source():
    with pytest.raises(ValidationError):
        PerturbationSpec(kind="gaussian")
    with pytest.raises(ValidationError):
        PerturbationSpec(kind="gaussian", intensity=10.0, range=(5.0, 15.0))


def test_spec_rejects_fractional_bit_depth():
    with pytest.raises(ValidationError):
        PerturbationSpec(kind="bit_crush", intensity=7.5)


def test_real_noise_spec_requires_pool():
    with pytest.raises(ValidationError):
        PerturbationSpec(kind="real_noise", intensity=10.0)


def test_sample_intensity_stays_in_range(rng):
    spec = PerturbationSpec(kind="pink", range=(16.0, 24.0))
    draws = [sample_intensity(spec, rng) for _ in range(500)]
    assert min(draws) >= 16.0 and max(draws) <= 24.0


def test_sample_intensity_bit_depth_is_integer(rng):
    spec = PerturbationSpec(kind="bit_crush", range=(8, 14))
    draws = {sample_intensity(spec, rng) for _ in range(500)}
    assert draws <= {float(d) for d in range(8, 15)}


def test_perturb_keeps_length_and_rate(rng):
    clean = _tone(8000)
    for _ in range(20):
        out, applied = perturb(clean, default_training_specs(), rng)
        assert len(out) == len(clean)
        assert out.sample_rate_hz == clean.sample_rate_hz
        assert applied.kind in {
            PerturbationKind.gaussian,
            PerturbationKind.pink,
            PerturbationKind.brown,
            PerturbationKind.bit_crush,
        }


def test_perturb_none_is_identity(rng):
    clean = _tone(100)
    out, applied = perturb(clean, [PerturbationSpec(kind="none")], rng)
    np.testing.assert_array_equal(out.samples, clean.samples)
    assert applied.realized_intensity is None


@pytest.mark.parametrize("kind,snr", [("gaussian", 25.0), ("pink", 22.0), ("brown", 16.0)])
def test_perturb_fixed_snr_is_calibrated(kind, snr):
    clean = _tone()
    spec = PerturbationSpec(kind=kind, intensity=snr)
    rng = np.random.default_rng(42)
    for _ in range(100):
        out, _ = perturb(clean, [spec], rng)
        assert measured_snr_db(clean, out) == pytest.approx(snr, abs=0.1)


def test_perturb_real_noise_is_calibrated_and_replayable(noise_pools):
    clean = _tone()
    spec = PerturbationSpec(kind="real_noise", intensity=16.0, noise_pool=noise_pools["train"])
    rng = np.random.default_rng(7)
    for _ in range(100):
        out, applied = perturb(clean, [spec], rng)
        assert measured_snr_db(clean, out) == pytest.approx(16.0, abs=0.1)
        assert applied.noise_clip_id in NoisePool.from_directory(noise_pools["train"]).clip_ids


def test_perturb_is_reproducible_with_same_seed():
    clean = _tone(4000)
    a, ra = perturb(clean, default_training_specs(), np.random.default_rng(3))
    b, rb = perturb(clean, default_training_specs(), np.random.default_rng(3))
    np.testing.assert_array_equal(a.samples, b.samples)
    assert ra == rb


def test_perturb_needs_specs(rng):
    with pytest.raises(ValidationException):
        perturb(_tone(10), [], rng)


def test_noise_pool_missing_directory(tmp_path):
    with pytest.raises(ResourceNotFoundException):
        NoisePool.from_directory(tmp_path / "missing")


def test_noise_pool_empty_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ResourceNotFoundException):
        NoisePool.from_directory(tmp_path / "empty")


def test_noise_pool_skips_silent_clips(tmp_path):
    pool_dir = tmp_path / "pool"
    save_wav(Waveform(samples=np.zeros(4000)), pool_dir / "silence.wav")
    save_wav(gen_colored_noise(4000, 1, seed=2), pool_dir / "hum.wav")
    pool = NoisePool.from_directory(pool_dir)
    assert pool.clip_ids == ["hum.wav"]

    clean = _tone()
    spec = PerturbationSpec(kind="real_noise", intensity=10.0, noise_pool=pool_dir)
    rng = np.random.default_rng(0)
    for _ in range(20):
        out, applied = perturb(clean, [spec], rng)
        assert applied.noise_clip_id == "hum.wav"
        assert measured_snr_db(clean, out) == pytest.approx(10.0, abs=0.1)


def test_noise_pool_of_silent_clips_is_unusable(tmp_path):
    pool_dir = tmp_path / "quiet"
    save_wav(Waveform(samples=np.zeros(4000)), pool_dir / "silence.wav")
    with pytest.raises(ResourceNotFoundException):
        NoisePool.from_directory(pool_dir)


def test_synthetic_pool_splits_train_and_ood(noise_pools):
    train = NoisePool.from_directory(noise_pools["train"])
    ood = NoisePool.from_directory(noise_pools["ood"])
    assert len(train) == 3 and len(ood) == 3
    assert not set(train.clip_ids) & set(ood.clip_ids)


def test_default_eval_suite_rows(noise_pools):
    suite = default_eval_suite(noise_pools["train"], noise_pools["ood"])
    assert [s.label for s in suite] == ["gaussian", "pink", "brown", "bit_crush", "real_noise", "real_noise_ood"]
    assert [s.intensity for s in suite] == [25.0, 22.0, 16.0, 10, 16.0, 16.0]


def test_load_perturbation_specs_resolves_relative_pool(tmp_path, noise_pools):
    spec_file = noise_pools["train"].parent / "specs.json"
    spec_file.write_text(
        json.dumps([{"kind": "gaussian", "range": [16, 30]}, {"kind": "real_noise", "intensity": 12, "noise_pool": "train"}])
    )
    specs = load_perturbation_specs(spec_file)
    assert specs[0].range == (16.0, 30.0)
    assert specs[1].noise_pool == noise_pools["train"]
