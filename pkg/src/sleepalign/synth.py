"""Synthetic labeled EEG epochs with a controllable, parameterized domain shift.

Each sleep stage gets a characteristic oscillatory band (delta for deep sleep,
alpha for wake, ...) so a spectral classifier can separate the classes; a
ShiftSpec perturbs amplitude, noise, and band frequencies to plant a domain
shift whose strength the tests control.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from importlib import resources

import numpy as np

from .edf import EPOCH_SAMPLES, STAGES, TARGET_HZ, EpochDataset, SignalEpoch

# 64-bit odd multiplier decorrelates per-epoch streams derived from one base
# seed (base ^ i and base ^ (i+1) would otherwise share most state).
_SEED_MIX = 0x9E3779B97F4A7C15
_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class StageSpectrum:
    """Oscillator recipe for one stage: (f_lo, f_hi, amplitude) bands plus
    broadband Gaussian noise."""

    stage: str
    bands: tuple[tuple[float, float, float], ...]
    noise_sigma: float

    def __post_init__(self):
        for f_lo, f_hi, _amp in self.bands:
            if not (0 < f_lo < f_hi < TARGET_HZ / 2):
                raise ValueError(f"band [{f_lo}, {f_hi}] outside (0, Nyquist)")


@dataclass(frozen=True)
class ShiftSpec:
    amplitude_scale: float = 1.0
    noise_sigma_delta: float = 0.0
    frequency_drift_hz: float = 0.0
    channel_gain: float = 1.0

    def __post_init__(self):
        if self.amplitude_scale <= 0:
            raise ValueError("amplitude_scale must be > 0")


IDENTITY_SHIFT = ShiftSpec()


def load_presets() -> dict:
    with resources.files("sleepalign").joinpath("presets.json").open() as f:
        return json.load(f)


def default_spectra() -> dict[str, StageSpectrum]:
    presets = load_presets()
    return {
        stage: StageSpectrum(
            stage=stage,
            bands=tuple(tuple(b) for b in cfg["bands"]),
            noise_sigma=cfg["noise_sigma"],
        )
        for stage, cfg in presets["spectra"].items()
    }


def shift_preset(name: str) -> ShiftSpec:
    presets = load_presets()
    if name not in presets["shifts"]:
        raise KeyError(f"unknown shift preset {name!r}; have {sorted(presets['shifts'])}")
    return ShiftSpec(**presets["shifts"][name])


def gen_epoch(
    stage: str,
    spectrum: StageSpectrum,
    shift: ShiftSpec = IDENTITY_SHIFT,
    seed: int = 0,
    subject_id: str = "synth",
    epoch_index: int = 0,
    domain: str = "source",
) -> SignalEpoch:
    """One 30 s epoch: random-phase sinusoids per band plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(EPOCH_SAMPLES) / TARGET_HZ
    x = np.zeros(EPOCH_SAMPLES)
    for f_lo, f_hi, amp in spectrum.bands:
        freq = rng.uniform(f_lo, f_hi) + shift.frequency_drift_hz
        phase = rng.uniform(0, 2 * np.pi)
        x += amp * shift.amplitude_scale * np.sin(2 * np.pi * freq * t + phase)
    sigma = spectrum.noise_sigma + shift.noise_sigma_delta
    x += rng.normal(0.0, sigma, EPOCH_SAMPLES)
    x *= shift.channel_gain
    return SignalEpoch(samples=x, label=stage, subject_id=subject_id,
                       epoch_index=epoch_index, domain=domain)


def gen_domain(
    n_per_class: int,
    spectra: dict[str, StageSpectrum] | None = None,
    shift: ShiftSpec = IDENTITY_SHIFT,
    seed: int = 0,
    domain: str = "source",
    n_subjects: int = 4,
) -> EpochDataset:
    """Balanced labeled dataset; per-epoch seeds derive from the base seed so
    generation is order-independent."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    spectra = spectra or default_spectra()
    epochs = []
    idx = 0
    for stage in STAGES:
        for _ in range(n_per_class):
            ep_seed = (seed ^ ((idx + 1) * _SEED_MIX)) & _SEED_MASK
            epochs.append(
                gen_epoch(stage, spectra[stage], shift, seed=ep_seed,
                          subject_id=f"subj{idx % n_subjects:02d}",
                          epoch_index=idx, domain=domain)
            )
            idx += 1
    provenance = {
        "generator": "synth",
        "seed": seed,
        "n_per_class": n_per_class,
        "shift": asdict(shift),
    }
    return EpochDataset(epochs=epochs, domain=domain, provenance=provenance)


def band_power(samples: np.ndarray, f_lo: float, f_hi: float) -> float:
    """Mean squared FFT magnitude in [f_lo, f_hi]; the oracle the stage
    signature tests use."""
    spec = np.abs(np.fft.rfft(samples)) ** 2
    freqs = np.fft.rfftfreq(len(samples), d=1.0 / TARGET_HZ)
    mask = (freqs >= f_lo) & (freqs <= f_hi)
    return float(spec[mask].mean())
