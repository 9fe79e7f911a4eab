"""Behavioral model of the identification clip.

The clip listens for the imaging pulse, fires once the incident amplitude
crosses its comparator threshold, and plays its code as a chip train shaped
by the crystal's band-pass response. Times are in microseconds, rates in MHz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .codebook import CODE_LENGTH, PnCode

CHIP_RATE_MHZ = 3.90
DUTY_CYCLE = 0.33
CRYSTAL_CENTER_MHZ = 1.2
CRYSTAL_FRACTIONAL_BANDWIDTH = 1.5


@dataclass
class ClipConfig:
    id: int
    position: tuple[float, float]  # (lateral mm, axial mm)
    trigger_threshold: float = 0.2
    trigger_delay_mean: float = 0.5
    jitter_std: float = 0.05
    miss_probability_second_pulse: float = 0.05
    extra_delay_on_miss: float = 0.25
    lockout_duration: float | None = None
    chip_rate: float = CHIP_RATE_MHZ
    duty_cycle: float = DUTY_CYCLE
    amplitude: float = 1.0
    crystal_center: float = CRYSTAL_CENTER_MHZ
    crystal_fractional_bandwidth: float = CRYSTAL_FRACTIONAL_BANDWIDTH

    def __post_init__(self):
        self.position = (float(self.position[0]), float(self.position[1]))
        if not 0 < self.duty_cycle < 1:
            raise ValueError("duty_cycle must be in (0, 1)")
        if self.chip_rate <= 0:
            raise ValueError("chip_rate must be positive")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if not 0 <= self.miss_probability_second_pulse <= 1:
            raise ValueError("miss_probability_second_pulse must be in [0, 1]")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be >= 0")
        if self.lockout_duration is None:
            self.lockout_duration = 2.0 * self.code_duration
        if self.lockout_duration < self.code_duration:
            raise ValueError("lockout_duration must cover the code duration")

    @property
    def code_duration(self) -> float:
        return CODE_LENGTH / self.chip_rate

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["position"] = list(self.position)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClipConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown clip keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClipState:
    armed: bool = True
    lockout_until: float = -math.inf
    last_trigger_time: float | None = None
    acquisitions: int = 0


@dataclass(frozen=True)
class SampledWaveform:
    fs: float
    samples: np.ndarray
    t0: float = 0.0

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.fs

    def shifted(self, dt: float) -> "SampledWaveform":
        return SampledWaveform(self.fs, self.samples, self.t0 + dt)


@dataclass(frozen=True)
class TriggerEvent:
    time: float
    crossing_time: float
    delayed: bool = False


def synthesize_chip_train(
    code: PnCode | np.ndarray,
    chip_rate: float = CHIP_RATE_MHZ,
    duty_cycle: float = DUTY_CYCLE,
    amplitude: float = 1.0,
    fs: float = 25.0,
) -> SampledWaveform:
    """Bipolar return-to-zero pulse train: each chip holds ``±amplitude`` for
    the first ``duty_cycle`` of its period and 0 for the rest.

    Sampling is zero-order-hold: a sample is high when its whole interval
    ``[i, i + 1) / fs`` falls inside the active part of its chip.
    """
    if fs < 4 * chip_rate:
        raise ValueError(f"fs={fs} MHz is below 4x the chip rate ({4 * chip_rate} MHz)")
    chips = np.asarray(code.chips if isinstance(code, PnCode) else code, dtype=np.float64)
    duration = chips.size / chip_rate
    n = math.ceil(duration * fs - 1e-9)
    # a sample is high only if its whole hold interval lies in the active part of its chip
    step = chip_rate / fs
    pos = np.arange(n) * step
    chip_idx = np.minimum(np.floor(pos + 1e-9).astype(int), chips.size - 1)
    active = (pos - chip_idx) + step <= duty_cycle + 1e-9
    samples = np.where(active, chips[chip_idx] * amplitude, 0.0)
    return SampledWaveform(fs=fs, samples=samples, t0=0.0)


def crystal_kernel(
    fs: float, center: float = CRYSTAL_CENTER_MHZ, fractional_bandwidth: float = CRYSTAL_FRACTIONAL_BANDWIDTH
) -> np.ndarray:
    """Unit-energy Gaussian-enveloped cosine whose -6 dB bandwidth is
    ``fractional_bandwidth * center``. Odd length, symmetric about its middle."""
    if not 0 < fractional_bandwidth <= 2:
        raise ValueError("fractional_bandwidth must be in (0, 2]")
    bw = fractional_bandwidth * center
    # -6 dB half-width of the Gaussian spectrum: sigma_f * sqrt(2 ln 2) = bw / 2
    sigma_f = bw / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    sigma_t = 1.0 / (2.0 * math.pi * sigma_f)
    half = math.ceil(3.5 * sigma_t * fs)
    t = np.arange(-half, half + 1) / fs
    k = np.exp(-0.5 * (t / sigma_t) ** 2) * np.cos(2 * np.pi * center * t)
    return k / np.sqrt(np.sum(k * k))


def apply_crystal_response(
    w: SampledWaveform, center: float = CRYSTAL_CENTER_MHZ, fractional_bandwidth: float = CRYSTAL_FRACTIONAL_BANDWIDTH
) -> SampledWaveform:
    k = crystal_kernel(w.fs, center, fractional_bandwidth)
    out = np.convolve(w.samples, k) if w.samples.size else np.zeros(0)
    group_delay = (k.size - 1) // 2 / w.fs
    return SampledWaveform(fs=w.fs, samples=out, t0=w.t0 - group_delay)


def _jitter(cfg: ClipConfig, rng: np.random.Generator) -> float:
    if cfg.jitter_std == 0:
        return 0.0
    return float(np.clip(rng.standard_normal(), -3.0, 3.0)) * cfg.jitter_std


def step_trigger(
    state: ClipState,
    cfg: ClipConfig,
    incident: SampledWaveform,
    now: float,
    rng: np.random.Generator,
    second_of_pair: bool = False,
) -> TriggerEvent | None:
    """Advance the comparator by one acquisition.

    ``incident`` is the pressure seen at the clip on its own time axis
    (``incident.t0`` relative to the acquisition start at ``now``). A draw from
    ``rng`` is always consumed in the same order so a fixed stream gives the
    same jitter for either incident polarity.
    """
    state.acquisitions += 1
    jitter = _jitter(cfg, rng)
    miss_roll = rng.random()
    miss_kind = rng.random()
    if not state.armed:
        return None
    hits = np.flatnonzero(np.abs(incident.samples) >= cfg.trigger_threshold)
    if hits.size == 0:
        return None
    crossing = now + incident.t0 + hits[0] / incident.fs
    if crossing < state.lockout_until:
        return None
    delayed = False
    t = crossing + cfg.trigger_delay_mean + jitter
    if second_of_pair and miss_roll < cfg.miss_probability_second_pulse:
        if miss_kind < 0.5:
            return None
        t += cfg.extra_delay_on_miss
        delayed = True
    state.lockout_until = t + cfg.lockout_duration
    state.last_trigger_time = t
    return TriggerEvent(time=t, crossing_time=crossing, delayed=delayed)


def emit(cfg: ClipConfig, trigger: TriggerEvent, code_ref: PnCode, fs: float) -> SampledWaveform:
    """Crystal-shaped code waveform stamped at the trigger time."""
    return clip_waveform(code_ref, cfg, fs).shifted(trigger.time)


def clip_waveform(code: PnCode, cfg: ClipConfig, fs: float) -> SampledWaveform:
    train = synthesize_chip_train(code, cfg.chip_rate, cfg.duty_cycle, cfg.amplitude, fs)
    return apply_crystal_response(train, cfg.crystal_center, cfg.crystal_fractional_bandwidth)


def resample_delay(w: SampledWaveform, fs: float, start: float, n: int) -> np.ndarray:
    """Sample ``w`` on the grid ``start + i / fs`` for ``i < n`` with linear interpolation, zero outside."""
    t = start + np.arange(n) / fs
    return np.interp(t, w.times(), w.samples, left=0.0, right=0.0)


__all__ = [
    "ClipConfig",
    "ClipState",
    "SampledWaveform",
    "TriggerEvent",
    "apply_crystal_response",
    "clip_waveform",
    "crystal_kernel",
    "emit",
    "step_trigger",
    "synthesize_chip_train",
]
