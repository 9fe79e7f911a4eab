"""Plane-wave RF channel-data synthesis for a 2-D point-scatterer phantom with clips.

Tissue is strictly linear: every scatterer echo flips sign with the transmit
polarity, while clip emissions are triggered by the incident pulse and do not.
Lengths are in mm, times in microseconds, rates in MHz, speeds in m/s
(1 m/s == 1e-3 mm/us).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft

from .clip import ClipConfig, ClipState, SampledWaveform, clip_waveform, step_trigger
from .codebook import Codebook, load_codebook

log = logging.getLogger(__name__)

MIN_SPREADING_MM = 1.0


@dataclass(frozen=True)
class ArrayGeometry:
    n_elements: int = 128
    pitch: float = 0.3

    def __post_init__(self):
        if self.n_elements < 1:
            raise ValueError("n_elements must be >= 1")
        if self.pitch <= 0:
            raise ValueError("pitch must be positive")

    @property
    def positions(self) -> np.ndarray:
        return (np.arange(self.n_elements) - (self.n_elements - 1) / 2.0) * self.pitch

    @property
    def aperture(self) -> float:
        return (self.n_elements - 1) * self.pitch


@dataclass(frozen=True)
class TransmitPulse:
    center: float = 5.0
    cycles: float = 1.0
    amplitude: float = 1.0

    @property
    def sigma(self) -> float:
        # envelope FWHM equals ``cycles`` periods
        return self.cycles / self.center / (2.0 * math.sqrt(2.0 * math.log(2.0)))

    @property
    def half_support(self) -> float:
        return 4.0 * self.sigma

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        env = np.exp(-0.5 * (t / self.sigma) ** 2)
        out = self.amplitude * env * np.cos(2 * np.pi * self.center * t)
        return np.where(np.abs(t) <= self.half_support, out, 0.0)


@dataclass(frozen=True)
class Scatterer:
    lateral: float
    axial: float
    reflectivity: float


@dataclass(frozen=True)
class TgcCurve:
    """Depth gain ``10**(db_per_cm * depth_cm / 20)``, optionally times ``depth / 1 mm``
    to undo 1/r spreading as well."""

    db_per_cm: float = 0.0
    spreading: bool = False

    def gains(self, n_samples: int, fs: float, sound_speed: float) -> np.ndarray:
        depth_mm = np.arange(n_samples) * sound_speed * 1e-3 / (2.0 * fs)
        g = 10.0 ** (self.db_per_cm * depth_mm / 10.0 / 20.0)
        if self.spreading:
            g = g * np.maximum(depth_mm, MIN_SPREADING_MM) / MIN_SPREADING_MM
        return g

    @property
    def is_unity(self) -> bool:
        return self.db_per_cm == 0.0 and not self.spreading


@dataclass(frozen=True)
class RfFrame:
    polarity: int
    fs: float
    samples: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.polarity not in (-1, 0, 1):
            raise ValueError("polarity must be +1, -1 (or 0 for combined frames)")
        if self.samples.ndim != 2:
            raise ValueError("samples must be n_elements x n_samples")

    @property
    def n_elements(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class Scene:
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    sound_speed: float = 1540.0
    fs: float = 25.0
    acquisition_window: float = 112.0
    pulse: TransmitPulse = field(default_factory=TransmitPulse)
    scatterers: list[Scatterer] = field(default_factory=list)
    clips: list[ClipConfig] = field(default_factory=list)
    noise_std: float = 0.0
    attenuation_db_cm_mhz: float = 0.5
    tgc: TgcCurve = field(default_factory=TgcCurve)
    rng_seed: int = 0
    pri: float = 200.0
    codebook: Codebook | None = None
    warnings: list[str] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if self.sound_speed <= 0 or self.fs <= 0 or self.acquisition_window <= 0:
            raise ValueError("sound_speed, fs and acquisition_window must be positive")
        if self.pri < self.acquisition_window:
            raise ValueError("pri must be at least the acquisition window")
        max_depth = self.max_depth
        for s in self.scatterers:
            if not (np.isfinite(s.reflectivity) and s.axial > 0):
                raise ValueError(f"invalid scatterer {s}")
            if s.axial > max_depth:
                raise ValueError(f"scatterer at {s.axial} mm lies beyond the {max_depth:.2f} mm window")

    @property
    def c_mm_us(self) -> float:
        return self.sound_speed * 1e-3

    @property
    def n_samples(self) -> int:
        return int(round(self.acquisition_window * self.fs))

    @property
    def max_depth(self) -> float:
        return self.acquisition_window * self.c_mm_us / 2.0

    def attenuation(self, path_mm) -> np.ndarray:
        """Scalar amplitude loss over ``path_mm`` at the transmit center frequency."""
        db = self.attenuation_db_cm_mhz * self.pulse.center * np.asarray(path_mm) / 10.0
        return 10.0 ** (-db / 20.0)

    def in_insonified_region(self, clip: ClipConfig) -> bool:
        x, z = clip.position
        half = self.geometry.aperture / 2.0 + self.geometry.pitch / 2.0
        return abs(x) <= half and 0 < z < self.max_depth

    def with_noise(self, noise_std: float) -> "Scene":
        return replace(self, noise_std=float(noise_std), warnings=[])


def make_phantom(
    rng_seed: int,
    density: float,
    region: tuple[tuple[float, float], tuple[float, float]] = ((-19.2, 19.2), (5.0, 55.0)),
    reflectivity_range: tuple[float, float] = (0.05, 0.2),
) -> list[Scatterer]:
    """Uniformly scattered points; ``density`` is per cm^2 and ``region`` is
    ``((x_min, x_max), (z_min, z_max))`` in mm."""
    if not density > 0:
        raise ValueError("density must be > 0")
    (x0, x1), (z0, z1) = region
    if not (x1 > x0 and z1 > z0):
        raise ValueError("region must be nonempty")
    if z0 <= 0:
        raise ValueError("region must lie at positive depth")
    area_cm2 = (x1 - x0) * (z1 - z0) / 100.0
    n = int(round(density * area_cm2))
    rng = np.random.default_rng(rng_seed)
    xs = rng.uniform(x0, x1, n)
    zs = rng.uniform(z0, z1, n)
    rs = rng.uniform(*reflectivity_range, n)
    return [Scatterer(float(x), float(z), float(r)) for x, z, r in zip(xs, zs, rs)]


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent RNG stream keyed by ``(seed, *keys)``; schedule-independent."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), *(int(k) for k in keys)]))


_NOISE, _CLIP = 1, 2
_GUARD = 256


def _polarity_key(p: int) -> int:
    return 1 if p > 0 else 2


def linear_echoes(scene: Scene) -> np.ndarray:
    """Positive-polarity scatterer echoes, n_elements x n_samples, before noise and TGC."""
    xe = scene.geometry.positions
    n_s = scene.n_samples
    out = np.zeros((xe.size, n_s))
    if not scene.scatterers:
        return out
    c = scene.c_mm_us
    fs = scene.fs
    half = scene.pulse.half_support
    width = int(math.ceil(2 * half * fs)) + 2
    offs = np.arange(width)
    rows = np.arange(xe.size)[:, None]
    for s in scene.scatterers:
        r = np.hypot(xe - s.lateral, s.axial)
        t = (s.axial + r) / c
        amp = s.reflectivity / np.maximum(r, MIN_SPREADING_MM) * scene.attenuation(s.axial + r)
        first = np.ceil((t - half) * fs).astype(int)
        idx = first[:, None] + offs[None, :]
        vals = amp[:, None] * scene.pulse(idx / fs - t[:, None])
        ok = (idx >= 0) & (idx < n_s)
        np.add.at(out, (np.broadcast_to(rows, idx.shape)[ok], idx[ok]), vals[ok])
    return out


def incident_at(scene: Scene, position: tuple[float, float], polarity: int) -> SampledWaveform:
    """Plane-wave pressure at ``position`` on the acquisition clock, sampled at scene fs."""
    z = position[1]
    arrival = z / scene.c_mm_us
    half = scene.pulse.half_support
    start = math.floor((arrival - half) * scene.fs)
    n = int(math.ceil(2 * half * scene.fs)) + 2
    t = (start + np.arange(n)) / scene.fs
    samples = polarity * scene.attenuation(z) * scene.pulse(t - arrival)
    return SampledWaveform(fs=scene.fs, samples=samples, t0=start / scene.fs)


def delay_rows(w: SampledWaveform, delays: np.ndarray, gains: np.ndarray, n_samples: int, fs: float) -> np.ndarray:
    """Place ``w`` at ``w.t0 + delays[i]`` on an ``n_samples`` grid for each row,
    using an exact band-limited (Fourier) fractional shift."""
    base_shift = w.t0 + float(np.min(delays))
    n0 = math.floor(base_shift * fs)
    frac = (w.t0 + delays) * fs - n0  # >= 0 sample offsets from grid index n0
    # room for the widest shift plus a guard band so circular wrap stays in the zero tail
    nfft = sp_fft.next_fast_len(w.samples.size + int(math.ceil(frac.max())) + _GUARD, real=True)
    spec = sp_fft.rfft(w.samples, nfft)
    k = np.arange(spec.size)
    phase = np.exp(-2j * np.pi * k[None, :] * frac[:, None] / nfft)
    shifted = sp_fft.irfft(spec[None, :] * phase, nfft, axis=1)
    out = np.zeros((delays.size, n_samples))
    # grid index g holds shifted[:, g - n0]
    lo = max(n0, 0)
    hi = min(n0 + nfft, n_samples)
    if hi > lo:
        out[:, lo:hi] = shifted[:, lo - n0 : hi - n0]
    return out * gains[:, None]


def clip_emission_rows(
    scene: Scene, clip: ClipConfig, trigger_time: float, waveform: SampledWaveform
) -> np.ndarray:
    xe = scene.geometry.positions
    x, z = clip.position
    r = np.hypot(xe - x, z)
    delays = trigger_time + r / scene.c_mm_us
    gains = scene.attenuation(r) / np.maximum(r, MIN_SPREADING_MM)
    return delay_rows(waveform, delays, gains, scene.n_samples, scene.fs)


def clip_rows(
    scene: Scene,
    polarity: int,
    states: list[ClipState],
    acquisition_index: int,
    rng_key: tuple[int, ...],
    second_of_pair: bool,
    waveforms: dict | None = None,
) -> tuple[np.ndarray, list]:
    out = np.zeros((scene.geometry.n_elements, scene.n_samples))
    events = []
    now = acquisition_index * scene.pri
    for ci, (clip, state) in enumerate(zip(scene.clips, states)):
        rng = stream(scene.rng_seed, *rng_key, _CLIP, ci)
        if not scene.in_insonified_region(clip):
            msg = f"clip {clip.id} at {clip.position} is outside the insonified region"
            if msg not in scene.warnings:
                scene.warnings.append(msg)
                log.warning(msg)
            events.append(None)
            continue
        inc = incident_at(scene, clip.position, polarity)
        ev = step_trigger(state, clip, inc.shifted(now), 0.0, rng, second_of_pair=second_of_pair)
        events.append(ev)
        if ev is None:
            continue
        if scene.codebook is None:
            raise ValueError("scene has clips but no codebook")
        key = (clip.id, clip.chip_rate, clip.duty_cycle, clip.amplitude, clip.crystal_center,
               clip.crystal_fractional_bandwidth)
        if waveforms is not None and key in waveforms:
            w = waveforms[key]
        else:
            w = clip_waveform(scene.codebook[clip.id], clip, scene.fs)
            if waveforms is not None:
                waveforms[key] = w
        out += clip_emission_rows(scene, clip, ev.time - now, w)
    return out, events


def _finish(scene: Scene, rows: np.ndarray, rng_key: tuple[int, ...]) -> np.ndarray:
    if scene.noise_std > 0:
        rng = stream(scene.rng_seed, *rng_key, _NOISE)
        rows = rows + scene.noise_std * rng.standard_normal(rows.shape)
    if not scene.tgc.is_unity:
        rows = rows * scene.tgc.gains(scene.n_samples, scene.fs, scene.sound_speed)[None, :]
    return rows


def simulate_acquisition(
    scene: Scene,
    polarity: int,
    frame_index: int = 0,
    states: list[ClipState] | None = None,
    second_of_pair: bool = False,
    echoes: np.ndarray | None = None,
) -> RfFrame:
    """One plane-wave acquisition at the given transmit polarity.

    ``frame_index`` is the acquisition counter: it sets the acquisition clock
    (``frame_index * pri``) and keys the noise and jitter streams. ``echoes``
    may carry a precomputed :func:`linear_echoes` result.
    """
    if polarity not in (1, -1):
        raise ValueError("polarity must be +1 or -1")
    if states is None:
        states = [ClipState() for _ in scene.clips]
    key = (frame_index, _polarity_key(polarity))
    lin = linear_echoes(scene) if echoes is None else echoes
    rows = polarity * lin
    if scene.clips:
        crow, _ = clip_rows(scene, polarity, states, frame_index, key, second_of_pair)
        rows = rows + crow
    rows = _finish(scene, rows, key)
    return RfFrame(polarity=polarity, fs=scene.fs, samples=rows, frame_index=frame_index)


def simulate_pi_pair(scene: Scene, pair_index: int = 0, echoes: np.ndarray | None = None) -> tuple[RfFrame, RfFrame]:
    """Positive then negative acquisition (indices ``2k`` and ``2k + 1``) with fresh clip state."""
    lin = linear_echoes(scene) if echoes is None else echoes
    states = [ClipState() for _ in scene.clips]
    i0 = 2 * pair_index
    pos = simulate_acquisition(scene, 1, i0, states, second_of_pair=False, echoes=lin)
    neg = simulate_acquisition(scene, -1, i0 + 1, states, second_of_pair=True, echoes=lin)
    return pos, neg


def apply_tgc(frame: RfFrame, curve, sound_speed: float = 1540.0) -> RfFrame:
    """Multiply each depth sample by its gain; ``curve`` is a :class:`TgcCurve`
    or an explicit per-sample gain array."""
    if isinstance(curve, TgcCurve):
        gains = curve.gains(frame.n_samples, frame.fs, sound_speed)
    else:
        gains = np.asarray(curve, dtype=np.float64)
        if gains.shape != (frame.n_samples,):
            raise ValueError("gain curve must cover every depth sample")
    if not np.all(gains > 0):
        raise ValueError("TGC gains must be positive")
    return replace(frame, samples=frame.samples * gains[None, :])


# -- scene config --------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "geometry": {"n_elements": scene.geometry.n_elements, "pitch": scene.geometry.pitch},
        "sound_speed": scene.sound_speed,
        "fs": scene.fs,
        "acquisition_window": scene.acquisition_window,
        "pulse": {"center": scene.pulse.center, "cycles": scene.pulse.cycles, "amplitude": scene.pulse.amplitude},
        "scatterers": [[s.lateral, s.axial, s.reflectivity] for s in scene.scatterers],
        "clips": [c.to_dict() for c in scene.clips],
        "noise_std": scene.noise_std,
        "attenuation_db_cm_mhz": scene.attenuation_db_cm_mhz,
        "tgc": {"db_per_cm": scene.tgc.db_per_cm, "spreading": scene.tgc.spreading},
        "rng_seed": scene.rng_seed,
        "pri": scene.pri,
    }


def _strict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


_SCENE_KEYS = {
    "geometry", "sound_speed", "fs", "acquisition_window", "pulse", "scatterers", "clips",
    "noise_std", "attenuation_db_cm_mhz", "tgc", "rng_seed", "pri", "codebook", "phantom",
}


def scene_from_dict(d: dict, base_dir: Path | None = None, codebook: Codebook | None = None) -> Scene:
    """Build a :class:`Scene`; unknown keys raise ``ValueError``.

    ``codebook`` may be a path (relative to ``base_dir``); ``phantom`` may hold
    ``make_phantom`` keyword arguments as an alternative to explicit scatterers.
    """
    unknown = set(d) - _SCENE_KEYS
    if unknown:
        raise ValueError(f"scene: unknown keys {sorted(unknown)}")
    kw = {}
    if "geometry" in d:
        kw["geometry"] = _strict(ArrayGeometry, d["geometry"], "geometry")
    if "pulse" in d:
        kw["pulse"] = _strict(TransmitPulse, d["pulse"], "pulse")
    if "tgc" in d:
        kw["tgc"] = _strict(TgcCurve, d["tgc"], "tgc")
    for k in ("sound_speed", "fs", "acquisition_window", "noise_std", "attenuation_db_cm_mhz", "pri"):
        if k in d:
            kw[k] = float(d[k])
    if "rng_seed" in d:
        kw["rng_seed"] = int(d["rng_seed"])
    scatterers = [Scatterer(*map(float, s)) for s in d.get("scatterers", [])]
    if "phantom" in d:
        p = dict(d["phantom"])
        bad = set(p) - {"rng_seed", "density", "region", "reflectivity_range"}
        if bad:
            raise ValueError(f"phantom: unknown keys {sorted(bad)}")
        if "region" in p:
            p["region"] = tuple(tuple(r) for r in p["region"])
        if "reflectivity_range" in p:
            p["reflectivity_range"] = tuple(p["reflectivity_range"])
        scatterers += make_phantom(**p)
    kw["scatterers"] = scatterers
    kw["clips"] = [ClipConfig.from_dict(c) for c in d.get("clips", [])]
    if codebook is None and d.get("codebook"):
        path = Path(d["codebook"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        codebook = load_codebook(path)
    kw["codebook"] = codebook
    return Scene(**kw)


def load_scene(path, codebook: Codebook | None = None) -> Scene:
    path = Path(path)
    return scene_from_dict(json.loads(path.read_text()), base_dir=path.parent, codebook=codebook)


def save_scene(scene: Scene, path, codebook_path: str | None = None) -> None:
    d = scene_to_dict(scene)
    if codebook_path:
        d["codebook"] = codebook_path
    Path(path).write_text(json.dumps(d, indent=2) + "\n")
