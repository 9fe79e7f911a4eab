"""Pulse-inversion combination and plane-wave delay-and-sum beamforming."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numba
import numpy as np
from scipy.signal import hilbert

from .phantom import ArrayGeometry, RfFrame

SOURCE_KINDS = ("single", "summed", "subtracted")
DEFAULT_APERTURE = 64  # elements; ``None`` uses the full array


@dataclass(frozen=True)
class BeamformedImage:
    """Lines x depth-samples image; line ``l`` sits at ``line_positions[l]`` and
    sample ``s`` at depth ``s * c / (2 fs)``."""

    values: np.ndarray
    fs: float
    sound_speed: float
    line_positions: np.ndarray
    source_kind: str = "summed"
    frame_index: int = 0

    def __post_init__(self):
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"source_kind must be one of {SOURCE_KINDS}")
        if self.values.shape[0] != self.line_positions.size:
            raise ValueError("one line per lateral position required")

    @property
    def n_lines(self) -> int:
        return self.values.shape[0]

    @property
    def depth_samples(self) -> int:
        return self.values.shape[1]

    @property
    def depth_step(self) -> float:
        """mm per depth sample."""
        return self.sound_speed * 1e-3 / (2.0 * self.fs)

    @property
    def depths(self) -> np.ndarray:
        return np.arange(self.depth_samples) * self.depth_step

    def scaled(self, k: float) -> "BeamformedImage":
        return replace(self, values=self.values * k)


def _check_pair(a: RfFrame, b: RfFrame) -> None:
    if a.fs != b.fs or a.samples.shape != b.samples.shape:
        raise ValueError("PI frames must share fs and shape")
    if a.polarity != 0 and b.polarity != 0 and a.polarity == b.polarity:
        raise ValueError("PI frames must have opposite polarity")


def pi_sum(f_pos: RfFrame, f_neg: RfFrame) -> RfFrame:
    """Cancel linear echoes; nonpolar clip signal adds coherently."""
    _check_pair(f_pos, f_neg)
    return RfFrame(polarity=0, fs=f_pos.fs, samples=f_pos.samples + f_neg.samples, frame_index=f_pos.frame_index)


def pi_diff(f_pos: RfFrame, f_neg: RfFrame) -> RfFrame:
    """Cancel nonpolar clip signal; linear echoes add coherently."""
    _check_pair(f_pos, f_neg)
    return RfFrame(polarity=0, fs=f_pos.fs, samples=f_pos.samples - f_neg.samples, frame_index=f_pos.frame_index)


def delay_table(geometry: ArrayGeometry, n_samples: int, fs: float, sound_speed: float) -> np.ndarray:
    """Fractional sample index of the echo from line ``l`` at depth sample ``s``
    on an element ``d`` pitches away: ``s / 2 + fs * hypot(d * pitch, z_s) / c``."""
    c = sound_speed * 1e-3
    z = np.arange(n_samples) * c / (2.0 * fs)
    dx = np.arange(geometry.n_elements) * geometry.pitch
    return np.arange(n_samples)[None, :] / 2.0 + fs * np.hypot(dx[:, None], z[None, :]) / c


def aperture_bounds(n_elements: int, aperture: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Half-open element ranges per line, centred on the line and clipped at the array edge."""
    lines = np.arange(n_elements)
    if aperture is None or aperture >= 2 * n_elements:
        return np.zeros(n_elements, dtype=np.int64), np.full(n_elements, n_elements, dtype=np.int64)
    if aperture < 1:
        raise ValueError("aperture must be >= 1 element")
    lo = lines - (aperture - 1) // 2
    hi = lo + aperture
    return np.clip(lo, 0, n_elements).astype(np.int64), np.clip(hi, 0, n_elements).astype(np.int64)


@numba.njit(cache=True, parallel=True, fastmath=False)
def _das_kernel(ch, idx, lo, hi, weights, out):
    n_lines, n_s = out.shape
    n_ch = ch.shape[1]
    for l in numba.prange(n_lines):
        for e in range(lo[l], hi[l]):
            d = abs(l - e)
            w_e = weights[l, e - lo[l]]
            row = idx[d]
            for s in range(n_s):
                f = row[s]
                i = int(f)
                if i + 1 >= n_ch:
                    break  # row is increasing in s
                frac = f - i
                out[l, s] += w_e * (ch[e, i] * (1.0 - frac) + ch[e, i + 1] * frac)


def _weights(lo, hi, apodization: str) -> np.ndarray:
    width = int((hi - lo).max())
    w = np.zeros((lo.size, width))
    for l in range(lo.size):
        n = int(hi[l] - lo[l])
        if apodization == "hann" and n > 2:
            taper = np.hanning(n + 2)[1:-1]
        elif apodization in ("none", "hann"):
            taper = np.ones(n)
        else:
            raise ValueError(f"unknown apodization {apodization!r}")
        w[l, :n] = taper / taper.sum()
    return w


def das_beamform(
    frame: RfFrame,
    geometry: ArrayGeometry,
    sound_speed: float = 1540.0,
    aperture: int | None = DEFAULT_APERTURE,
    apodization: str = "none",
    source_kind: str | None = None,
) -> BeamformedImage:
    """Delay-and-sum onto one line per element and one depth per RF sample.

    Each line is a sequential weighted sum over its aperture, so the result
    does not depend on how lines are scheduled. Taps falling past the last
    sample contribute 0; weights sum to 1 per line.
    """
    if frame.n_elements != geometry.n_elements:
        raise ValueError("frame and geometry disagree on element count")
    n_s = frame.n_samples
    idx = delay_table(geometry, n_s, frame.fs, sound_speed)
    lo, hi = aperture_bounds(geometry.n_elements, aperture)
    w = _weights(lo, hi, apodization)
    out = np.zeros((geometry.n_elements, n_s))
    _das_kernel(np.ascontiguousarray(frame.samples, dtype=np.float64), idx, lo, hi, w, out)
    if source_kind is None:
        source_kind = "single" if frame.polarity != 0 else "summed"
    return BeamformedImage(
        values=out,
        fs=frame.fs,
        sound_speed=sound_speed,
        line_positions=geometry.positions,
        source_kind=source_kind,
        frame_index=frame.frame_index,
    )


def das_reference(frame: RfFrame, geometry: ArrayGeometry, sound_speed: float = 1540.0) -> np.ndarray:
    """Full-aperture DAS written directly from the geometry with ``np.interp``; slow, for testing."""
    c = sound_speed * 1e-3
    n_s = frame.n_samples
    z = np.arange(n_s) * c / (2.0 * frame.fs)
    x = geometry.positions
    grid = np.arange(n_s)
    out = np.zeros((x.size, n_s))
    for l, xl in enumerate(x):
        acc = np.zeros(n_s)
        for e, xe in enumerate(x):
            t = z / c + np.hypot(xl - xe, z) / c
            acc += np.interp(t * frame.fs, grid, frame.samples[e], right=0.0)
        out[l] = acc / x.size
    return out


def envelope_bmode(img: BeamformedImage, dynamic_range_db: float = 50.0, reference: float | None = None) -> np.ndarray:
    """Log-compressed envelope in [0, 1]; ``reference`` is the 0 dB level
    (default: the image's envelope maximum)."""
    if not dynamic_range_db > 0:
        raise ValueError("dynamic_range_db must be positive")
    env = np.abs(hilbert(img.values, axis=1))
    ref = float(env.max()) if reference is None else float(reference)
    if ref <= 0:
        return np.zeros_like(env)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(env / ref)
    return np.clip((db + dynamic_range_db) / dynamic_range_db, 0.0, 1.0)
