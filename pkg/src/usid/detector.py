"""Per-line matched-filter localization and identification of clip emissions.

Every line of a summed-PI image is cross-correlated with each ID's reference
waveform. The lateral position is the line where the ID's correlation is
strongest, the axial position comes from the peak lag on that line, and the
normalized peak on that line is compared with the ON threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft

from .beamform import DEFAULT_APERTURE, BeamformedImage
from .clip import ClipConfig, SampledWaveform, clip_waveform
from .codebook import Codebook

NMS_RADIUS_MM = 2.0


@dataclass(frozen=True)
class ReferenceSet:
    """Unit-energy reference waveform per code id, sampled at ``fs``.

    ``t0`` is the time of each reference's first sample relative to the
    emission start (negative by the crystal's group delay).
    """

    fs: float
    waveforms: dict[int, np.ndarray]
    t0: dict[int, float]

    @property
    def ids(self) -> list[int]:
        return sorted(self.waveforms)

    def __contains__(self, code_id: int) -> bool:
        return code_id in self.waveforms


@dataclass(frozen=True)
class Detection:
    id: int
    lateral: float
    axial: float
    score: float
    frame_index: int = 0
    line: int = -1


@dataclass(frozen=True)
class DetectorConfig:
    on_threshold: float = 0.3
    normalization: str = "global"
    axial_offset_correction: float = 0.0
    line_selection: str = "raw"
    nms_radius: float = NMS_RADIUS_MM

    def __post_init__(self):
        if not 0 < self.on_threshold < 1:
            raise ValueError("on_threshold must be in (0, 1)")
        if self.normalization not in ("global", "windowed"):
            raise ValueError("normalization must be 'global' or 'windowed'")
        if self.line_selection not in ("raw", "normalized"):
            raise ValueError("line_selection must be 'raw' or 'normalized'")


def build_references(codebook: Codebook, clip_cfg: ClipConfig, fs: float) -> ReferenceSet:
    """Crystal-shaped chip train for every code, scaled to unit energy."""
    waves, t0 = {}, {}
    for code in codebook.codes:
        w = clip_waveform(code, clip_cfg, fs)
        e = float(np.sqrt(np.sum(w.samples**2)))
        waves[code.id] = w.samples / e
        t0[code.id] = w.t0
    return ReferenceSet(fs=fs, waveforms=waves, t0=t0)


def references_from_waveforms(waveforms: dict[int, SampledWaveform]) -> ReferenceSet:
    """Reference set from externally captured waveforms (e.g. a hardware recording)."""
    fs = {w.fs for w in waveforms.values()}
    if len(fs) != 1:
        raise ValueError("reference waveforms must share one sample rate")
    waves = {k: w.samples / np.sqrt(np.sum(w.samples**2)) for k, w in waveforms.items()}
    return ReferenceSet(fs=fs.pop(), waveforms=waves, t0={k: w.t0 for k, w in waveforms.items()})


@dataclass
class LineScores:
    """Per-line correlation summary for one reference."""

    raw: np.ndarray  # max |raw correlation| per line
    score: np.ndarray  # normalized value at that lag per line
    lag: np.ndarray  # lag of the per-line peak


class Correlator:
    """Batched FFT correlation of every image line against each reference.

    The image spectrum is computed once and reused across references.
    """

    def __init__(self, img: BeamformedImage, refs: ReferenceSet, normalization: str = "global"):
        if abs(img.fs - refs.fs) > 1e-9:
            raise ValueError("reference and image sample rates differ")
        self.img = img
        self.refs = refs
        self.normalization = normalization
        v = img.values
        max_ref = max(w.size for w in refs.waveforms.values())
        self.nfft = sp_fft.next_fast_len(v.shape[1] + max_ref - 1, real=True)
        self._spec = sp_fft.rfft(v, self.nfft, axis=1)
        self._line_energy = np.sum(v * v, axis=1)
        if normalization == "windowed":
            self._csum = np.concatenate([np.zeros((v.shape[0], 1)), np.cumsum(v * v, axis=1)], axis=1)
        self._cache: dict[int, LineScores] = {}

    def line_scores(self, code_id: int) -> LineScores:
        if code_id in self._cache:
            return self._cache[code_id]
        ref = self.refs.waveforms[code_id]
        m = ref.size
        n = self.img.depth_samples
        full = sp_fft.irfft(self._spec * np.conj(sp_fft.rfft(ref, self.nfft))[None, :], self.nfft, axis=1)
        e_ref = float(ref @ ref)
        rows = np.arange(full.shape[0])
        if self.normalization == "global":
            # the peak of |r| is the peak of the normalized value on each line
            mag = np.abs(full)
            pos = np.argmax(mag[:, :n], axis=1)
            peak = mag[rows, pos]
            lag = pos
            if m > 1:
                # negative lags wrap to the end of the circular result; they win ties (smaller lag)
                tail = mag[:, self.nfft - (m - 1):]
                neg = np.argmax(tail, axis=1)
                neg_peak = tail[rows, neg]
                use = neg_peak >= peak
                peak = np.where(use, neg_peak, peak)
                lag = np.where(use, neg - (m - 1), pos)
            denom = np.sqrt(self._line_energy * e_ref)
            with np.errstate(divide="ignore", invalid="ignore"):
                score = np.where(denom > 0, peak / denom, 0.0)
            out = LineScores(raw=peak, score=score, lag=lag)
        else:
            raw = np.concatenate([full[:, self.nfft - (m - 1):], full[:, :n]], axis=1) if m > 1 else full[:, :n]
            lags = np.arange(-(m - 1), n)
            lo = np.clip(lags, 0, n)
            hi = np.clip(lags + m, 0, n)
            denom = np.sqrt(np.maximum(self._csum[:, hi] - self._csum[:, lo], 0.0) * e_ref)
            with np.errstate(divide="ignore", invalid="ignore"):
                norm = np.where(denom > 0, np.abs(raw) / denom, 0.0)
            best = np.argmax(norm, axis=1)  # first maximum: smallest lag
            out = LineScores(raw=np.abs(raw[rows, best]), score=norm[rows, best], lag=lags[best])
        self._cache[code_id] = out
        return out


def _locate(img: BeamformedImage, refs: ReferenceSet, code_id: int, ls: LineScores, cfg: DetectorConfig):
    key = ls.raw if cfg.line_selection == "raw" else ls.score
    if not np.any(key > 0):
        return None
    line = int(np.argmax(key))  # first maximum: lowest line index
    score = float(ls.score[line])
    # reference sample 0 sits at emission time t0; image sample s is two-way time s / fs
    origin_time = ls.lag[line] / img.fs - refs.t0[code_id]
    axial = origin_time * img.sound_speed * 1e-3 / 2.0 - cfg.axial_offset_correction
    return line, score, axial


def detect_selected(
    img: BeamformedImage,
    code_id: int,
    refs: ReferenceSet,
    cfg: DetectorConfig = DetectorConfig(),
    correlator: Correlator | None = None,
) -> Detection | None:
    """Look for one ID; returns ``None`` when its score stays below the ON threshold."""
    if code_id not in refs:
        raise KeyError(f"no reference for id {code_id}")
    corr = correlator or Correlator(img, refs, cfg.normalization)
    found = _locate(img, refs, code_id, corr.line_scores(code_id), cfg)
    if found is None:
        return None
    line, score, axial = found
    if score < cfg.on_threshold:
        return None
    return Detection(
        id=code_id,
        lateral=float(img.line_positions[line]),
        axial=float(axial),
        score=score,
        frame_index=img.frame_index,
        line=line,
    )


def score_all(img: BeamformedImage, refs: ReferenceSet, cfg: DetectorConfig = DetectorConfig(),
              correlator: Correlator | None = None) -> dict[int, float]:
    """Selected-mode score of every ID (0 for an all-zero image)."""
    corr = correlator or Correlator(img, refs, cfg.normalization)
    out = {}
    for cid in refs.ids:
        found = _locate(img, refs, cid, corr.line_scores(cid), cfg)
        out[cid] = 0.0 if found is None else found[1]
    return out


def detect_freewheeling(
    img: BeamformedImage, refs: ReferenceSet, cfg: DetectorConfig = DetectorConfig(),
    correlator: Correlator | None = None,
) -> Detection | None:
    """Best-scoring ID above threshold; ties go to the lower ID."""
    if not refs.ids:
        raise ValueError("reference set is empty")
    corr = correlator or Correlator(img, refs, cfg.normalization)
    best = None
    for cid in refs.ids:
        det = detect_selected(img, cid, refs, cfg, corr)
        if det is not None and (best is None or det.score > best.score):
            best = det
    return best


def detect_multi(
    img: BeamformedImage, refs: ReferenceSet, cfg: DetectorConfig = DetectorConfig(),
    correlator: Correlator | None = None,
) -> list[Detection]:
    """Independent selected-mode search for every ID, then suppression of
    different-ID detections closer than ``cfg.nms_radius`` (higher score wins)."""
    if not refs.ids:
        raise ValueError("reference set is empty")
    corr = correlator or Correlator(img, refs, cfg.normalization)
    dets = [d for cid in refs.ids if (d := detect_selected(img, cid, refs, cfg, corr)) is not None]
    order = sorted(dets, key=lambda d: (-d.score, d.id))
    kept: list[Detection] = []
    for d in order:
        if all(np.hypot(d.lateral - k.lateral, d.axial - k.axial) >= cfg.nms_radius for k in kept):
            kept.append(d)
    return sorted(kept, key=lambda d: d.id)


def calibrate_axial_offset(
    scene, clip: ClipConfig, refs: ReferenceSet, aperture: int | None = DEFAULT_APERTURE, apodization: str = "none"
) -> float:
    """Axial bias of an uncorrected detection for a noise-free, jitter-free clip
    at its configured position (positive: detections land too deep)."""
    from .beamform import das_beamform, pi_sum
    from .phantom import simulate_pi_pair

    quiet = replace(clip, jitter_std=0.0, miss_probability_second_pulse=0.0)
    probe = replace(scene, clips=[quiet], scatterers=[], noise_std=0.0, warnings=[])
    pos, neg = simulate_pi_pair(probe, 0)
    img = das_beamform(pi_sum(pos, neg), probe.geometry, probe.sound_speed, aperture=aperture, apodization=apodization)
    det = detect_selected(img, quiet.id, refs, DetectorConfig(on_threshold=1e-6))
    if det is None:
        raise RuntimeError("calibration clip was not detected")
    return det.axial - quiet.position[1]


# -- detection logs ------------------------------------------------------------

LOG_KEYS = ("frame", "mode", "id", "lateral_mm", "axial_mm", "score")


def detection_record(frame: int, mode: str, det: Detection | None, **extra) -> dict:
    """JSON-lines record; a failed detection is id 0 at (0, 0) with score 0."""
    if det is None:
        rec = {"frame": frame, "mode": mode, "id": 0, "lateral_mm": 0.0, "axial_mm": 0.0, "score": 0.0}
    else:
        rec = {
            "frame": frame,
            "mode": mode,
            "id": det.id,
            "lateral_mm": round(det.lateral, 6),
            "axial_mm": round(det.axial, 6),
            "score": round(det.score, 6),
        }
    rec.update(extra)
    return rec


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), sort_keys=False)


class LogFormatError(ValueError):
    pass


def read_log(path) -> list[dict]:
    """Parse a detection log; malformed lines raise :class:`LogFormatError` naming the line."""
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogFormatError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or any(k not in rec for k in LOG_KEYS):
            raise LogFormatError(f"{path}:{lineno}: missing one of {LOG_KEYS}")
        records.append(rec)
    return records


def record_to_detection(rec: dict) -> Detection | None:
    if rec["id"] == 0:
        return None
    return Detection(id=int(rec["id"]), lateral=float(rec["lateral_mm"]), axial=float(rec["axial_mm"]),
                     score=float(rec["score"]), frame_index=int(rec["frame"]))


__all__ = [
    "Correlator",
    "Detection",
    "DetectorConfig",
    "ReferenceSet",
    "build_references",
    "calibrate_axial_offset",
    "detect_freewheeling",
    "detect_multi",
    "detect_selected",
    "detection_record",
    "read_log",
    "references_from_waveforms",
    "score_all",
]
