"""SNR, localization error, detection rate and ID-confusion statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .beamform import BeamformedImage
from .detector import Detection


class SnrUndefined(ValueError):
    """Signal-window variance does not exceed the background variance."""


@dataclass(frozen=True)
class SnrMeasurement:
    sigma2_signal_plus_noise: float
    sigma2_noise: float
    snr_db: float
    signal_line: int = -1
    noise_line: int = -1


def snr_db(sigma2_signal_plus_noise: float, sigma2_noise: float) -> float:
    """``10 log10(s2_sn / s2_n - 1)``."""
    if not sigma2_noise > 0 or not sigma2_signal_plus_noise > sigma2_noise:
        raise SnrUndefined(
            f"SNR undefined for signal variance {sigma2_signal_plus_noise!r} and noise variance {sigma2_noise!r}"
        )
    return 10.0 * math.log10(sigma2_signal_plus_noise / sigma2_noise - 1.0)


def noise_line_for(signal_line: int, n_lines: int, lateral_offset: int = 20) -> int:
    """Shift toward the image centre; if that would cross the centre, shift away instead."""
    center = n_lines / 2.0
    step = lateral_offset if signal_line < center else -lateral_offset
    cand = signal_line + step
    crosses = (signal_line - center) * (cand - center) < 0
    if crosses:
        cand = signal_line - step
    if not 0 <= cand < n_lines:
        raise ValueError("background line falls outside the image")
    return int(cand)


def compute_snr(
    frames: list[BeamformedImage] | list[np.ndarray],
    signal_line: int,
    signal_axial_range: tuple[int, int],
    lateral_offset: int = 20,
) -> SnrMeasurement:
    """SNR of the frame-averaged image: variance on ``signal_line`` over the
    sample range vs. the same range on a line ``lateral_offset`` lines away."""
    if not frames:
        raise ValueError("need at least one frame")
    stack = np.stack([f.values if isinstance(f, BeamformedImage) else np.asarray(f) for f in frames])
    avg = stack.mean(axis=0)
    n_lines, n_s = avg.shape
    a, b = signal_axial_range
    if not (0 <= a < b <= n_s) or not 0 <= signal_line < n_lines:
        raise ValueError("signal line or axial range out of bounds")
    nl = noise_line_for(signal_line, n_lines, lateral_offset)
    s2 = float(np.var(avg[signal_line, a:b]))
    n2 = float(np.var(avg[nl, a:b]))
    return SnrMeasurement(s2, n2, snr_db(s2, n2), signal_line, nl)


def signal_window(img: BeamformedImage, position: tuple[float, float], window_mm: float) -> tuple[int, tuple[int, int]]:
    """Line nearest the clip and the depth-sample range starting at its depth.

    The emission is one-way, so on a two-way depth axis it begins at the
    sample of the clip's own depth and trails deeper.
    """
    x, z = position
    line = int(np.argmin(np.abs(img.line_positions - x)))
    a = int(round(z / img.depth_step))
    b = a + max(1, int(round(window_mm / img.depth_step)))
    if not 0 <= a < b <= img.depth_samples:
        raise ValueError("signal window falls outside the image")
    return line, (a, b)


@dataclass
class TrialReport:
    id: int
    depth_mm: float
    n_frames: int
    detections: int
    detection_rate: float
    mean_error_mm: float | None
    error_variance_mm2: float | None
    confusion_row: dict[int, int] = field(default_factory=dict)
    failed: int = 0
    trial: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "depth_mm": self.depth_mm,
            "trial": self.trial,
            "n_frames": self.n_frames,
            "detections": self.detections,
            "detection_rate": self.detection_rate,
            "mean_error_mm": self.mean_error_mm,
            "error_variance_mm2": self.error_variance_mm2,
            "confusion_row": {str(k): v for k, v in sorted(self.confusion_row.items())},
            "failed": self.failed,
        }


def error_stats(
    detections: list[Detection | None],
    ground_truth: tuple[float, float],
) -> dict:
    """Detection rate plus mean and population variance of Euclidean error
    over successful detections; both are ``None`` when nothing was detected."""
    if len(detections) < 1:
        raise ValueError("need at least one frame")
    gx, gz = ground_truth
    errs = np.array([math.hypot(d.lateral - gx, d.axial - gz) for d in detections if d is not None])
    n = len(detections)
    out = {"n_frames": n, "detections": int(errs.size), "detection_rate": errs.size / n}
    if errs.size:
        out["mean_error_mm"] = float(errs.mean())
        out["error_variance_mm2"] = float(errs.var())
    else:
        out["mean_error_mm"] = None
        out["error_variance_mm2"] = None
    return out


def confusion_histogram(calculated_ids: list[int | None], transmitted_id: int, n_ids: int = 8) -> dict:
    """Counts per calculated ID (1..n_ids) among detections; failures (None or 0) are tallied apart.

    Returns ``{"transmitted_id", "counts": {id: count}, "failed"}``.
    """
    counts = {i: 0 for i in range(1, n_ids + 1)}
    failed = 0
    for cid in calculated_ids:
        if cid is None or cid == 0:
            failed += 1
        else:
            counts[int(cid)] = counts.get(int(cid), 0) + 1
    return {"transmitted_id": transmitted_id, "counts": counts, "failed": failed}


def trial_report(
    detections: list[Detection | None],
    transmitted_id: int,
    ground_truth: tuple[float, float],
    depth_mm: float | None = None,
    trial: int = 0,
    n_ids: int = 8,
    localize_any_id: bool = False,
) -> TrialReport:
    """Trial statistics. A frame counts as detected when an ID was reported;
    with ``localize_any_id`` false only detections of the transmitted ID count
    toward error and rate (selected-ID semantics)."""
    hist = confusion_histogram([d.id if d else None for d in detections], transmitted_id, n_ids)
    used = [d if d is not None and (localize_any_id or d.id == transmitted_id) else None for d in detections]
    st = error_stats(used, ground_truth)
    return TrialReport(
        id=transmitted_id,
        depth_mm=ground_truth[1] if depth_mm is None else depth_mm,
        n_frames=st["n_frames"],
        detections=st["detections"],
        detection_rate=st["detection_rate"],
        mean_error_mm=st["mean_error_mm"],
        error_variance_mm2=st["error_variance_mm2"],
        confusion_row=hist["counts"],
        failed=hist["failed"],
        trial=trial,
    )


def aggregate(reports: list[TrialReport]) -> dict:
    """Unweighted mean of per-trial statistics over trials with at least one
    detection, plus the detection rate pooled over all frames."""
    if not reports:
        raise ValueError("need at least one report")
    with_det = [r for r in reports if r.detections > 0]
    total_frames = sum(r.n_frames for r in reports)
    total_det = sum(r.detections for r in reports)
    mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
    return {
        "n_trials": len(reports),
        "n_trials_with_detections": len(with_det),
        "n_frames": total_frames,
        "detections": total_det,
        "detection_rate": total_det / total_frames,
        "mean_detection_rate": float(np.mean([r.detection_rate for r in reports])),
        "mean_error_mm": mean([r.mean_error_mm for r in with_det]),
        "error_variance_mm2": mean([r.error_variance_mm2 for r in with_det]),
    }


# -- serialization ------------------------------------------------------------

LOCALIZATION_COLUMNS = (
    "id", "depth_mm", "n_trials", "n_trials_with_detections", "n_frames", "detections",
    "detection_rate", "mean_error_mm", "error_variance_mm2",
)
SNR_COLUMNS = ("id", "depth_mm", "n_trials", "sigma2_signal_plus_noise", "sigma2_noise", "snr_db", "snr_db_averaged")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def to_csv(rows: list[dict], columns) -> str:
    """CSV with fixed columns; undefined statistics are written as empty cells."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def from_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        out = {}
        for k, v in r.items():
            if v == "":
                out[k] = None
                continue
            try:
                out[k] = int(v)
            except ValueError:
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
        rows.append(out)
    return rows


def to_json(obj) -> str:
    """JSON with ``null`` for undefined statistics (never 0)."""
    if isinstance(obj, TrialReport):
        obj = obj.to_dict()
    elif isinstance(obj, list):
        obj = [o.to_dict() if isinstance(o, TrialReport) else o for o in obj]
    return json.dumps(obj, indent=2, sort_keys=True)
