"""Monte-Carlo experiment runner: calibration, per-trial simulation and detection,
reports and threshold sweeps.

A run directory holds::

    config.json              resolved configuration (calibrated constants included)
    metadata.json            timings and throughput (the only non-deterministic file)
    logs/<mode>/<task>.jsonl one detection record per frame
    snr/<task>.json          per-trial SNR summary
    frames/<task>/           optional RF and beamformed frames (``save_rf``)

``<task>`` is ``id<ID>_d<depth>_t<trial>``. Each task writes its files
atomically, so an interrupted run resumes by skipping finished tasks.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .beamform import DEFAULT_APERTURE, BeamformedImage, das_beamform, envelope_bmode, pi_diff, pi_sum
from .clip import ClipConfig
from .codebook import Codebook, load_codebook
from .defaults import default_codebook
from .detector import (
    Correlator,
    DetectorConfig,
    ReferenceSet,
    build_references,
    calibrate_axial_offset,
    detect_freewheeling,
    detect_multi,
    detect_selected,
    detection_record,
    dumps_record,
    read_log,
    record_to_detection,
    score_all,
)
from .metrics import (
    LOCALIZATION_COLUMNS,
    SNR_COLUMNS,
    aggregate,
    confusion_histogram,
    noise_line_for,
    signal_window,
    to_csv,
    trial_report,
)
from .phantom import Scene, linear_echoes, load_scene, make_phantom, simulate_pi_pair
from .rfio import load_image, save_image, save_rf

log = logging.getLogger(__name__)

MODES = ("selected", "freewheel", "multi")
# mean of the per-ID SNR targets at each depth
DEFAULT_SNR_TARGETS = {12.0: 8.90, 23.0: 13.83}
_CALIBRATION_TRIAL = 1_000_000
_SNR_FLOOR_DB = -30.0


class ConfigError(ValueError):
    """Configuration could not be read or is invalid (CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    scene: str | None = None
    codebook: str | None = None
    ids: list[int] = field(default_factory=lambda: list(range(1, 9)))
    depths_mm: list[float] = field(default_factory=lambda: [12.0, 23.0])
    lateral_mm: float = 0.0
    frames_per_trial: int = 100
    n_trials: int = 3
    modes: list[str] = field(default_factory=lambda: ["selected"])
    detector: dict = field(default_factory=dict)
    output_dir: str = "usid-run"
    rng_seed: int = 42
    snr_targets_db: list[float] | None = None
    noise_std: list[float] | None = None
    calibration_frames: int = 8
    snr_window_mm: float = 2.0
    snr_lateral_offset: int = 20
    aperture: int | None = DEFAULT_APERTURE
    apodization: str = "none"
    phantom_density: float = 10.0
    workers: int = 1
    save_rf: bool = False

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        self.depths_mm = [float(d) for d in self.depths_mm]
        if not self.ids:
            raise ConfigError("ids must be nonempty")
        if self.frames_per_trial < 1 or self.n_trials < 1:
            raise ConfigError("frames_per_trial and n_trials must be >= 1")
        if not self.depths_mm or any(d <= 0 for d in self.depths_mm):
            raise ConfigError("depths_mm must be positive")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a nonempty subset of {MODES}")
        for name in ("snr_targets_db", "noise_std"):
            v = getattr(self, name)
            if v is not None and len(v) != len(self.depths_mm):
                raise ConfigError(f"{name} needs one value per depth")
        if self.noise_std is not None and any(s < 0 for s in self.noise_std):
            raise ConfigError("noise_std must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            DetectorConfig(**self.detector)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"detector: {exc}") from exc

    def snr_targets(self) -> list[float]:
        if self.snr_targets_db is not None:
            return [float(t) for t in self.snr_targets_db]
        try:
            return [DEFAULT_SNR_TARGETS[d] for d in self.depths_mm]
        except KeyError as exc:
            raise ConfigError(f"no default SNR target for depth {exc.args[0]} mm; set snr_targets_db") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; relative file references resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key in ("scene", "codebook"):
        if d.get(key):
            d[key] = str((path.parent / d[key]).resolve())
    return ExperimentConfig.from_dict(d)


# -- setup ---------------------------------------------------------------------

@dataclass
class Context:
    """Everything a worker needs to run one task; picklable."""

    cfg: ExperimentConfig
    template: Scene
    clip_template: ClipConfig
    codebook: Codebook
    refs: ReferenceSet
    detector: DetectorConfig


def _codebook(cfg: ExperimentConfig) -> Codebook:
    if cfg.codebook is None:
        return default_codebook()
    try:
        return load_codebook(cfg.codebook)
    except OSError as exc:
        raise ConfigError(f"{cfg.codebook}: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(f"{cfg.codebook}: {exc}") from exc


def _template(cfg: ExperimentConfig, codebook: Codebook) -> tuple[Scene, ClipConfig]:
    """Scene with its clips removed, plus the clip whose settings every test clip copies."""
    if cfg.scene is None:
        scene = Scene(scatterers=make_phantom(cfg.rng_seed, cfg.phantom_density), codebook=codebook)
    else:
        try:
            scene = load_scene(cfg.scene, codebook=codebook)
        except OSError as exc:
            raise ConfigError(f"{cfg.scene}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg.scene}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        except ValueError as exc:
            raise ConfigError(f"{cfg.scene}: {exc}") from exc
    clip = scene.clips[0] if scene.clips else ClipConfig(id=cfg.ids[0], position=(cfg.lateral_mm, cfg.depths_mm[0]))
    missing = [i for i in cfg.ids if i not in codebook.ids]
    if missing:
        raise ConfigError(f"ids {missing} are not in the codebook")
    return replace(scene, clips=[], codebook=codebook, noise_std=0.0, warnings=[]), clip


def task_seed(seed: int, code_id: int, depth_mm: float, trial: int) -> int:
    """Scene seed for one (id, depth, trial); frames and polarities are keyed below it."""
    ss = np.random.SeedSequence([int(seed), int(code_id), int(round(depth_mm * 1000)), int(trial)])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def trial_scene(ctx: Context, code_id: int, depth_mm: float, trial: int, noise_std: float) -> Scene:
    clip = replace(ctx.clip_template, id=code_id, position=(ctx.cfg.lateral_mm, depth_mm))
    return replace(ctx.template, clips=[clip], noise_std=noise_std,
                   rng_seed=task_seed(ctx.cfg.rng_seed, code_id, depth_mm, trial), warnings=[])


def beamform(cfg: ExperimentConfig, scene: Scene, rf, **kw) -> BeamformedImage:
    return das_beamform(rf, scene.geometry, scene.sound_speed, aperture=cfg.aperture, apodization=cfg.apodization, **kw)


def beamformed_pair(cfg: ExperimentConfig, scene: Scene, frame: int, echoes=None):
    """Summed-PI image of pair ``frame`` plus its two RF frames."""
    pos, neg = simulate_pi_pair(scene, frame, echoes=echoes)
    return replace(beamform(cfg, scene, pi_sum(pos, neg)), frame_index=frame), pos, neg


# -- noise calibration ---------------------------------------------------------

def _variance_terms(clean: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Coefficients of ``var(clean + s * noise) = a + 2 b s + c s^2`` along the last axis."""
    cc = clean - clean.mean(axis=-1, keepdims=True)
    nn = noise - noise.mean(axis=-1, keepdims=True)
    n = clean.shape[-1]
    return np.stack([np.sum(cc * cc, -1) / n, np.sum(cc * nn, -1) / n, np.sum(nn * nn, -1) / n], axis=-1)


def _mean_frame_snr(sig_terms: np.ndarray, bg_terms: np.ndarray, sigma: float) -> float:
    poly = np.array([1.0, 2.0 * sigma, sigma * sigma])
    s2 = sig_terms @ poly
    n2 = bg_terms @ poly
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = s2 / n2 - 1.0
        db = np.where((n2 > 0) & (ratio > 0), 10.0 * np.log10(np.where(ratio > 0, ratio, 1.0)), _SNR_FLOOR_DB)
    return float(np.mean(np.maximum(db, _SNR_FLOOR_DB)))


def calibrate_noise(ctx: Context) -> list[float]:
    """Noise std per depth such that the mean single-frame SNR hits the target.

    For each depth, ``calibration_frames`` noise-free frames per ID and as many
    noise-only frames are beamformed on seeds disjoint from the trials. Both
    variances in the SNR are exact quadratics in the noise std, so the solve
    needs no further simulation.
    """
    cfg = ctx.cfg
    k = cfg.calibration_frames
    quiet = replace(ctx.template, clips=[], scatterers=[], noise_std=1.0,
                    rng_seed=task_seed(cfg.rng_seed, 0, 0.0, _CALIBRATION_TRIAL))
    noise_imgs = [beamformed_pair(cfg, quiet, f)[0].values for f in range(k * len(cfg.ids))]
    out = []
    for depth, target in zip(cfg.depths_mm, cfg.snr_targets()):
        sig, bg = [], []
        n = 0
        for cid in cfg.ids:
            scene = trial_scene(ctx, cid, depth, _CALIBRATION_TRIAL, 0.0)
            echoes = linear_echoes(scene)
            for f in range(k):
                img, _, _ = beamformed_pair(cfg, scene, f, echoes)
                line, (a, b) = signal_window(img, scene.clips[0].position, cfg.snr_window_mm)
                nl = noise_line_for(line, img.n_lines, cfg.snr_lateral_offset)
                noise = noise_imgs[n]
                n += 1
                sig.append(_variance_terms(img.values[line, a:b], noise[line, a:b]))
                bg.append(_variance_terms(img.values[nl, a:b], noise[nl, a:b]))
        sig, bg = np.array(sig), np.array(bg)

        def excess(log_sigma):
            return _mean_frame_snr(sig, bg, math.exp(log_sigma)) - target

        scale = math.sqrt(float(np.mean(sig[:, 0]))) or 1.0
        lo, hi = math.log(scale * 1e-6), math.log(scale)
        if excess(lo) < 0:
            raise ValueError(f"noise-free SNR at {depth} mm is below the {target} dB target")
        while excess(hi) > 0:
            hi += math.log(10.0)
        sigma = math.exp(brentq(excess, lo, hi, xtol=1e-10))
        log.info("depth %.1f mm: noise_std %.6g for %.2f dB", depth, sigma, target)
        out.append(sigma)
    return out


def prepare(cfg: ExperimentConfig, calibrate: bool = True) -> Context:
    """Load inputs and fill in calibrated constants (axial offset, noise std)."""
    cb = _codebook(cfg)
    template, clip = _template(cfg, cb)
    refs = build_references(cb, clip, template.fs)
    det = dict(cfg.detector)
    if "axial_offset_correction" not in det:
        probe_depth = float(np.mean(cfg.depths_mm))
        probe = replace(clip, id=cfg.ids[0], position=(cfg.lateral_mm, probe_depth))
        det["axial_offset_correction"] = round(calibrate_axial_offset(template, probe, refs, cfg.aperture, cfg.apodization), 9)
    cfg = replace(cfg, detector=det)
    ctx = Context(cfg, template, clip, cb, refs, DetectorConfig(**det))
    if cfg.noise_std is None and calibrate:
        ctx.cfg = replace(cfg, noise_std=[round(s, 12) for s in calibrate_noise(ctx)])
    return ctx


# -- running -------------------------------------------------------------------

def task_name(code_id: int, depth_mm: float, trial: int) -> str:
    return f"id{code_id}_d{depth_mm:g}_t{trial}"


def _detect(mode: str, img: BeamformedImage, code_id: int, ctx: Context, corr: Correlator) -> dict:
    if mode == "selected":
        return detection_record(img.frame_index, mode, detect_selected(img, code_id, ctx.refs, ctx.detector, corr))
    if mode == "freewheel":
        return detection_record(img.frame_index, mode, detect_freewheeling(img, ctx.refs, ctx.detector, corr))
    dets = detect_multi(img, ctx.refs, ctx.detector, corr)
    primary = next((d for d in dets if d.id == code_id), max(dets, key=lambda d: (d.score, -d.id), default=None))
    rec = detection_record(img.frame_index, mode, primary)
    rec["detections"] = [[d.id, round(d.lateral, 6), round(d.axial, 6), round(d.score, 6)] for d in dets]
    return rec


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_task(ctx: Context, code_id: int, depth_index: int, trial: int, out: Path) -> dict:
    """Simulate, beamform and detect every frame of one trial; write its logs and SNR summary."""
    cfg = ctx.cfg
    depth = cfg.depths_mm[depth_index]
    scene = trial_scene(ctx, code_id, depth, trial, cfg.noise_std[depth_index])
    echoes = linear_echoes(scene)
    name = task_name(code_id, depth, trial)
    records = {m: [] for m in cfg.modes}
    frame_dir = out / "frames" / name
    if cfg.save_rf:
        frame_dir.mkdir(parents=True, exist_ok=True)
    acc = None
    s2, n2, snrs = [], [], []
    t_detect = 0.0
    for f in range(cfg.frames_per_trial):
        pos, neg = simulate_pi_pair(scene, f, echoes=echoes)
        t0 = time.perf_counter()
        img = replace(beamform(cfg, scene, pi_sum(pos, neg)), frame_index=f)
        corr = Correlator(img, ctx.refs, ctx.detector.normalization)
        for m in cfg.modes:
            rec = _detect(m, img, code_id, ctx, corr)
            rec.update(tx_id=code_id, depth_mm=depth, trial=trial)
            records[m].append(rec)
        t_detect += time.perf_counter() - t0
        line, (a, b) = signal_window(img, scene.clips[0].position, cfg.snr_window_mm)
        nl = noise_line_for(line, img.n_lines, cfg.snr_lateral_offset)
        rows = img.values[[line, nl], a:b]
        acc = rows.copy() if acc is None else acc + rows
        vs, vn = float(np.var(rows[0])), float(np.var(rows[1]))
        s2.append(vs)
        n2.append(vn)
        if vn > 0 and vs > vn:
            snrs.append(10.0 * math.log10(vs / vn - 1.0))
        if cfg.save_rf:
            save_rf(pos, frame_dir / f"f{f:04d}_pos.usrf")
            save_rf(neg, frame_dir / f"f{f:04d}_neg.usrf")
            save_image(img, frame_dir / f"f{f:04d}_sum.usbf")
    acc /= cfg.frames_per_trial
    va, vb = float(np.var(acc[0])), float(np.var(acc[1]))
    summary = {
        "id": code_id,
        "depth_mm": depth,
        "trial": trial,
        "n_frames": cfg.frames_per_trial,
        "sigma2_signal_plus_noise": float(np.mean(s2)),
        "sigma2_noise": float(np.mean(n2)),
        "snr_db": float(np.mean(snrs)) if snrs else None,
        "snr_undefined_frames": cfg.frames_per_trial - len(snrs),
        "snr_db_averaged": 10.0 * math.log10(va / vb - 1.0) if vb > 0 and va > vb else None,
        "signal_line": line,
        "noise_line": nl,
        "axial_range": [a, b],
    }
    for m, recs in records.items():
        d = out / "logs" / m
        d.mkdir(parents=True, exist_ok=True)
        _atomic_write(d / f"{name}.jsonl", "".join(dumps_record(r) + "\n" for r in recs))
    (out / "snr").mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "snr" / f"{name}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"task": name, "detect_seconds": t_detect, "frames": cfg.frames_per_trial}


def _done(cfg: ExperimentConfig, out: Path, name: str) -> bool:
    paths = [out / "logs" / m / f"{name}.jsonl" for m in cfg.modes] + [out / "snr" / f"{name}.json"]
    return all(p.exists() for p in paths)


def _worker(args):
    ctx, code_id, di, trial, out = args
    return run_task(ctx, code_id, di, trial, Path(out))


def _same_run(saved: ExperimentConfig, cfg: ExperimentConfig) -> bool:
    """Whether ``cfg`` describes the run recorded in ``saved`` (calibrated values aside)."""
    a, b = saved.to_dict(), cfg.to_dict()
    for d in (a, b):
        d.pop("workers")
        d.pop("output_dir")
    if b["noise_std"] is None:
        a.pop("noise_std")
        b.pop("noise_std")
    if "axial_offset_correction" not in b["detector"]:
        a["detector"].pop("axial_offset_correction", None)
    return a == b


def run_experiment(cfg: ExperimentConfig, progress=None) -> Path:
    """Run every (id, depth, trial) task not already finished; returns the output directory.

    An existing ``config.json`` in the output directory must match the resolved
    configuration, so a resumed run cannot mix settings.
    """
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"{out}: {exc.strerror}") from exc
    started = time.time()
    cfg_path = out / "config.json"
    if cfg_path.exists():
        saved = ExperimentConfig.from_dict(json.loads(cfg_path.read_text()))
        if not _same_run(saved, cfg):
            raise ConfigError(f"{cfg_path} holds a different configuration; use a fresh output directory")
        cfg = replace(cfg, noise_std=saved.noise_std, detector=saved.detector)
    ctx = prepare(cfg)
    cfg = ctx.cfg
    _atomic_write(cfg_path, json.dumps(replace(cfg, workers=1).to_dict(), indent=2, sort_keys=True) + "\n")
    tasks = [(cid, di, t) for di in range(len(cfg.depths_mm)) for cid in cfg.ids for t in range(cfg.n_trials)]
    todo = [t for t in tasks if not _done(cfg, out, task_name(t[0], cfg.depths_mm[t[1]], t[2]))]
    log.info("%d of %d tasks to run", len(todo), len(tasks))
    results = []
    jobs = [(ctx, cid, di, t, str(out)) for cid, di, t in todo]
    if cfg.workers == 1:
        it = map(_worker, jobs)
        for r in it:
            results.append(r)
            if progress:
                progress(r)
    else:
        # fork is unsafe once numba's threading layer is up
        spawn = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=spawn) as pool:
            for r in pool.map(_worker, jobs):
                results.append(r)
                if progress:
                    progress(r)
    frames = sum(r["frames"] for r in results)
    det_s = sum(r["detect_seconds"] for r in results)
    meta = {
        "started_unix": started,
        "finished_unix": time.time(),
        "wall_seconds": time.time() - started,
        "tasks_run": len(results),
        "frames_run": frames,
        "detect_ms_per_frame": 1000.0 * det_s / frames if frames else None,
        "warnings": list(ctx.template.warnings),
    }
    _atomic_write(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


# -- reporting -----------------------------------------------------------------

def _load_run(out: Path) -> ExperimentConfig:
    path = out / "config.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; is {out} a run directory?")
    return load_config(path)


def load_logs(out: Path, mode: str) -> dict[tuple[int, float, int], list[dict]]:
    d = out / "logs" / mode
    logs = {}
    for p in sorted(d.glob("*.jsonl")) if d.is_dir() else []:
        recs = read_log(p)
        if recs:
            r = recs[0]
            logs[(int(r["tx_id"]), float(r["depth_mm"]), int(r["trial"]))] = recs
    return logs


def localization_rows(cfg: ExperimentConfig, logs: dict) -> list[dict]:
    rows = []
    for depth in cfg.depths_mm:
        for cid in cfg.ids:
            trials = [logs[k] for k in sorted(logs) if k[0] == cid and k[1] == depth]
            if not trials:
                continue
            reps = [trial_report([record_to_detection(r) for r in recs], cid, (cfg.lateral_mm, depth),
                                 depth, n_ids=max(cfg.ids + [8]), localize_any_id=False)
                    for recs in trials]
            rows.append({"id": cid, "depth_mm": depth, **aggregate(reps)})
    return rows


def snr_rows(cfg: ExperimentConfig, out: Path) -> list[dict]:
    by_key: dict[tuple[int, float], list[dict]] = {}
    for p in sorted((out / "snr").glob("*.json")):
        s = json.loads(p.read_text())
        by_key.setdefault((s["id"], s["depth_mm"]), []).append(s)
    rows = []
    for depth in cfg.depths_mm:
        for cid in cfg.ids:
            ss = by_key.get((cid, depth))
            if not ss:
                continue

            def mean(key):
                v = [s[key] for s in ss if s[key] is not None]
                return float(np.mean(v)) if v else None

            rows.append({
                "id": cid, "depth_mm": depth, "n_trials": len(ss),
                "sigma2_signal_plus_noise": mean("sigma2_signal_plus_noise"),
                "sigma2_noise": mean("sigma2_noise"),
                "snr_db": mean("snr_db"),
                "snr_db_averaged": mean("snr_db_averaged"),
            })
    return rows


def confusion_rows(cfg: ExperimentConfig, logs: dict) -> list[dict]:
    n_ids = max(cfg.ids + [8])
    rows = []
    for depth in cfg.depths_mm:
        for cid in cfg.ids:
            calc = [r["id"] for k in sorted(logs) if k[0] == cid and k[1] == depth for r in logs[k]]
            if not calc:
                continue
            h = confusion_histogram(calc, cid, n_ids)
            row = {"depth_mm": depth, "transmitted_id": cid, "failed": h["failed"]}
            row.update({f"calc_{i}": h["counts"][i] for i in range(1, n_ids + 1)})
            rows.append(row)
    return rows


def report(out, plots: bool = True) -> dict[str, Path]:
    """Write the SNR, localization and confusion tables (CSV) and plots (PNG)."""
    out = Path(out)
    cfg = _load_run(out)
    mode = cfg.modes[0]
    logs = load_logs(out, mode)
    if not logs:
        raise ConfigError(f"no detection logs under {out / 'logs' / mode}")
    conf_mode = "freewheel" if "freewheel" in cfg.modes else mode
    conf_logs = logs if conf_mode == mode else load_logs(out, conf_mode)
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    files = {}
    loc = localization_rows(cfg, logs)
    files["localization"] = rep / "localization.csv"
    files["localization"].write_text(to_csv([{**r, "mode": mode} for r in loc], LOCALIZATION_COLUMNS + ("mode",)))
    files["snr"] = rep / "snr.csv"
    files["snr"].write_text(to_csv(snr_rows(cfg, out), SNR_COLUMNS))
    conf = confusion_rows(cfg, conf_logs)
    n_ids = max(cfg.ids + [8])
    files["confusion"] = rep / "confusion.csv"
    files["confusion"].write_text(to_csv(
        [{**r, "mode": conf_mode} for r in conf],
        ("mode", "depth_mm", "transmitted_id") + tuple(f"calc_{i}" for i in range(1, n_ids + 1)) + ("failed",),
    ))
    summary = aggregate([
        trial_report([record_to_detection(r) for r in recs], k[0], (cfg.lateral_mm, k[1]), k[1], n_ids=n_ids)
        for k, recs in sorted(logs.items())
    ])
    summary["mode"] = mode
    files["summary"] = rep / "summary.json"
    files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if plots:
        files.update(_plots(cfg, out, rep, conf, logs, n_ids))
    return files


def _plots(cfg, out: Path, rep: Path, conf: list[dict], logs: dict, n_ids: int) -> dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = {}
    depths = cfg.depths_mm
    fig, axes = plt.subplots(1, len(depths), figsize=(4.5 * len(depths), 4), squeeze=False)
    for ax, depth in zip(axes[0], depths):
        rows = [r for r in conf if r["depth_mm"] == depth]
        mat = np.array([[r[f"calc_{i}"] for i in range(1, n_ids + 1)] + [r["failed"]] for r in rows])
        if mat.size:
            ax.imshow(mat, cmap="viridis", aspect="auto")
            for (i, j), v in np.ndenumerate(mat):
                ax.text(j, i, str(v), ha="center", va="center", color="w", fontsize=7)
        ax.set_xticks(range(n_ids + 1), [str(i) for i in range(1, n_ids + 1)] + ["none"])
        ax.set_yticks(range(len(rows)), [str(r["transmitted_id"]) for r in rows])
        n = int(mat.sum()) if mat.size else 0
        ax.set_title(f"{depth:g} mm (n={n})")
        ax.set_xlabel("calculated ID")
        ax.set_ylabel("transmitted ID")
    fig.tight_layout()
    files["confusion_png"] = rep / "confusion.png"
    fig.savefig(files["confusion_png"], dpi=110)
    plt.close(fig)

    # detection heat map on a tissue background (difference image cancels the clip)
    ctx = prepare(cfg, calibrate=False)
    clips = [replace(ctx.clip_template, id=cfg.ids[0], position=(cfg.lateral_mm, d)) for d in depths]
    scene = replace(ctx.template, clips=clips, noise_std=0.0)
    pos, neg = simulate_pi_pair(scene, 0)
    bg = beamform(cfg, scene, pi_diff(pos, neg), source_kind="subtracted")
    bmode = envelope_bmode(bg, 50.0)
    x = bg.line_positions
    z = bg.depths
    pts = np.array([[r["lateral_mm"], r["axial_mm"]] for recs in logs.values() for r in recs if r["id"] != 0])
    fig, ax = plt.subplots(figsize=(5, 6))
    ax.imshow(bmode.T, cmap="gray", extent=(x[0], x[-1], z[-1], z[0]), aspect="equal")
    if len(pts):
        zmax = max(depths) + 10.0
        h, xe, ze = np.histogram2d(pts[:, 0], pts[:, 1], bins=(64, 128), range=((x[0], x[-1]), (0, zmax)))
        h = np.ma.masked_equal(h, 0)
        ax.pcolormesh(xe, ze, h.T, cmap="hot", alpha=0.8, shading="flat")
    for d in depths:
        ax.plot(cfg.lateral_mm, d, "c+", ms=12, mew=1.5)
    ax.set_ylim(max(depths) + 10.0, 0)
    ax.set_xlabel("lateral (mm)")
    ax.set_ylabel("depth (mm)")
    ax.set_title(f"detections (n={len(pts)})")
    fig.tight_layout()
    files["heatmap_png"] = rep / "heatmap.png"
    fig.savefig(files["heatmap_png"], dpi=110)
    plt.close(fig)
    return files


# -- threshold sweep -----------------------------------------------------------

DEFAULT_SWEEP = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _stored_images(out: Path, name: str) -> list[BeamformedImage] | None:
    d = out / "frames" / name
    paths = sorted(d.glob("f*_sum.usbf")) if d.is_dir() else []
    return [load_image(p) for p in paths] or None


def sweep(out, thresholds=DEFAULT_SWEEP, mode: str | None = None, max_frames: int | None = None) -> list[dict]:
    """Detection and false-ID rates over a threshold grid.

    Uses stored beamformed frames when the run saved them, otherwise
    regenerates the run's frames from its seeds. Per frame and ID the
    selected-mode score is computed once; detection at threshold ``t`` is
    then ``score >= t``, which makes every rate nonincreasing in ``t``.

    ``detection_rate`` counts frames where the transmitted ID is reported
    (for freewheel: is the top ID above threshold); ``false_id_rate`` counts
    frames where some other ID would be reported.
    """
    out = Path(out)
    cfg = _load_run(out)
    mode = mode or cfg.modes[0]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    ctx = prepare(cfg, calibrate=False)
    scores = []
    for di, depth in enumerate(cfg.depths_mm):
        for cid in cfg.ids:
            for t in range(cfg.n_trials):
                n = cfg.frames_per_trial if max_frames is None else min(max_frames, cfg.frames_per_trial)
                imgs = _stored_images(out, task_name(cid, depth, t))
                if imgs is None:
                    scene = trial_scene(ctx, cid, depth, t, cfg.noise_std[di])
                    echoes = linear_echoes(scene)
                    imgs = (beamformed_pair(cfg, scene, f, echoes)[0] for f in range(n))
                for img in list(imgs)[:n]:
                    s = score_all(img, ctx.refs, ctx.detector)
                    scores.append((cid, s))
    rows = []
    for th in thresholds:
        det = wrong = 0
        for cid, s in scores:
            others = max((v for k, v in s.items() if k != cid), default=0.0)
            if mode == "freewheel":
                best = min(s, key=lambda k: (-s[k], k))
                if s[best] >= th:
                    det += best == cid
                    wrong += best != cid
            else:
                det += s[cid] >= th
                wrong += others >= th
        n = len(scores)
        rows.append({"threshold": th, "mode": mode, "n_frames": n,
                     "detection_rate": det / n if n else None, "false_id_rate": wrong / n if n else None})
    return rows


SWEEP_COLUMNS = ("threshold", "mode", "n_frames", "detection_rate", "false_id_rate")
