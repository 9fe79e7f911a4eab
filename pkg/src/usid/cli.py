"""Command-line entry point: ``usid <verb> [options]``.

Verbs: ``gen-codebook``, ``validate``, ``run``, ``report``, ``sweep``.
Exit status is 0 on success, 1 when a validation fails and 2 on I/O or
configuration errors. Machine-readable output goes to stdout or files;
progress and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .codebook import CodebookError, load_codebook, save_codebook, validate_codebook

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

log = logging.getLogger("usid")


def _ids(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _codebook_arg(args):
    from .defaults import default_codebook

    if args.codebook:
        return load_codebook(args.codebook)
    if args.config:
        from .pipeline import load_config

        cfg = load_config(args.config)
        if cfg.codebook:
            return load_codebook(cfg.codebook)
    return default_codebook()


def cmd_gen_codebook(args) -> int:
    from .defaults import DEFAULT_SEED, make_default_codebook

    seed = DEFAULT_SEED if args.seed is None else args.seed
    out = Path(args.out or "codebook.txt")
    if out.is_dir():
        out = out / "codebook.txt"
    try:
        cb, shaped = make_default_codebook(args.n_codes, seed, args.refine_iterations)
    except CodebookError as exc:
        print(f"codebook generation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    rep = validate_codebook(cb, args.threshold)
    print(rep.format())
    print(f"shaped-waveform separation {shaped:.6f}")
    try:
        save_codebook(cb, out)
    except OSError as exc:
        print(f"cannot write {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK if rep.passed else EXIT_VALIDATION


def cmd_validate(args) -> int:
    cb = _codebook_arg(args)
    rep = validate_codebook(cb, args.threshold)
    print(rep.format())
    return EXIT_OK if rep.passed else EXIT_VALIDATION


def _experiment(args):
    from .pipeline import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["rng_seed"] = args.seed
    if args.mode:
        over["modes"] = [args.mode]
    if getattr(args, "id", None):
        over["ids"] = args.id
    if getattr(args, "depths", None):
        over["depths_mm"] = args.depths
        if cfg.snr_targets_db is not None or cfg.noise_std is not None:
            raise ValueError("--depths cannot be combined with per-depth values in the config")
    if getattr(args, "frames", None):
        over["frames_per_trial"] = args.frames
    if getattr(args, "trials", None):
        over["n_trials"] = args.trials
    if args.threshold is not None:
        over["detector"] = {**cfg.detector, "on_threshold": args.threshold}
    if getattr(args, "save_rf", False):
        over["save_rf"] = True
    if getattr(args, "workers", None):
        over["workers"] = args.workers
    if args.out:
        over["output_dir"] = args.out
    d = cfg.to_dict()
    d.update(over)
    return ExperimentConfig.from_dict(d)


def cmd_run(args) -> int:
    from .pipeline import run_experiment

    cfg = _experiment(args)
    total = len(cfg.ids) * len(cfg.depths_mm) * cfg.n_trials
    done = [0]

    def progress(r):
        done[0] += 1
        log.info("[%d/%d] %s", done[0], total, r["task"])

    out = run_experiment(cfg, progress=progress)
    meta = json.loads((out / "metadata.json").read_text())
    if meta["frames_run"]:
        log.info("detect pipeline %.1f ms/frame", meta["detect_ms_per_frame"])
    print(out)
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import report

    out = Path(args.out or (args.config and _experiment(args).output_dir) or ".")
    files = report(out, plots=not args.no_plots)
    for k, p in files.items():
        print(f"{k}\t{p}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .metrics import to_csv
    from .pipeline import SWEEP_COLUMNS, sweep

    out = Path(args.out or (args.config and _experiment(args).output_dir) or ".")
    thresholds = args.thresholds or ([args.threshold] if args.threshold is not None else None)
    kw = {"thresholds": thresholds} if thresholds else {}
    rows = sweep(out, mode=args.mode, max_frames=args.frames, **kw)
    text = to_csv(rows, SWEEP_COLUMNS)
    (out / "report").mkdir(exist_ok=True)
    (out / "report" / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usid", description="Coded ultrasound marker simulation and detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, run_like=False):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="master RNG seed (u64)")
        sp.add_argument("--threshold", type=float, help="ON threshold")
        sp.add_argument("--out", help="output path / run directory")
        if run_like:
            sp.add_argument("--mode", choices=("selected", "freewheel", "multi"))

    g = sub.add_parser("gen-codebook", help="build and validate a codebook")
    common(g)
    g.add_argument("--n-codes", type=int, default=8)
    g.add_argument("--refine-iterations", type=int, default=400)
    g.set_defaults(func=cmd_gen_codebook, threshold=None)

    v = sub.add_parser("validate", help="check codebook separation")
    common(v)
    v.add_argument("--codebook", help="codebook file (default: config's, else the built-in book)")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run the Monte-Carlo experiment")
    common(r, run_like=True)
    r.add_argument("--id", "--ids", dest="id", type=_ids, help="comma-separated IDs to test")
    r.add_argument("--depths", type=_floats, help="comma-separated depths in mm")
    r.add_argument("--frames", type=int, help="frames per trial")
    r.add_argument("--trials", type=int, help="trials per ID and depth")
    r.add_argument("--workers", type=int, help="worker processes")
    r.add_argument("--save-rf", action="store_true", help="store RF and beamformed frames")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="tables and plots from a run directory")
    common(rep, run_like=True)
    rep.add_argument("--no-plots", action="store_true")
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep", help="detection and false-ID rate over thresholds")
    common(s, run_like=True)
    s.add_argument("--thresholds", type=_floats, help="comma-separated grid (default 0.1..0.9)")
    s.add_argument("--frames", type=int, help="frames per trial to use")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    if args.verb == "gen-codebook" and args.threshold is None:
        args.threshold = 0.3
    if args.verb == "validate" and args.threshold is None:
        args.threshold = 0.3
    from .detector import LogFormatError
    from .pipeline import ConfigError

    try:
        return args.func(args)
    except (ConfigError, LogFormatError, CodebookError, OSError) as exc:
        msg = exc.strerror if isinstance(exc, OSError) and exc.strerror else str(exc)
        where = f"{exc.filename}: " if isinstance(exc, OSError) and exc.filename else ""
        print(f"error: {where}{msg}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
