import json
import shutil
from dataclasses import replace

import pytest

from usid.detector import LogFormatError, read_log
from usid.metrics import from_csv
from usid.pipeline import (
    ConfigError,
    ExperimentConfig,
    load_config,
    report,
    run_experiment,
    sweep,
    task_name,
    task_seed,
)

NOISE = [0.05, 0.012]


def small(tmp_path, name="run", **kw):
    base = dict(ids=list(range(1, 9)), frames_per_trial=1, n_trials=1, noise_std=list(NOISE),
                modes=["selected", "freewheel", "multi"], output_dir=str(tmp_path / name))
    base.update(kw)
    return ExperimentConfig(**base)


def log_bytes(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.suffix in (".jsonl", ".json") and p.name not in ("metadata.json", "config.json")}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    return run_experiment(small(tmp, save_rf=True))


# -- config --------------------------------------------------------------------

def test_default_suite_size():
    cfg = ExperimentConfig()
    assert len(cfg.ids) * len(cfg.depths_mm) * cfg.n_trials * cfg.frames_per_trial == 4800
    assert cfg.depths_mm == [12.0, 23.0] and cfg.detector == {}


@pytest.mark.parametrize(
    "kw",
    [{"frames_per_trial": 0}, {"depths_mm": [-1.0]}, {"modes": ["fast"]}, {"ids": []},
     {"noise_std": [0.1]}, {"detector": {"on_threshold": 2.0}}, {"detector": {"bogus": 1}}, {"workers": 0}],
)
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_config_parse_error_has_line_and_column(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "ids": [1, 2],\n  "frames_per_trial": ,\n}\n')
    with pytest.raises(ConfigError, match="line 3 column 23"):
        load_config(p)


def test_config_unknown_key_and_missing_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"frames": 3}')
    with pytest.raises(ConfigError, match="frames"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.json"
    p.write_text(json.dumps({"codebook": "cb.txt", "scene": "../scene.json"}))
    cfg = load_config(p)
    assert cfg.codebook == str((tmp_path / "sub" / "cb.txt").resolve())
    assert cfg.scene == str((tmp_path / "scene.json").resolve())


def test_missing_codebook_is_config_error(tmp_path):
    cfg = small(tmp_path, codebook=str(tmp_path / "nope.txt"))
    with pytest.raises(ConfigError):
        run_experiment(cfg)


def test_ids_must_exist_in_codebook(tmp_path):
    with pytest.raises(ConfigError, match="not in the codebook"):
        run_experiment(small(tmp_path, ids=[9]))


def test_task_seed_distinct():
    seeds = {task_seed(42, i, d, t) for i in range(1, 9) for d in (12.0, 23.0) for t in range(3)}
    assert len(seeds) == 48 and all(0 <= s < 2**63 for s in seeds)
    assert task_name(3, 23.0, 1) == "id3_d23_t1" and task_name(3, 12.5, 0) == "id3_d12.5_t0"


# -- run -----------------------------------------------------------------------

def test_run_layout(small_run):
    cfg = load_config(small_run / "config.json")
    assert "axial_offset_correction" in cfg.detector and cfg.noise_std == NOISE
    for mode in ("selected", "freewheel", "multi"):
        logs = sorted((small_run / "logs" / mode).glob("*.jsonl"))
        assert len(logs) == 16
        recs = [r for p in logs for r in read_log(p)]
        assert len(recs) == 16 and all(r["mode"] == mode for r in recs)
    multi = read_log(small_run / "logs" / "multi" / "id3_d23_t0.jsonl")[0]
    assert isinstance(multi["detections"], list)
    assert len(list((small_run / "snr").glob("*.json"))) == 16
    frames = sorted((small_run / "frames" / "id3_d23_t0").iterdir())
    assert [p.name for p in frames] == ["f0000_neg.usrf", "f0000_pos.usrf", "f0000_sum.usbf"]
    meta = json.loads((small_run / "metadata.json").read_text())
    assert meta["frames_run"] == 16 and meta["detect_ms_per_frame"] > 0


def test_rerun_byte_identical(tmp_path, small_run):
    again = run_experiment(small(tmp_path, save_rf=True))
    assert log_bytes(again) == log_bytes(small_run)
    for p in sorted((small_run / "frames").rglob("*.us*")):
        assert (again / p.relative_to(small_run)).read_bytes() == p.read_bytes()


def test_workers_do_not_change_output(tmp_path):
    one = run_experiment(small(tmp_path, "w1", ids=[2, 5], frames_per_trial=2, modes=["freewheel"]))
    two = run_experiment(small(tmp_path, "w2", ids=[2, 5], frames_per_trial=2, modes=["freewheel"], workers=2))
    assert log_bytes(one) == log_bytes(two)


def test_resume_after_interruption(tmp_path):
    cfg = small(tmp_path, ids=[4], frames_per_trial=2, modes=["selected"])
    out = run_experiment(cfg)
    before = log_bytes(out)
    (out / "logs" / "selected" / "id4_d12_t0.jsonl").unlink()
    (out / "snr" / "id4_d23_t0.json").unlink()
    run_experiment(cfg)
    assert log_bytes(out) == before
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["tasks_run"] == 2


def test_resume_refuses_other_config(tmp_path):
    cfg = small(tmp_path, ids=[4], modes=["selected"])
    run_experiment(cfg)
    with pytest.raises(ConfigError, match="different configuration"):
        run_experiment(replace(cfg, rng_seed=7))


def test_calibrated_run_records_constants(tmp_path):
    cfg = ExperimentConfig(ids=[3], depths_mm=[23.0], frames_per_trial=1, n_trials=1, calibration_frames=2,
                           output_dir=str(tmp_path / "cal"))
    out = run_experiment(cfg)
    saved = load_config(out / "config.json")
    assert saved.noise_std is not None and saved.noise_std[0] > 0
    assert len(read_log(out / "logs" / "selected" / "id3_d23_t0.jsonl")) == 1


def test_depth_without_target_needs_value(tmp_path):
    with pytest.raises(ConfigError, match="snr_targets_db"):
        run_experiment(ExperimentConfig(ids=[1], depths_mm=[30.0], frames_per_trial=1, n_trials=1,
                                        output_dir=str(tmp_path / "x")))


# -- report --------------------------------------------------------------------

def test_report_tables(small_run):
    files = report(small_run, plots=True)
    loc = from_csv(files["localization"].read_text())
    assert len(loc) == 16
    assert {(r["id"], r["depth_mm"]) for r in loc} == {(i, d) for i in range(1, 9) for d in (12.0, 23.0)}
    assert all(r["n_frames"] == 1 for r in loc)
    snr = from_csv(files["snr"].read_text())
    assert len(snr) == 16 and all(r["sigma2_noise"] > 0 for r in snr)
    conf = from_csv(files["confusion"].read_text())
    assert len(conf) == 16
    assert all(sum(r[f"calc_{i}"] for i in range(1, 9)) + r["failed"] == 1 for r in conf)
    summary = json.loads(files["summary"].read_text())
    assert summary["n_frames"] == 16
    for key in ("confusion_png", "heatmap_png"):
        assert files[key].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_single_frame(tmp_path):
    out = run_experiment(small(tmp_path, ids=[6], depths_mm=[23.0], noise_std=[0.012], modes=["selected"]))
    files = report(out, plots=False)
    rows = from_csv(files["localization"].read_text())
    assert len(rows) == 1 and rows[0]["n_frames"] == 1


def test_report_empty_logs(tmp_path):
    out = run_experiment(small(tmp_path, ids=[6], depths_mm=[23.0], noise_std=[0.012], modes=["selected"]))
    shutil.rmtree(out / "logs")
    with pytest.raises(ConfigError, match="no detection logs"):
        report(out, plots=False)


def test_report_corrupted_line(tmp_path, small_run):
    out = tmp_path / "copy"
    shutil.copytree(small_run, out)
    p = out / "logs" / "selected" / "id2_d12_t0.jsonl"
    p.write_text(p.read_text() + "not json\n")
    with pytest.raises(LogFormatError, match="id2_d12_t0.jsonl:2"):
        report(out, plots=False)


def test_report_not_a_run(tmp_path):
    with pytest.raises(ConfigError):
        report(tmp_path, plots=False)


# -- sweep ---------------------------------------------------------------------

def test_sweep_monotone_and_endpoint(small_run):
    rows = sweep(small_run, thresholds=[0.1, 0.3, 0.5, 0.999])
    rates = [r["detection_rate"] for r in rows]
    wrong = [r["false_id_rate"] for r in rows]
    assert rates == sorted(rates, reverse=True) and wrong == sorted(wrong, reverse=True)
    assert rates[-1] <= 0.05
    assert all(r["n_frames"] == 16 for r in rows)


def test_sweep_agrees_with_run(small_run):
    logs = [r for p in (small_run / "logs" / "selected").glob("*.jsonl") for r in read_log(p)]
    run_rate = sum(r["id"] == r["tx_id"] for r in logs) / len(logs)
    rate = sweep(small_run, thresholds=[0.3])[0]["detection_rate"]
    assert abs(rate - run_rate) <= 0.05


def test_sweep_stored_frames_equal_regenerated(tmp_path, small_run):
    out = tmp_path / "nofr"
    shutil.copytree(small_run, out)
    shutil.rmtree(out / "frames")
    for mode in ("selected", "freewheel"):
        a = sweep(small_run, thresholds=[0.2, 0.4], mode=mode)
        b = sweep(out, thresholds=[0.2, 0.4], mode=mode)
        for x, y in zip(a, b):
            assert x["detection_rate"] == pytest.approx(y["detection_rate"], abs=1 / 16)
