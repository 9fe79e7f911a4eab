import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FS, clip_scene, summed_image
from usid.beamform import BeamformedImage
from usid.clip import ClipConfig, crystal_kernel
from usid.codebook import xcorr_normalized
from usid.detector import (
    Correlator,
    Detection,
    DetectorConfig,
    LogFormatError,
    calibrate_axial_offset,
    detect_freewheeling,
    detect_multi,
    detect_selected,
    detection_record,
    dumps_record,
    read_log,
    record_to_detection,
    references_from_waveforms,
    score_all,
)
from usid.clip import SampledWaveform
from usid.phantom import Scene


def quiet(cid, pos, **kw):
    return ClipConfig(id=cid, position=pos, jitter_std=0.0, miss_probability_second_pulse=0.0, **kw)


@pytest.fixture(scope="module")
def offset(codebook, refs):
    return calibrate_axial_offset(Scene(codebook=codebook), quiet(1, (0.0, 23.0)), refs)


@pytest.fixture(scope="module")
def cfg(offset):
    return DetectorConfig(axial_offset_correction=offset)


@pytest.fixture(scope="module")
def two_clip_image(codebook):
    return summed_image(clip_scene(codebook, [quiet(2, (0.0, 27.0)), quiet(8, (0.0, 12.0))]))


# -- references ----------------------------------------------------------------

def test_references_unit_energy_and_autocorrelation(refs, codebook):
    assert refs.ids == codebook.ids
    for cid in refs.ids:
        w = refs.waveforms[cid]
        assert float(w @ w) == pytest.approx(1.0, abs=1e-12)
        assert xcorr_normalized(w, w).peak() == (0, pytest.approx(1.0, abs=1e-12))


def test_reference_cross_correlation_below_threshold(refs):
    worst = max(
        xcorr_normalized(refs.waveforms[i], refs.waveforms[j]).peak()[1]
        for i in refs.ids for j in refs.ids if i < j
    )
    assert worst < 0.3


def test_reference_duration(refs):
    k = crystal_kernel(FS).size
    n = int(np.ceil(64 / 3.90 * FS))
    assert all(w.size == n + k - 1 for w in refs.waveforms.values())
    assert refs.t0[1] == pytest.approx(-((k - 1) // 2) / FS)


def test_external_references(refs):
    ext = references_from_waveforms({i: SampledWaveform(FS, 3.0 * refs.waveforms[i], refs.t0[i]) for i in refs.ids})
    for i in refs.ids:
        np.testing.assert_allclose(ext.waveforms[i], refs.waveforms[i], atol=1e-15)
    with pytest.raises(ValueError):
        references_from_waveforms({1: SampledWaveform(25.0, np.ones(3)), 2: SampledWaveform(20.0, np.ones(3))})


# -- correlator ----------------------------------------------------------------

@pytest.mark.parametrize("mode", ["global", "windowed"])
def test_correlator_matches_pairwise_oracle(refs, rng, mode):
    v = rng.standard_normal((5, 700))
    img = BeamformedImage(v, FS, 1540.0, np.arange(5) * 0.3)
    ls = Correlator(img, refs, mode).line_scores(4)
    for line in range(5):
        s = xcorr_normalized(refs.waveforms[4], v[line], mode)
        lag, peak = s.peak()
        assert ls.lag[line] == lag
        assert ls.score[line] == pytest.approx(peak, abs=1e-9)


def test_config_validation():
    for bad in ({"on_threshold": 0.0}, {"on_threshold": 1.0}, {"normalization": "x"}, {"line_selection": "x"}):
        with pytest.raises(ValueError):
            DetectorConfig(**bad)


def test_sample_rate_mismatch(refs):
    img = BeamformedImage(np.zeros((2, 10)), 20.0, 1540.0, np.arange(2.0))
    with pytest.raises(ValueError):
        Correlator(img, refs)


# -- selected ------------------------------------------------------------------

def test_zero_image_no_detection(refs, cfg):
    img = BeamformedImage(np.zeros((128, 2800)), FS, 1540.0, np.arange(128) * 0.3)
    assert detect_selected(img, 1, refs, cfg) is None
    assert detect_freewheeling(img, refs, cfg) is None
    assert detect_multi(img, refs, cfg) == []
    assert set(score_all(img, refs, cfg).values()) == {0.0}


@pytest.mark.parametrize("cid", range(1, 9))
def test_own_id_localized_within_2mm(single_clip_images, refs, cfg, cid):
    det = detect_selected(single_clip_images[cid], cid, refs, cfg)
    assert det is not None and det.id == cid and det.score >= 0.3
    assert np.hypot(det.lateral - 0.0, det.axial - 23.0) < 2.0
    assert det.lateral in single_clip_images[cid].line_positions


def test_absent_id_not_detected(single_clip_images, refs, cfg):
    for cid, img in single_clip_images.items():
        for other in refs.ids:
            if other != cid:
                assert detect_selected(img, other, refs, cfg) is None


def test_cross_id_scores_bounded_by_separation(single_clip_images, refs, codebook):
    bound = codebook.separation + 0.05
    for cid, img in single_clip_images.items():
        s = score_all(img, refs)
        assert max(v for k, v in s.items() if k != cid) <= bound


def test_unknown_id_raises(single_clip_images, refs):
    with pytest.raises(KeyError):
        detect_selected(single_clip_images[1], 99, refs)


def test_axial_offset_positive_and_stable(codebook, refs, offset):
    # the emission follows the incident pulse, so uncorrected detections land deep
    assert offset > 0
    other = calibrate_axial_offset(Scene(codebook=codebook), quiet(5, (0.0, 23.0)), refs)
    assert other == pytest.approx(offset, abs=0.1)


# -- freewheeling and multi ----------------------------------------------------

def test_freewheel_identifies_id3(single_clip_images, refs, cfg):
    det = detect_freewheeling(single_clip_images[3], refs, cfg)
    assert det.id == 3


def test_freewheel_two_clips_picks_stronger(two_clip_image, refs, cfg):
    s = score_all(two_clip_image, refs, cfg)
    assert s[8] > s[2]
    assert detect_freewheeling(two_clip_image, refs, cfg).id == 8


def test_multi_two_clips_no_crosstalk(two_clip_image, refs, cfg):
    dets = {d.id: d for d in detect_multi(two_clip_image, refs, cfg)}
    assert set(dets) == {2, 8}
    assert np.hypot(dets[2].lateral, dets[2].axial - 27.0) < 2.0
    assert np.hypot(dets[8].lateral, dets[8].axial - 12.0) < 2.0


def test_multi_single_clip_equals_freewheel(single_clip_images, refs, cfg):
    for img in single_clip_images.values():
        assert detect_multi(img, refs, cfg) == [detect_freewheeling(img, refs, cfg)]


def test_multi_suppresses_nearby_weaker_id(single_clip_images, refs):
    img = single_clip_images[1]
    low = DetectorConfig(on_threshold=0.01)
    raw = [detect_selected(img, c, refs, low) for c in refs.ids]
    assert len([d for d in raw if d is not None]) > 1
    kept = detect_multi(img, refs, low)
    for a in kept:
        for b in kept:
            if a.id != b.id:
                assert np.hypot(a.lateral - b.lateral, a.axial - b.axial) >= 2.0
    assert 1 in [d.id for d in kept]


def test_freewheel_tie_goes_to_lower_id(refs):
    # identical references for two IDs give identical scores
    dup = replace(refs, waveforms={1: refs.waveforms[3], 2: refs.waveforms[3]}, t0={1: refs.t0[3], 2: refs.t0[3]})
    v = np.zeros((4, 900))
    v[1, 100 : 100 + refs.waveforms[3].size] = refs.waveforms[3]
    img = BeamformedImage(v, FS, 1540.0, np.arange(4) * 0.3)
    assert detect_freewheeling(img, dup).id == 1


# -- properties ----------------------------------------------------------------

def _noisy(img, seed, sigma):
    r = np.random.default_rng(seed)
    return replace(img, values=img.values + sigma * r.standard_normal(img.values.shape))


@settings(max_examples=6, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t1=st.floats(0.05, 0.9), t2=st.floats(0.05, 0.9))
def test_threshold_monotonicity(single_clip_images, refs, seed, t1, t2):
    lo, hi = sorted((t1, t2))
    img = _noisy(single_clip_images[6], seed, 0.01)
    a = {(d.id, d.lateral, d.axial) for d in detect_multi(img, refs, DetectorConfig(on_threshold=lo))}
    b = {(d.id, d.lateral, d.axial) for d in detect_multi(img, refs, DetectorConfig(on_threshold=hi))}
    sa = {c for c in refs.ids if detect_selected(img, c, refs, DetectorConfig(on_threshold=lo))}
    sb = {c for c in refs.ids if detect_selected(img, c, refs, DetectorConfig(on_threshold=hi))}
    assert sb <= sa
    assert {x[0] for x in b} <= sa


@settings(max_examples=6, deadline=None)
@given(k=st.floats(1e-6, 1e6), seed=st.integers(0, 1000))
def test_scale_invariance(single_clip_images, refs, cfg, k, seed):
    img = _noisy(single_clip_images[2], seed, 0.01)
    base = detect_freewheeling(img, refs, cfg)
    scaled = detect_freewheeling(img.scaled(k), refs, cfg)
    assert (scaled.id, scaled.lateral, scaled.axial) == (base.id, base.lateral, base.axial)
    assert scaled.score == pytest.approx(base.score, rel=1e-9)


def test_selected_freewheel_consistency(single_clip_images, refs, cfg):
    for cid, img in single_clip_images.items():
        crossing = [c for c, s in score_all(img, refs, cfg).items() if s >= cfg.on_threshold]
        assert crossing == [cid]
        assert detect_freewheeling(img, refs, cfg) == detect_selected(img, cid, refs, cfg)


def test_deterministic_and_order_free(single_clip_images, refs, cfg):
    img = single_clip_images[7]
    a = detect_multi(img, refs, cfg)
    rev = replace(refs, waveforms=dict(reversed(list(refs.waveforms.items()))))
    assert detect_multi(img, rev, cfg) == a == detect_multi(img, refs, cfg)


# -- logs ----------------------------------------------------------------------

def test_failed_detection_record():
    assert detection_record(4, "selected", None) == {
        "frame": 4, "mode": "selected", "id": 0, "lateral_mm": 0.0, "axial_mm": 0.0, "score": 0.0}


def test_record_round_trip(tmp_path):
    d = Detection(id=3, lateral=-1.35, axial=22.9, score=0.61, frame_index=2)
    p = tmp_path / "log.jsonl"
    p.write_text(dumps_record(detection_record(2, "freewheel", d)) + "\n" + dumps_record(detection_record(3, "freewheel", None)) + "\n")
    recs = read_log(p)
    assert [list(r) for r in recs][0] == ["frame", "mode", "id", "lateral_mm", "axial_mm", "score"]
    assert record_to_detection(recs[0]) == d
    assert record_to_detection(recs[1]) is None


def test_corrupted_log_line_named(tmp_path):
    p = tmp_path / "log.jsonl"
    good = dumps_record(detection_record(0, "selected", None))
    p.write_text(good + "\n" + good + "\n{oops\n")
    with pytest.raises(LogFormatError, match=":3:"):
        read_log(p)
    p.write_text(good + "\n" + json.dumps({"frame": 1}) + "\n")
    with pytest.raises(LogFormatError, match=":2:"):
        read_log(p)
