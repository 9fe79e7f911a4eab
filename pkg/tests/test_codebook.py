import itertools
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usid.codebook import (
    CODE_LENGTH,
    PRIMITIVE_TAPS,
    Codebook,
    CodebookError,
    PnCode,
    build_codebook,
    dumps_codebook,
    generate_mseq,
    load_codebook,
    loads_codebook,
    mseq_codebook,
    save_codebook,
    validate_codebook,
    xcorr_direct,
    xcorr_normalized,
)
from usid.defaults import make_default_codebook


def slice_xcorr(a, b):
    """Direct sum per lag over the overlapping slices; lags -(len(a)-1)..len(b)-1."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = []
    for k in range(-(a.size - 1), b.size):
        lo, hi = max(0, -k), min(a.size, b.size - k)
        out.append(float(np.dot(a[lo:hi], b[lo + k : hi + k])))
    return np.array(out)


def brute_pair_max(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.abs(slice_xcorr(a, b)).max() / np.sqrt((a @ a) * (b @ b)))


chips64 = st.lists(st.sampled_from([-1, 1]), min_size=CODE_LENGTH, max_size=CODE_LENGTH).map(np.array)


# -- m-sequences ---------------------------------------------------------------

def test_mseq_length3_cyclic_autocorrelation():
    seq = generate_mseq(3, {3, 2}, 0b001).astype(float)
    assert seq.size == 7
    for k in range(1, 7):
        assert np.dot(seq, np.roll(seq, k)) / 7 == pytest.approx(-1 / 7, abs=1e-15)


def test_mseq_zero_seed_rejected():
    with pytest.raises(ValueError):
        generate_mseq(3, {3, 2}, 0)


def test_mseq_unknown_taps_rejected():
    with pytest.raises(ValueError):
        generate_mseq(6, {6, 4}, 1)


def test_mseq_length6_balance():
    seq = generate_mseq(6, {6, 5}, 1)
    assert seq.size == 63
    counts = sorted([(seq == 1).sum(), (seq == -1).sum()])
    assert counts == [31, 32]


@pytest.mark.parametrize("n, taps", [(n, t) for n, ts in PRIMITIVE_TAPS.items() for t in ts])
def test_every_table_entry_is_maximal(n, taps):
    period = 2**n - 1
    seq = generate_mseq(n, taps, 1)
    # minimal period must be the full period: no proper divisor shift reproduces it
    for d in range(1, period):
        if period % d == 0:
            assert not np.array_equal(seq, np.roll(seq, d))
    assert (seq == -1).sum() == 2 ** (n - 1)


def test_mseq_shift_book_fails_separation():
    assert not validate_codebook(mseq_codebook(8), 0.3).passed


# -- build_codebook ------------------------------------------------------------

def test_single_code_separation_zero():
    cb = build_codebook(1, rng_seed=3)
    assert len(cb) == 1 and cb.separation == 0.0


def test_seed42_golden_separation():
    cb = build_codebook(8, rng_seed=42)
    oracle = max(brute_pair_max(a.chips, b.chips) for a, b in itertools.combinations(cb.codes, 2))
    assert cb.separation == oracle == 19 / 64
    assert cb.separation < 0.3


def test_build_is_deterministic():
    a, b = build_codebook(8, rng_seed=5), build_codebook(8, rng_seed=5)
    assert dumps_codebook(a) == dumps_codebook(b)


def test_unreachable_book_reports_best():
    with pytest.raises(CodebookError) as err:
        build_codebook(10**6, rng_seed=42, max_attempts=2000)
    assert err.value.best_separation is not None
    assert err.value.best_separation >= 0.3
    assert "best rejected separation" in str(err.value)


def test_build_rejects_zero_codes():
    with pytest.raises(ValueError):
        build_codebook(0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6))
def test_built_books_validate(seed, n):
    cb = build_codebook(n, rng_seed=seed)
    rep = validate_codebook(cb, 0.3)
    assert rep.passed and cb.separation < 0.3


# -- correlation ---------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(code=chips64)
def test_autocorrelation_peak_is_one_at_zero(code):
    lag, peak = xcorr_normalized(code, code).peak()
    assert lag == 0 and peak == pytest.approx(1.0, abs=1e-12)


def test_identical_inputs_peak(rng):
    a = rng.standard_normal(300)
    s = xcorr_normalized(a, a)
    assert s.peak() == (0, pytest.approx(1.0, abs=1e-12))


def test_scaled_copy_matches(rng):
    a = rng.standard_normal(100)
    np.testing.assert_allclose(xcorr_normalized(a, 2 * a).values, xcorr_normalized(a, a).values, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    sa=st.floats(1e-3, 1e3),
    sb=st.floats(1e-3, 1e3),
)
def test_global_scale_invariance(seed, sa, sb):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(40), r.standard_normal(70)
    np.testing.assert_allclose(xcorr_normalized(sa * a, sb * b).values, xcorr_normalized(a, b).values, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(a=chips64, b=chips64)
def test_negation_leaves_magnitude(a, b):
    ref = xcorr_normalized(a, b).magnitude
    np.testing.assert_allclose(xcorr_normalized(-a, b).magnitude, ref, atol=1e-14)
    np.testing.assert_allclose(xcorr_normalized(a, -b).magnitude, ref, atol=1e-14)


@pytest.mark.parametrize("n", [64, 1024])
def test_fft_matches_direct_oracle(rng, n):
    a, b = rng.standard_normal(n), rng.standard_normal(n)
    s = xcorr_normalized(a, b)
    oracle = slice_xcorr(a, b) / np.sqrt((a @ a) * (b @ b))
    np.testing.assert_allclose(s.values, oracle, rtol=0, atol=1e-9)
    assert s.lags[0] == -(n - 1) and s.lags[-1] == n - 1


def test_double_loop_reference_agrees(rng):
    a, b = rng.standard_normal(37), rng.standard_normal(51)
    np.testing.assert_allclose(xcorr_direct(a, b), slice_xcorr(a, b), atol=1e-12)


def test_lag_sign_convention():
    a = np.array([0.0, 1.0, 0.0, 0.0])
    b = np.roll(a, 2)  # b delayed by two samples
    assert xcorr_normalized(a, b).peak()[0] == 2


def test_windowed_mode_oracle(rng):
    a, b = rng.standard_normal(20), rng.standard_normal(90)
    s = xcorr_normalized(a, b, "windowed")
    raw = slice_xcorr(a, b)
    for j, k in enumerate(s.lags):
        seg = b[max(k, 0) : min(k + a.size, b.size)]
        denom = np.sqrt((a @ a) * (seg @ seg))
        assert s.values[j] == pytest.approx(raw[j] / denom, abs=1e-9)


def test_windowed_mode_longer_first(rng):
    a, b = rng.standard_normal(90), rng.standard_normal(20)
    s = xcorr_normalized(a, b, "windowed")
    raw = slice_xcorr(a, b)
    for j, k in enumerate(s.lags):
        seg = a[max(-k, 0) : min(b.size - k, a.size)]
        denom = np.sqrt((b @ b) * (seg @ seg))
        assert s.values[j] == pytest.approx(raw[j] / denom, abs=1e-9)


def test_both_zero_rejected():
    with pytest.raises(ValueError):
        xcorr_normalized(np.zeros(8), np.zeros(8))


def test_one_zero_input_gives_zeros():
    s = xcorr_normalized(np.zeros(8), np.ones(8))
    assert np.all(s.values == 0)


def test_peak_ties_pick_smallest_lag():
    a = np.array([1.0])
    b = np.array([1.0, 0.0, 1.0])
    assert xcorr_normalized(a, b).peak()[0] == 0


# -- validation ----------------------------------------------------------------

def test_duplicate_code_fails(codebook):
    dup = Codebook([codebook[1], PnCode(2, codebook[1].chips)])
    rep = validate_codebook(dup, 0.3)
    assert not rep.passed
    assert rep.offending[0][:2] == (1, 2)
    assert rep.offending[0][2] == pytest.approx(1.0, abs=1e-12)


def test_negated_code_fails(codebook):
    rep = validate_codebook(Codebook([codebook[1], PnCode(2, -codebook[1].chips)]), 0.3)
    assert not rep.passed and rep.separation == pytest.approx(1.0)


def test_single_code_passes(codebook):
    rep = validate_codebook(Codebook([PnCode(1, codebook[4].chips)]), 0.3)
    assert rep.passed and rep.pair_max == {}


def test_default_book_matches_oracle(codebook):
    rep = validate_codebook(codebook, 0.3)
    assert rep.passed
    assert len(rep.pair_max) == 8 * 7
    for (i, j), v in rep.pair_max.items():
        assert v == pytest.approx(brute_pair_max(codebook[i].chips, codebook[j].chips), abs=1e-12)
    for cid, v in rep.sidelobes.items():
        c = codebook[cid].chips.astype(float)
        r = np.abs(slice_xcorr(c, c)) / CODE_LENGTH
        r[CODE_LENGTH - 1] = 0
        assert v == pytest.approx(r.max(), abs=1e-12)
    assert rep.separation == 19 / 64


def test_default_book_distinct_and_not_negations(codebook):
    rows = [c.chips for c in codebook.codes]
    for a, b in itertools.combinations(rows, 2):
        assert not np.array_equal(a, b) and not np.array_equal(a, -b)


def test_report_format_names_offenders(codebook):
    text = validate_codebook(Codebook([codebook[1], PnCode(2, codebook[1].chips)]), 0.3).format()
    assert "FAIL" in text and "pair (1,2)" in text


# -- types and text format -----------------------------------------------------

def test_pncode_invariants():
    with pytest.raises(ValueError):
        PnCode(1, np.ones(63))
    with pytest.raises(ValueError):
        PnCode(1, np.r_[np.ones(63), 0])


def test_codebook_ids_contiguous(codebook):
    with pytest.raises(CodebookError):
        Codebook([PnCode(2, codebook[1].chips)])


def test_text_round_trip_bytes(tmp_path, codebook):
    p = tmp_path / "cb.txt"
    save_codebook(codebook, p)
    again = load_codebook(p)
    assert dumps_codebook(again) == p.read_text()
    assert again.rng_seed == codebook.rng_seed and again.params == codebook.params


def test_shipped_file_round_trips_exactly(codebook):
    text = resources.files("usid").joinpath("data", "default_codebook.txt").read_text()
    assert dumps_codebook(loads_codebook(text)) == text
    assert text.splitlines()[1].startswith("1,")


def test_malformed_line_is_named(codebook):
    lines = dumps_codebook(codebook).splitlines()
    lines[3] = lines[3][:-1] + "x"
    with pytest.raises(CodebookError, match="line 4"):
        loads_codebook("\n".join(lines))


def test_missing_header_rejected():
    with pytest.raises(CodebookError):
        loads_codebook("1," + "+" * 64)


def test_default_book_regenerates_exactly(codebook):
    cb, shaped = make_default_codebook()
    assert dumps_codebook(cb) == dumps_codebook(codebook)
    assert shaped < 0.3
