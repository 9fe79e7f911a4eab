"""PN code generation, codebook search and normalized cross-correlation.

Chips are stored as int8 arrays of +1/-1. Correlations follow the lag
convention ``r[k] = sum_n a[n] * b[n + k]``: lag 0 means aligned starts and a
positive lag means ``b`` is delayed relative to ``a``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft

CODE_LENGTH = 64

# Fibonacci feedback taps (exponents of x^k + ... + 1) that are primitive over
# GF(2). Every entry is checked for full period in the test suite.
PRIMITIVE_TAPS: dict[int, tuple[tuple[int, ...], ...]] = {
    3: ((3, 2), (3, 1)),
    4: ((4, 3), (4, 1)),
    5: ((5, 3), (5, 2), (5, 4, 3, 2)),
    6: ((6, 5), (6, 1), (6, 5, 3, 2)),
    7: ((7, 6), (7, 1), (7, 3)),
    8: ((8, 6, 5, 4), (8, 6, 5, 3)),
    9: ((9, 5), (9, 4)),
    10: ((10, 7), (10, 3)),
}


class CodebookError(ValueError):
    """Raised when a codebook cannot be built or parsed."""

    def __init__(self, message: str, best_separation: float | None = None):
        super().__init__(message)
        self.best_separation = best_separation


@dataclass(frozen=True)
class PnCode:
    id: int
    chips: np.ndarray

    def __post_init__(self):
        chips = np.asarray(self.chips, dtype=np.int8)
        if chips.shape != (CODE_LENGTH,):
            raise ValueError(f"code {self.id}: expected {CODE_LENGTH} chips, got {chips.shape}")
        if not np.all(np.abs(chips) == 1):
            raise ValueError(f"code {self.id}: chips must be +1 or -1")
        chips.setflags(write=False)
        object.__setattr__(self, "chips", chips)

    def as_string(self) -> str:
        return "".join("+" if c > 0 else "-" for c in self.chips)


@dataclass(frozen=True)
class CorrelationSeries:
    """Normalized correlation values (signed) indexed by integer lag."""

    lags: np.ndarray
    values: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def peak(self) -> tuple[int, float]:
        """Return ``(lag, |value|)`` of the maximum magnitude; ties go to the smallest lag."""
        mag = self.magnitude
        i = int(np.argmax(mag))  # argmax returns the first (smallest-lag) maximum
        return int(self.lags[i]), float(mag[i])


@dataclass
class Codebook:
    codes: list[PnCode]
    rng_seed: int | None = None
    generator: str = "random-search"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.codes:
            raise CodebookError("codebook must contain at least one code")
        ids = [c.id for c in self.codes]
        if ids != list(range(1, len(ids) + 1)):
            raise CodebookError(f"code ids must be contiguous from 1, got {ids}")
        self._separation: float | None = None

    def __len__(self) -> int:
        return len(self.codes)

    def __getitem__(self, code_id: int) -> PnCode:
        if not 1 <= code_id <= len(self.codes):
            raise KeyError(code_id)
        return self.codes[code_id - 1]

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.codes]

    @property
    def separation(self) -> float:
        """Max |normalized cross-correlation| over distinct pairs and all lags (0 for one code)."""
        if self._separation is None:
            self._separation = _max_pair_xcorr([c.chips for c in self.codes])
        return self._separation


def generate_mseq(register_length: int, taps, seed_state: int) -> np.ndarray:
    """Generate one period of a maximal-length sequence as +1/-1 chips.

    Parameters
    ----------
    register_length : int
        Number of LFSR stages (>= 3).
    taps : iterable of int
        Feedback stages, e.g. ``{3, 2}`` for x^3 + x^2 + 1. Must appear in
        :data:`PRIMITIVE_TAPS`.
    seed_state : int
        Initial register fill; bit ``i`` holds stage ``i + 1``. Must be nonzero.

    Returns
    -------
    np.ndarray
        int8 array of length ``2**register_length - 1``; bit 0 maps to +1 and
        bit 1 maps to -1.
    """
    n = int(register_length)
    if n < 3:
        raise ValueError("register_length must be >= 3")
    tap_key = tuple(sorted({int(t) for t in taps}, reverse=True))
    known = {tuple(sorted(t, reverse=True)) for t in PRIMITIVE_TAPS.get(n, ())}
    if tap_key not in known:
        raise ValueError(f"taps {tap_key} are not a verified primitive set for length {n}")
    state = int(seed_state) & ((1 << n) - 1)
    if state == 0 or int(seed_state) != state:
        raise ValueError("seed_state must be a nonzero fill of the register")

    period = (1 << n) - 1
    bits = np.empty(period, dtype=np.int8)
    for i in range(period):
        bits[i] = (state >> (n - 1)) & 1
        fb = 0
        for t in tap_key:
            fb ^= (state >> (t - 1)) & 1
        state = ((state << 1) | fb) & period
    return (1 - 2 * bits).astype(np.int8)


def xcorr_normalized(a, b, mode: str = "global") -> CorrelationSeries:
    """Normalized cross-correlation over every lag with at least one overlapping sample.

    ``global`` divides by ``sqrt(Ea * Eb)`` using total energies. ``windowed``
    divides by the full energy of the shorter input times the energy of the
    longer input's segment that overlaps it at each lag; lags whose overlap has
    no energy are 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size == 0 or b.size == 0:
        raise ValueError("inputs must be nonempty 1-D sequences")
    ea = float(a @ a)
    eb = float(b @ b)
    if ea == 0.0 and eb == 0.0:
        raise ValueError("normalization undefined: both inputs have zero energy")
    raw = _raw_xcorr(a, b)
    lags = np.arange(-(a.size - 1), b.size)
    if mode == "global":
        denom = np.sqrt(ea * eb)
        values = raw / denom if denom > 0 else np.zeros_like(raw)
    elif mode == "windowed":
        values = raw * _windowed_scale(a, b)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return CorrelationSeries(lags=lags, values=values)


def xcorr_direct(a, b) -> np.ndarray:
    """Raw correlation by explicit double sum, lags ``-(len(a)-1) .. len(b)-1``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros(a.size + b.size - 1)
    for j, k in enumerate(range(-(a.size - 1), b.size)):
        lo = max(0, -k)
        hi = min(a.size, b.size - k)
        s = 0.0
        for n in range(lo, hi):
            s += a[n] * b[n + k]
        out[j] = s
    return out


def _raw_xcorr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.size + b.size - 1
    nfft = sp_fft.next_fast_len(n, real=True)
    spec = sp_fft.rfft(b, nfft) * np.conj(sp_fft.rfft(a, nfft))
    full = sp_fft.irfft(spec, nfft)
    # lags -(Na-1)..-1 wrap to the end of the circular result
    return np.concatenate([full[nfft - (a.size - 1):], full[: b.size]])


def _windowed_scale(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    short, long_, a_is_short = (a, b, True) if a.size <= b.size else (b, a, False)
    e_short = float(short @ short)
    csum = np.concatenate([[0.0], np.cumsum(long_ * long_)])
    lags = np.arange(-(a.size - 1), b.size)
    # segment of the longer input touched at each lag
    if a_is_short:
        lo = np.clip(lags, 0, b.size)
        hi = np.clip(lags + a.size, 0, b.size)
    else:
        lo = np.clip(-lags, 0, a.size)
        hi = np.clip(b.size - lags, 0, a.size)
    e_long = np.maximum(csum[hi] - csum[lo], 0.0)
    denom = np.sqrt(e_short * e_long)
    scale = np.zeros_like(denom)
    ok = denom > 1e-300
    scale[ok] = 1.0 / denom[ok]
    return scale


def _max_pair_xcorr(chips: list[np.ndarray]) -> float:
    worst = 0.0
    for i in range(len(chips)):
        for j in range(i + 1, len(chips)):
            _, v = xcorr_normalized(chips[i], chips[j]).peak()
            worst = max(worst, v)
    return worst


def _worst_sidelobe(chips: np.ndarray) -> float:
    """Largest |autocorrelation| away from lag 0."""
    s = xcorr_normalized(chips, chips)
    mag = s.magnitude.copy()
    mag[s.lags == 0] = 0.0
    return float(mag.max()) if mag.size else 0.0


def build_codebook(
    n_codes: int = 8,
    rng_seed: int = 42,
    max_attempts: int = 20000,
    threshold: float = 0.3,
    target: float | None = None,
    shaper=None,
    shaper_params: dict | None = None,
) -> Codebook:
    """Greedy seeded search for ``n_codes`` random 64-chip codes.

    A candidate is kept when its cross-correlation against every accepted code
    (all lags) is below ``target`` (default ``threshold``). When ``shaper`` is
    given it maps chips to the waveform actually transmitted, and the same
    bound is also enforced on the shaped waveforms, since band-limiting raises
    cross-correlation between codes.

    Raises
    ------
    CodebookError
        If ``max_attempts`` candidates are drawn without completing the book;
        ``best_separation`` holds the smallest rejected separation seen.
    """
    if n_codes < 1:
        raise ValueError("n_codes must be >= 1")
    target = threshold if target is None else target
    if not 0 < target <= threshold:
        raise ValueError("target must be in (0, threshold]")
    rng = np.random.default_rng(rng_seed)
    pools: list[list[np.ndarray]] = [[], []]  # chip spectra, shaped spectra
    energies: list[list[float]] = [[], []]
    accepted: list[np.ndarray] = []
    best_fail = np.inf
    nfft_chip = 2 * CODE_LENGTH
    nfft_shaped = 0
    for _ in range(max_attempts):
        cand = rng.choice(np.array([-1, 1], dtype=np.int8), size=CODE_LENGTH)
        views = [cand.astype(np.float64)]
        if shaper is not None:
            views.append(np.asarray(shaper(cand), dtype=np.float64))
            if not nfft_shaped:
                nfft_shaped = sp_fft.next_fast_len(2 * views[1].size, real=True)
        worst = 0.0
        specs = []
        for v, (view, nfft) in enumerate(zip(views, (nfft_chip, nfft_shaped))):
            f = sp_fft.rfft(view, nfft)
            e = float(view @ view)
            specs.append((f, e))
            for g, eg in zip(pools[v], energies[v]):
                r = sp_fft.irfft(f * np.conj(g), nfft) / np.sqrt(e * eg)
                worst = max(worst, float(np.abs(r).max()))
                if worst >= target:
                    break
            if worst >= target:
                break
        if worst >= target:
            best_fail = min(best_fail, worst)
            continue
        accepted.append(cand)
        for v, (f, e) in enumerate(specs):
            pools[v].append(f)
            energies[v].append(e)
        if len(accepted) == n_codes:
            break
    else:
        raise CodebookError(
            f"could not find {n_codes} codes below {target} in {max_attempts} attempts "
            f"(found {len(accepted)}; best rejected separation {best_fail:.4f})",
            best_separation=float(best_fail),
        )
    codes = [PnCode(i + 1, c) for i, c in enumerate(accepted)]
    params = {"target": target, "threshold": threshold, "max_attempts": max_attempts}
    params.update(shaper_params or {})
    return Codebook(codes, rng_seed=rng_seed, generator="random-search", params=params)


def refine_codebook(
    cb: Codebook,
    shaper,
    iterations: int = 400,
    chip_bound: float = 0.3,
    sharpness: float = 60.0,
) -> tuple[Codebook, float]:
    """Lower the worst shaped-waveform cross-correlation by single-chip flips.

    ``shaper`` must be linear in the chips (true for the chip-train plus
    crystal model), so the effect of flipping chip ``k`` of code ``i`` on its
    correlation with code ``j`` is ``-2 c_ik (h_k * w_j)`` and every candidate
    flip is scored at once. Moves minimise ``sum exp(sharpness * pair_max)``
    subject to chip-level separation staying below ``chip_bound``; the book
    with the lowest worst pair is returned with that value.
    """
    chips = [c.chips.astype(np.float64).copy() for c in cb.codes]
    n = len(chips)
    if n < 2:
        return cb, 0.0
    basis = np.stack([np.asarray(shaper(np.eye(CODE_LENGTH)[k]), dtype=np.float64) for k in range(CODE_LENGTH)])
    nfft = sp_fft.next_fast_len(2 * basis.shape[1], real=True)
    hspec = sp_fft.rfft(basis, nfft, axis=1)
    wspec = [c @ hspec for c in chips]
    energy = [float(np.sum(sp_fft.irfft(w, nfft) ** 2)) for w in wspec]

    def pair_corr(i, j):
        return sp_fft.irfft(wspec[i] * np.conj(wspec[j]), nfft)

    corr = {(i, j): pair_corr(i, j) for i in range(n) for j in range(n) if i != j}

    def pair_max(i, j):
        return float(np.abs(corr[(i, j)]).max() / np.sqrt(energy[i] * energy[j]))

    pm = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            pm[i, j] = pm[j, i] = pair_max(i, j)
    best_val = float(pm.max())
    best = [c.copy() for c in chips]
    flips = np.eye(CODE_LENGTH)
    tabu: dict[tuple[int, int], int] = {}
    for it in range(iterations):
        i, j = np.unravel_index(np.argmax(pm), pm.shape)
        move = None
        for ci in (int(i), int(j)):
            others = [o for o in range(n) if o != ci]
            # energy after flipping chip k: |w - 2 c_k h_k|^2
            cross_e = np.array([sp_fft.irfft(wspec[ci] * np.conj(hspec[k]), nfft)[0] for k in range(CODE_LENGTH)])
            h_e = np.sum(basis * basis, axis=1)
            new_e = energy[ci] - 4 * chips[ci] * cross_e + 4 * h_e
            rows = np.zeros((CODE_LENGTH, n))
            for o in others:
                g = sp_fft.irfft(hspec * np.conj(wspec[o])[None, :], nfft, axis=1)
                r = corr[(ci, o)][None, :] - 2 * chips[ci][:, None] * g
                rows[:, o] = np.abs(r).max(axis=1) / np.sqrt(new_e * energy[o])
            for k in range(CODE_LENGTH):
                if tabu.get((ci, k), -1) > it:
                    continue
                trial = chips[ci] - 2 * chips[ci][k] * flips[k]
                if max(_chip_max(trial, chips[o]) for o in others) >= chip_bound:
                    continue
                m = pm.copy()
                m[ci, :] = rows[k]
                m[:, ci] = rows[k]
                np.fill_diagonal(m, 0.0)
                score = float(np.sum(np.exp(sharpness * m[np.triu_indices(n, 1)])))
                if move is None or score < move[0]:
                    move = (score, ci, k, rows[k].copy())
        if move is None:
            break
        _, ci, k, row = move
        chips[ci][k] = -chips[ci][k]
        tabu[(ci, k)] = it + 7
        wspec[ci] = chips[ci] @ hspec
        energy[ci] = float(np.sum(sp_fft.irfft(wspec[ci], nfft) ** 2))
        for o in range(n):
            if o != ci:
                corr[(ci, o)] = pair_corr(ci, o)
                corr[(o, ci)] = pair_corr(o, ci)
        pm[ci, :] = row
        pm[:, ci] = row
        pm[ci, ci] = 0.0
        if pm.max() < best_val - 1e-12:
            best_val = float(pm.max())
            best = [c.copy() for c in chips]
    codes = [PnCode(i + 1, c.astype(np.int8)) for i, c in enumerate(best)]
    params = dict(cb.params)
    params["refine_iterations"] = iterations
    return Codebook(codes, rng_seed=cb.rng_seed, generator=cb.generator, params=params), best_val


def _chip_max(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.correlate(a, b, "full")).max() / CODE_LENGTH)


def mseq_codebook(n_codes: int = 8, register_length: int = 6) -> Codebook:
    """Codebook of cyclic shifts of one m-sequence padded to 64 chips.

    Kept for comparison only: shifted copies overlap heavily at nonzero lag,
    so these books fail the separation bound for more than one code.
    """
    taps = PRIMITIVE_TAPS[register_length][0]
    base = generate_mseq(register_length, taps, 1)
    period = base.size
    step = max(1, period // max(n_codes, 1))
    codes = []
    for i in range(n_codes):
        seq = np.roll(base, -i * step)
        seq = np.concatenate([seq, seq[:1]])[:CODE_LENGTH]
        codes.append(PnCode(i + 1, seq))
    return Codebook(codes, generator="mseq-shift", params={"register_length": register_length, "taps": ":".join(map(str, taps))})


@dataclass
class ValidationReport:
    threshold: float
    pair_max: dict[tuple[int, int], float]
    sidelobes: dict[int, float]

    @property
    def separation(self) -> float:
        return max(self.pair_max.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.separation < self.threshold

    @property
    def offending(self) -> list[tuple[int, int, float]]:
        return [(i, j, v) for (i, j), v in sorted(self.pair_max.items()) if v >= self.threshold]

    def format(self) -> str:
        lines = [f"threshold {self.threshold:.3f}  separation {self.separation:.6f}  "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for cid, v in sorted(self.sidelobes.items()):
            lines.append(f"  code {cid}: worst sidelobe {v:.6f}")
        for i, j, v in self.offending:
            lines.append(f"  pair ({i},{j}) max |xcorr| {v:.6f} >= threshold")
        return "\n".join(lines)


def validate_codebook(cb: Codebook, threshold: float = 0.3) -> ValidationReport:
    """Check every ordered pair of distinct codes against ``threshold``."""
    pair_max = {}
    for ci in cb.codes:
        for cj in cb.codes:
            if ci.id != cj.id:
                pair_max[(ci.id, cj.id)] = xcorr_normalized(ci.chips, cj.chips).peak()[1]
    sidelobes = {c.id: _worst_sidelobe(c.chips) for c in cb.codes}
    return ValidationReport(threshold=threshold, pair_max=pair_max, sidelobes=sidelobes)


# -- text format ---------------------------------------------------------------

_HEADER = "# usid-codebook v1"


def dumps_codebook(cb: Codebook) -> str:
    params = ";".join(f"{k}={v}" for k, v in sorted(cb.params.items()))
    seed = "" if cb.rng_seed is None else str(cb.rng_seed)
    out = io.StringIO()
    out.write(f"{_HEADER} generator={cb.generator} rng_seed={seed} params={params}\n")
    for c in cb.codes:
        out.write(f"{c.id},{c.as_string()}\n")
    return out.getvalue()


def loads_codebook(text: str) -> Codebook:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_HEADER):
        raise CodebookError("missing codebook header line")
    meta = {}
    for tok in lines[0][len(_HEADER):].split():
        key, _, val = tok.partition("=")
        meta[key] = val
    params = {}
    for item in filter(None, meta.get("params", "").split(";")):
        k, _, v = item.partition("=")
        params[k] = _parse_scalar(v)
    codes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cid, sep, chips = line.partition(",")
        if not sep or len(chips) != CODE_LENGTH or set(chips) - {"+", "-"}:
            raise CodebookError(f"line {lineno}: malformed code entry")
        try:
            codes.append(PnCode(int(cid), np.array([1 if ch == "+" else -1 for ch in chips])))
        except ValueError as exc:
            raise CodebookError(f"line {lineno}: {exc}") from exc
    seed = meta.get("rng_seed", "")
    return Codebook(
        codes,
        rng_seed=int(seed) if seed else None,
        generator=meta.get("generator", "unknown"),
        params=params,
    )


def save_codebook(cb: Codebook, path) -> None:
    Path(path).write_text(dumps_codebook(cb), encoding="ascii", newline="\n")


def load_codebook(path) -> Codebook:
    return loads_codebook(Path(path).read_text(encoding="ascii"))


def _parse_scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v
