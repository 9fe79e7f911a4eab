"""Default codebook and shared default settings.

The default book is a seeded random search constrained on both the raw chips
and the crystal-shaped transmit waveform, followed by single-chip refinement
of the shaped cross-correlation. The result is stored as package data so that
loading it is instant; :func:`make_default_codebook` rebuilds it from scratch.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .clip import ClipConfig, apply_crystal_response, synthesize_chip_train
from .codebook import Codebook, build_codebook, loads_codebook, refine_codebook

DEFAULT_FS_MHZ = 25.0
DEFAULT_SEED = 42
DEFAULT_N_CODES = 8
REFINE_ITERATIONS = 400
_DATA_FILE = "default_codebook.txt"


def transmit_shaper(clip_cfg: ClipConfig | None = None, fs: float = DEFAULT_FS_MHZ):
    """Map a chip vector to the transmitted (chip train + crystal) waveform."""
    cfg = clip_cfg or ClipConfig(id=1, position=(0.0, 20.0))

    def shape(chips) -> np.ndarray:
        # accepts any real chip vector; refinement feeds unit vectors
        train = synthesize_chip_train(np.asarray(chips, dtype=np.float64), cfg.chip_rate, cfg.duty_cycle, 1.0, fs)
        return apply_crystal_response(train, cfg.crystal_center, cfg.crystal_fractional_bandwidth).samples

    return shape


def make_default_codebook(
    n_codes: int = DEFAULT_N_CODES,
    rng_seed: int = DEFAULT_SEED,
    iterations: int = REFINE_ITERATIONS,
) -> tuple[Codebook, float]:
    """Build the default book; returns it with its worst shaped-waveform correlation."""
    cfg = ClipConfig(id=1, position=(0.0, 20.0))
    shaper = transmit_shaper(cfg, DEFAULT_FS_MHZ)
    params = {
        "shaped": "crystal",
        "crystal_fbw": cfg.crystal_fractional_bandwidth,
        "fs": DEFAULT_FS_MHZ,
    }
    cb = build_codebook(n_codes, rng_seed=rng_seed, threshold=0.3, shaper=shaper, shaper_params=params)
    return refine_codebook(cb, shaper, iterations=iterations, chip_bound=0.3)


def default_codebook() -> Codebook:
    """The shipped default 8-code book."""
    text = resources.files("usid").joinpath("data", _DATA_FILE).read_text()
    return loads_codebook(text)


__all__ = ["DEFAULT_FS_MHZ", "default_codebook", "make_default_codebook", "transmit_shaper"]
