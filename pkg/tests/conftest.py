"""Shared fixtures: the shipped codebook, its references and small noise-free scenes."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from usid.beamform import das_beamform, pi_sum
from usid.clip import ClipConfig
from usid.defaults import default_codebook
from usid.detector import build_references
from usid.phantom import Scene, simulate_pi_pair

FS = 25.0

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def codebook():
    return default_codebook()


@pytest.fixture(scope="session")
def quiet_clip():
    """Template clip with jitter and second-pulse misses disabled."""
    return ClipConfig(id=1, position=(0.0, 23.0), jitter_std=0.0, miss_probability_second_pulse=0.0)


@pytest.fixture(scope="session")
def refs(codebook, quiet_clip):
    return build_references(codebook, quiet_clip, FS)


def clip_scene(codebook, clips, **kw) -> Scene:
    return Scene(clips=list(clips), codebook=codebook, **kw)


def summed_image(scene: Scene, pair: int = 0):
    pos, neg = simulate_pi_pair(scene, pair)
    return das_beamform(pi_sum(pos, neg), scene.geometry, scene.sound_speed)


@pytest.fixture(scope="session")
def single_clip_images(codebook, quiet_clip):
    """Noise-free summed images of every ID at (0, 23) mm, keyed by ID."""
    out = {}
    for cid in codebook.ids:
        clip = replace(quiet_clip, id=cid)
        out[cid] = summed_image(clip_scene(codebook, [clip]))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
