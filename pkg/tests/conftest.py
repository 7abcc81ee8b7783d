"""Shared fixtures: small synthetic scenes reused across test modules.

The 15-frame datasets keep unit tests fast; the acceptance module builds
its own 30-frame fixtures through the CLI.
"""

import numpy as np
import pytest

from rstab import synthdata


@pytest.fixture(scope="session")
def static_scene():
    spec = synthdata.preset_scene("static", n_frames=15)
    ds, occ = synthdata.synth_scene(spec)
    return spec, ds, occ


@pytest.fixture(scope="session")
def dynamic_scene():
    spec = synthdata.preset_scene("dynamic", n_frames=15)
    ds, occ = synthdata.synth_scene(spec)
    return spec, ds, occ


@pytest.fixture(scope="session")
def parallax_scene():
    spec = synthdata.preset_scene("parallax", n_frames=15)
    ds, occ = synthdata.synth_scene(spec)
    return spec, ds, occ


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
