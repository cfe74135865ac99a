from __future__ import annotations

import numpy as np
import pytest

from alzsim.config import from_dict, preset
from alzsim.measure import ParticleMeasure


def random_measure(rng: np.random.Generator, n_atoms: int, grid: bool = False) -> ParticleMeasure:
    if grid:
        pos = rng.integers(0, 11, n_atoms) / 10.0
    else:
        pos = rng.uniform(0.0, 1.0, n_atoms)
    w = rng.uniform(0.05, 1.0, n_atoms)
    return ParticleMeasure.from_atoms(pos, w / w.sum())


def small_config(name: str, **grid):
    raw = preset(name)
    raw["grid"].update(grid)
    return from_dict(raw)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def seeded_small():
    """Seeded preset on a reduced mesh, for fast structural tests."""
    raw = preset("seeded")
    raw["grid"].update(K=21, M=51)
    return from_dict(raw)
