from __future__ import annotations

import random

import numpy as np
import pytest

from crimespat.geo import PolygonGeom
from crimespat.synth import SynthConfig, make_city, write_inputs


def jittered_map(rows: int, cols: int, n_cells: int, seed: int, jitter: float = 0.3):
    """A Queen-connected subset of a jittered quadrilateral lattice.

    Returns ``(cells, polygons)`` with ``polygons[k]`` the quad of ``cells[k]``.
    Neighbouring cells share exact vertices, so contiguity is the lattice
    8-neighbourhood.
    """
    rng = random.Random(seed)
    verts = {
        (i, j): (j + rng.uniform(-jitter, jitter), i + rng.uniform(-jitter, jitter))
        for i in range(rows + 1)
        for j in range(cols + 1)
    }
    start = (rng.randrange(rows), rng.randrange(cols))
    chosen = [start]
    seen = {start}
    frontier = set()

    def grow(cell):
        r, c = cell
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                nb = (r + dr, c + dc)
                if 0 <= nb[0] < rows and 0 <= nb[1] < cols and nb not in seen:
                    frontier.add(nb)

    grow(start)
    while len(chosen) < n_cells and frontier:
        nxt = rng.choice(sorted(frontier))
        frontier.discard(nxt)
        seen.add(nxt)
        chosen.append(nxt)
        grow(nxt)
    polys = []
    for r, c in chosen:
        ring = [verts[(r, c)], verts[(r, c + 1)], verts[(r + 1, c + 1)], verts[(r + 1, c)], verts[(r, c)]]
        polys.append(PolygonGeom.from_rings(ring))
    return chosen, polys


def random_maps(count: int, max_n: int = 60, seed: int = 0):
    rng = random.Random(seed)
    out = []
    for k in range(count):
        rows, cols = rng.randint(3, 9), rng.randint(3, 9)
        n = rng.randint(5, min(max_n, rows * cols))
        out.append(jittered_map(rows, cols, n, seed=seed * 1000 + k))
    return out


@pytest.fixture(scope="session")
def maps():
    return random_maps(100)


@pytest.fixture
def rng():
    return np.random.default_rng(20140101)


SMALL_CITY = SynthConfig(rows=6, cols=6, seed=7, crime_scale=0.5)


@pytest.fixture(scope="session")
def small_city():
    return make_city(SMALL_CITY)


@pytest.fixture(scope="session")
def city_inputs(tmp_path_factory, small_city):
    d = tmp_path_factory.mktemp("city")
    return write_inputs(small_city, d)
