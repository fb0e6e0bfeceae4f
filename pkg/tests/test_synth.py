import hashlib
import math

import numpy as np
import pytest

from crimespat.esda import morans_permutation
from crimespat.ingest import CRIME_TYPES, CrimeType, DayNight, classify_daynight, load_blockgroups, parse_crimes
from crimespat.parcels import load_parcels
from crimespat.synth import (
    SynthConfig,
    forward_residual,
    grid_polygons,
    lattice_weights,
    make_city,
    simulate_lag,
    write_inputs,
)


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


class TestConfig:
    @pytest.mark.parametrize("kw", [{"rows": 2, "cols": 4}, {"rho": 0.99}, {"rho": -0.9}, {"noise_sd": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


class TestLattice:
    @pytest.mark.parametrize("rows,cols", [(3, 3), (4, 7), (10, 10)])
    def test_adjacency_counts(self, rows, cols):
        w = lattice_weights(rows, cols, standardize=False)
        # Queen links: horizontal, vertical and two diagonals, each counted both ways
        links = rows * (cols - 1) + cols * (rows - 1) + 2 * (rows - 1) * (cols - 1)
        assert w.adjacency.nnz == 2 * links
        assert sorted(set(w.degrees.tolist())) == sorted({3, 5, 8} if min(rows, cols) > 2 else {3, 5})

    def test_ids_row_major(self):
        ids = [i for i, _ in grid_polygons(4, 3)]
        assert ids == sorted(ids) and ids[0] == "BG00" and ids[-1] == "BG11"

    def test_forward_residual(self, rng):
        w = lattice_weights(15, 15)
        X = np.column_stack([np.ones(w.n), rng.normal(size=(w.n, 2))])
        for rho in (-0.5, 0.0, 0.4, 0.9):
            y, eps = simulate_lag(w, X, [1.0, 2.0, -1.0], rho, 1.5, rng)
            assert forward_residual(w, y, X, [1.0, 2.0, -1.0], rho, eps) < 1e-8


class TestCity:
    def test_deterministic_files(self, tmp_path):
        cfg = SynthConfig(rows=5, cols=5, seed=11, crime_scale=0.3)
        write_inputs(make_city(cfg), tmp_path / "a")
        write_inputs(make_city(cfg), tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")
        write_inputs(make_city(SynthConfig(rows=5, cols=5, seed=12, crime_scale=0.3)), tmp_path / "c")
        assert digest(tmp_path / "a")["crimes.csv"] != digest(tmp_path / "c")["crimes.csv"]

    def test_night_share(self):
        share = {t: 0.25 for t in CRIME_TYPES}
        city = make_city(SynthConfig(rows=6, cols=6, seed=3, crime_scale=3.0, night_share=share))
        n = len(city.crimes)
        night = sum(classify_daynight(c, city.windows) is DayNight.NIGHT for c in city.crimes)
        sigma = math.sqrt(0.25 * 0.75 / n)
        assert n > 2000
        assert abs(night / n - 0.25) < 3 * sigma

    def test_null_rates_rarely_clustered(self):
        rejections = 0
        for s in range(40):
            c = make_city(SynthConfig(rows=8, cols=8, seed=s, rho=0.0, crime_scale=0.01))
            res = morans_permutation(c.true_rates[CrimeType.BURGLARY], c.weights, 199, seed=s)
            rejections += res.p_perm <= 0.05
        # Binomial(40, 0.05): mean 2, sd 1.4
        assert rejections <= 7

    def test_lagged_rates_clustered(self):
        c = make_city(SynthConfig(rows=10, cols=10, seed=5, rho=0.8, noise_sd=6.0, crime_scale=0.01))
        res = morans_permutation(c.true_rates[CrimeType.ROBBERY], c.weights, 199, seed=1)
        assert res.I > res.expected and res.p_perm <= 0.05

    def test_round_trip(self, small_city, city_inputs):
        with city_inputs["crimes"].open() as fh:
            parsed = parse_crimes(fh)
        assert parsed.skipped == 0
        assert parsed.records == small_city.crimes
        with city_inputs["blockgroups"].open() as fh:
            bgs = load_blockgroups(fh)
        assert [b.id for b in bgs] == [b.id for b in small_city.blockgroups]
        for a, b in zip(bgs, small_city.blockgroups):
            assert (a.pop, a.percrent, a.snap) == (b.pop, b.percrent, b.snap)
            np.testing.assert_array_equal(next(a.geometry.rings), next(b.geometry.rings))
        with city_inputs["parcels"].open() as fh:
            parcels = load_parcels(fh)
        assert [(p.id, p.landuse_code, p.units) for p in parcels] == [
            (p.id, p.landuse_code, p.units) for p in small_city.parcels
        ]
