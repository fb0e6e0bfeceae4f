import io
import random

import numpy as np
import pytest
from scipy import sparse

from crimespat.errors import DataError, IslandError
from crimespat.geo import PolygonGeom
from crimespat.synth import grid_polygons
from crimespat.weights import (
    ContiguityWeights,
    Standardization,
    build_queen,
    drop_islands,
    eigen_range,
    read_weights,
    rho_bounds,
    row_standardize,
    spectrum,
    with_self,
    write_weights,
)

from conftest import jittered_map
from oracles import queen_pairs_lattice


def pairs(w: ContiguityWeights) -> set[frozenset]:
    a = w.adjacency.tocoo()
    return {frozenset({w.ids[i], w.ids[j]}) for i, j in zip(a.row, a.col)}


def k4():
    b = sparse.csr_matrix(np.ones((4, 4)) - np.eye(4))
    return ContiguityWeights(("a", "b", "c", "d"), b)


class TestBuildQueen:
    def test_three_by_three(self):
        w = build_queen(grid_polygons(3, 3))
        deg = dict(zip(w.ids, w.degrees))
        # row-major ids: centre is the fifth cell, corners first/third/seventh/ninth
        assert deg[w.ids[4]] == 8
        assert [deg[w.ids[k]] for k in (0, 2, 6, 8)] == [3, 3, 3, 3]
        assert [deg[w.ids[k]] for k in (1, 3, 5, 7)] == [5, 5, 5, 5]

    def test_disjoint(self):
        w = build_queen([("a", PolygonGeom.box(0, 0, 1, 1)), ("b", PolygonGeom.box(100, 0, 101, 1))])
        assert w.adjacency.nnz == 0 and w.islands == ["a", "b"]

    def test_jittered_lattices_match_enumeration(self, maps):
        for cells, polys in maps[:40]:
            ids = [f"{r:02d}-{c:02d}" for r, c in cells]
            w = build_queen(list(zip(ids, polys)))
            expected = {frozenset(f"{r:02d}-{c:02d}" for r, c in p) for p in queen_pairs_lattice(cells)}
            assert pairs(w) == expected
            m = w.matrix.toarray()
            assert np.array_equal(m, m.T)
            assert np.all(np.diag(m) == 0)

    def test_input_order_invariance(self):
        cells, polys = jittered_map(6, 6, 30, seed=5)
        units = [(f"u{k:02d}", g) for k, g in enumerate(polys)]
        shuffled = units[:]
        random.Random(2).shuffle(shuffled)
        a, b = build_queen(units), build_queen(shuffled)
        assert a.ids == b.ids and (a.matrix != b.matrix).nnz == 0

    def test_snapping_tolerance(self):
        a = PolygonGeom.box(0, 0, 1, 1)
        b = PolygonGeom.box(1 + 5e-7, 0, 2, 1)
        assert build_queen([("a", a), ("b", b)]).adjacency.nnz == 2
        assert build_queen([("a", a), ("b", b)], tol=1e-8).adjacency.nnz == 0

    def test_duplicate_ids(self):
        with pytest.raises(DataError):
            build_queen([("a", PolygonGeom.box(0, 0, 1, 1)), ("a", PolygonGeom.box(1, 0, 2, 1))])


class TestStandardization:
    def test_four_neighbours(self):
        w = build_queen(grid_polygons(1, 5))
        r = row_standardize(build_queen([(f"{k}", PolygonGeom.box(-1, -1, 1, 1).translated(*d)) for k, d in
                                          enumerate([(0, 0), (2, 0), (-2, 0), (0, 2), (0, -2)])]))
        assert sorted(r.matrix.getrow(0).data.tolist()) == [0.25] * 4
        assert row_standardize(w).standardization is Standardization.ROW

    def test_island_row_zero_and_total(self):
        units = [(f"g{k}", g) for k, (_, g) in enumerate(grid_polygons(2, 2))]
        units.append(("z", PolygonGeom.box(100, 100, 101, 101)))
        r = row_standardize(build_queen(units))
        sums = np.asarray(r.matrix.sum(axis=1)).ravel()
        assert sums.tolist() == [1.0, 1.0, 1.0, 1.0, 0.0]
        assert r.matrix.sum() == pytest.approx(4)

    def test_ones_fixed_point(self, maps):
        for cells, polys in maps[:20]:
            r = row_standardize(build_queen(list(enumerate(polys))))
            np.testing.assert_allclose(r.matrix @ np.ones(r.n), 1.0, atol=1e-14)

    def test_with_self(self):
        w = with_self(k4())
        assert w.include_self and np.all(w.matrix.diagonal() == 1)
        assert w.adjacency.nnz == 12

    def test_subset_restandardizes(self):
        r = row_standardize(build_queen(grid_polygons(3, 3)))
        s = r.subset(r.ids[:3])
        np.testing.assert_allclose(np.asarray(s.matrix.sum(axis=1)).ravel(), [1, 1, 1])


class TestSpectrum:
    def test_k4(self):
        lam = spectrum(row_standardize(k4()))
        np.testing.assert_allclose(lam, [-1 / 3, -1 / 3, -1 / 3, 1.0], atol=1e-12)

    def test_three_by_three_vs_dense(self):
        w = row_standardize(build_queen(grid_polygons(3, 3)))
        lo, hi = eigen_range(w)
        dense = np.sort(np.linalg.eigvals(w.dense()).real)
        assert -1 <= lo < 0 and hi <= 1 + 1e-12
        assert lo == pytest.approx(dense[0], abs=1e-10)
        np.testing.assert_allclose(spectrum(w), dense, atol=1e-10)

    def test_similarity_on_random_maps(self, maps):
        for cells, polys in maps[:30]:
            w = row_standardize(build_queen(list(enumerate(polys))))
            dense = np.sort(np.linalg.eigvals(w.dense()).real)
            np.testing.assert_allclose(spectrum(w), dense, atol=1e-10)
            assert spectrum(w)[-1] <= 1 + 1e-12

    def test_islands_rejected_unless_dropped(self):
        units = list(grid_polygons(2, 2)) + [("z", PolygonGeom.box(100, 100, 101, 101))]
        w = build_queen(units)
        with pytest.raises(IslandError) as exc:
            eigen_range(w)
        assert exc.value.islands == ["z"]
        lo, hi = eigen_range(w, drop=True)
        assert hi == pytest.approx(1.0)
        assert drop_islands(w).n == 4

    def test_rho_bounds(self):
        lo, hi = rho_bounds(-0.5)
        assert lo == pytest.approx(-2 + 1e-6) and hi == pytest.approx(1 - 1e-6)


class TestTextFormat:
    def test_round_trip(self):
        units = list(grid_polygons(3, 3)) + [("z", PolygonGeom.box(100, 100, 101, 101))]
        w = build_queen(units)
        buf = io.StringIO()
        write_weights(w, buf)
        text = buf.getvalue()
        assert text.splitlines()[0] == "10" and "z z 0" in text
        back = read_weights(io.StringIO(text))
        assert back.ids == w.ids and (back.matrix != w.matrix).nnz == 0
        r = row_standardize(w)
        buf = io.StringIO()
        write_weights(r, buf)
        back = read_weights(io.StringIO(buf.getvalue()), Standardization.ROW)
        np.testing.assert_array_equal(back.dense(), r.dense())

    def test_whitespace_ids_rejected(self):
        w = ContiguityWeights(("a b", "c"), sparse.csr_matrix((2, 2)))
        with pytest.raises(DataError):
            write_weights(w, io.StringIO())

    def test_bad_header(self):
        with pytest.raises(DataError):
            read_weights(io.StringIO("3\na b 1\nb a 1\n"))
