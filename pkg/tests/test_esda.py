import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from crimespat.errors import DegenerateVarianceError
from crimespat.esda import (
    HotSpotClass,
    correlation_tables,
    deprivation_pca,
    describe,
    getis_ord_gstar,
    hotspot_profile,
    morans_i,
    morans_permutation,
    pairwise_spearman,
    spearman,
)
from crimespat.synth import grid_polygons
from crimespat.weights import ContiguityWeights, build_queen, row_standardize, with_self

from oracles import gstar_direct, moran_double_sum, spearman_oracle

GRID5 = build_queen(grid_polygons(5, 5))
GRID10 = build_queen(grid_polygons(10, 10))


def k4_row():
    return row_standardize(ContiguityWeights(tuple("abcd"), sparse.csr_matrix(np.ones((4, 4)) - np.eye(4))))


def torus(rows, cols):
    n = rows * cols
    m = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr or dc:
                        m[r * cols + c, ((r + dr) % rows) * cols + (c + dc) % cols] = 1
    return ContiguityWeights(tuple(f"{k:03d}" for k in range(n)), sparse.csr_matrix(m))


class TestMoran:
    def test_k4(self):
        assert morans_i([1, 2, 3, 4], k4_row()) == pytest.approx(-1 / 3, abs=1e-15)

    def test_constant_rejected(self):
        with pytest.raises(DegenerateVarianceError):
            morans_i([2.0] * 25, GRID5)

    def test_double_sum_oracle(self, maps, rng):
        for cells, polys in maps[:30]:
            b = build_queen(list(enumerate(polys)))
            for w in (b, row_standardize(b)):
                x = rng.normal(size=w.n)
                assert morans_i(x, w) == pytest.approx(moran_double_sum(x, w.dense()), abs=1e-10)

    def test_affine_invariance(self, rng):
        w = row_standardize(GRID10)
        x = rng.gamma(2.0, size=100)
        base = morans_i(x, w)
        for a, b in ((3.0, -7.0), (-0.01, 1e3), (1e4, 5.0)):
            assert morans_i(a * x + b, w) == pytest.approx(base, abs=1e-12)

    def test_permutation_deterministic(self, rng):
        w = row_standardize(GRID10)
        x = rng.normal(size=100)
        assert morans_permutation(x, w, 199, seed=4) == morans_permutation(x, w, 199, seed=4)

    def test_gradient_is_extreme(self):
        w = row_standardize(GRID10)
        x = np.array([r + c for r in range(10) for c in range(10)], dtype=float)
        res = morans_permutation(x, w, 999, seed=1)
        assert res.p_perm == 1 / 1000
        assert res.expected == -1 / 99

    def test_null_calibration(self):
        w = row_standardize(GRID10)
        rejections = 0
        for t in range(200):
            x = np.random.default_rng(10_000 + t).normal(size=100)
            rejections += morans_permutation(x, w, 199, seed=t).p_perm <= 0.05
        # Binomial(200, 0.05): mean 10, sd 3.1
        assert 2 <= rejections <= 20

    def test_too_few_permutations(self):
        with pytest.raises(ValueError):
            morans_permutation(np.arange(25.0), row_standardize(GRID5), 50)


class TestGStar:
    def test_direct_oracle(self, maps, rng):
        for cells, polys in maps[:30]:
            w = with_self(build_queen(list(enumerate(polys))))
            x = rng.exponential(size=w.n)
            np.testing.assert_allclose(getis_ord_gstar(x, w).g_z, gstar_direct(x, w.dense()), atol=1e-10)

    def test_spike(self):
        x = np.zeros(25)
        x[12] = 10.0
        g = getis_ord_gstar(x, with_self(GRID5))
        # the spike's 3x3 block ties; the centre attains the maximum
        assert g.g_z[12] == pytest.approx(g.g_z.max(), abs=1e-12)
        assert g.g_z[12] > g.g_z[0] + 1
        assert all(g.g_z[k] < 0 for k in (0, 4, 20, 24))

    def test_mirror(self, rng):
        x = rng.normal(size=25).reshape(5, 5)
        a = getis_ord_gstar(x.ravel(), with_self(GRID5)).g_z.reshape(5, 5)
        b = getis_ord_gstar(x[:, ::-1].ravel(), with_self(GRID5)).g_z.reshape(5, 5)
        np.testing.assert_allclose(a[:, ::-1], b, atol=1e-12)

    def test_uniform_degree_mean_zero(self, rng):
        w = with_self(torus(10, 10))
        for _ in range(10):
            assert abs(getis_ord_gstar(rng.normal(size=100), w).g_z.mean()) < 0.05

    def test_classes(self):
        x = np.zeros(25)
        x[12] = 10.0
        g = getis_ord_gstar(x, with_self(GRID5), threshold=1.0)
        for z, c in zip(g.g_z, g.classes):
            assert (c is HotSpotClass.HOT) == (z >= 1.0)
            assert (c is HotSpotClass.COLD) == (z <= -1.0)

    def test_degenerate_variance_unit(self):
        # a unit linked to everything has a zero variance term
        n = 6
        m = np.eye(n)
        m[0, :] = m[:, 0] = 1
        w = ContiguityWeights(tuple("abcdef"), sparse.csr_matrix(m), include_self=True)
        g = getis_ord_gstar(np.arange(6.0), w)
        assert math.isnan(g.g_z[0]) and g.classes[0] is HotSpotClass.NOT_SIGNIFICANT
        assert g.flagged == ["a"]

    def test_constant_rejected(self):
        with pytest.raises(DegenerateVarianceError):
            getis_ord_gstar(np.ones(25), with_self(GRID5))


class TestProfile:
    def test_hand_fixture(self):
        # 6 units; units 0, 2, 3 are hot
        class G:
            def mask(self, cls):
                return np.array([1, 0, 1, 1, 0, 0], bool) if cls is HotSpotClass.HOT else np.zeros(6, bool)

        prof = hotspot_profile(G(), {"v": [2.0, 100.0, 4.0, 9.0, -5.0, 0.0]})
        (row,) = prof.rows
        assert row.n == 3 and row.mean == pytest.approx(5.0)
        # deviations -3, -1, 4 -> SS 26, / 2
        assert row.sd == pytest.approx(math.sqrt(13.0))

    def test_no_hot_units(self, rng):
        g = getis_ord_gstar(rng.normal(size=25), with_self(GRID5), threshold=50)
        assert hotspot_profile(g, {"v": np.ones(25)}).empty


class TestSpearman:
    def test_identity_and_reverse(self, rng):
        x = np.sort(rng.normal(size=30))
        assert spearman(x, x) == pytest.approx(1.0, abs=1e-15)
        assert spearman(x, x[::-1]) == pytest.approx(-1.0, abs=1e-15)

    def test_tie_fixture(self):
        assert spearman([1, 2, 2, 3], [1, 3, 2, 4]) == pytest.approx(0.9487, abs=1e-4)
        assert spearman([1, 2, 2, 3], [1, 3, 2, 4]) == pytest.approx(4.5 / math.sqrt(22.5), abs=1e-15)

    def test_brute_force(self, rng):
        for _ in range(1000):
            n = int(rng.integers(3, 25))
            x = rng.integers(0, 6, n).astype(float)
            y = rng.integers(0, 6, n).astype(float)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            assert spearman(x, y) == pytest.approx(spearman_oracle(x, y), abs=1e-12)

    def test_monotone_invariance(self, rng):
        x, y = rng.normal(size=40), rng.normal(size=40)
        assert spearman(np.exp(x), y**3) == pytest.approx(spearman(x, y), abs=1e-14)

    def test_errors(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2])
        with pytest.raises(ValueError):
            spearman([1, 2, 3], [1, 2])
        with pytest.raises(DegenerateVarianceError):
            spearman([1, 1, 1], [1, 2, 3])

    def test_pairwise_drops_missing(self):
        x = [1, 2, np.nan, 4, 5]
        y = [2, 4, 100, 8, 10]
        assert pairwise_spearman(x, y) == pytest.approx(1.0)
        assert math.isnan(pairwise_spearman([1, 1, 1], [1, 2, 3]))


class TestCorrelationTables:
    def test_diagonal_and_zero_diff(self, rng):
        crime = {"BURG": rng.normal(size=30), "ROB": rng.normal(size=30)}
        cov = {"LIQDENS": rng.normal(size=30)}
        t = correlation_tables(crime, {k + "N": v for k, v in crime.items()}, cov)
        assert np.all(np.diag(t.full.values) == 1)
        cells = {(a, b): v for a, b, v in t.diff.cells()}
        assert cells[("ROBN", "BURGN")] == 0.0 and cells[("LIQDENS", "BURGN")] == 0.0
        assert math.isnan(cells[("LIQDENS", "LIQDENS")])
        assert t.full.labels == ["BURG", "ROB", "LIQDENS"]


class TestDeprivation:
    def test_perfectly_correlated(self, rng):
        a = rng.normal(size=50)
        d = deprivation_pca({"poverty": a, "snap": 3 * a + 2})
        assert d.explained_share == pytest.approx(1.0, abs=1e-9)
        assert d.loadings[0] == pytest.approx(d.loadings[1], abs=1e-12)
        assert d.loadings[0] > 0
        assert d.scores.mean() == pytest.approx(0.0, abs=1e-9)
        assert d.scores.var(ddof=1) == pytest.approx(d.eigenvalue, abs=1e-9)

    def test_single_usable_indicator(self, rng):
        a = rng.normal(5, 2, size=20)
        d = deprivation_pca({"poverty": a, "unemployment": np.full(20, 7.0)})
        assert d.dropped == ["unemployment"]
        np.testing.assert_allclose(d.scores, (a - a.mean()) / a.std(ddof=1), atol=1e-12)

    def test_sign_and_missing(self, rng):
        base = rng.normal(size=40)
        ind = {
            "poverty": base + 0.1 * rng.normal(size=40),
            "unemployment": base + 0.5 * rng.normal(size=40),
            "no_diploma": -base + rng.normal(size=40),
            "snap": base + rng.normal(size=40),
        }
        ind["snap"][3] = np.nan
        d = deprivation_pca(ind)
        assert d.loadings[0] > 0
        assert np.linalg.norm(d.loadings) == pytest.approx(1.0)
        assert math.isnan(d.scores[3])
        ok = np.isfinite(d.scores)
        assert d.scores[ok].mean() == pytest.approx(0, abs=1e-12)
        assert d.scores[ok].var(ddof=1) == pytest.approx(d.eigenvalue, abs=1e-9)
        assert 0 < d.explained_share <= 1

    def test_too_few_units(self):
        with pytest.raises(ValueError):
            deprivation_pca({"poverty": [1.0, 2, 3, 4], "snap": [2.0, 1, 4, 3]})


def test_describe():
    (s,) = describe({"v": [1.0, 2.0, np.nan, 6.0]})
    assert (s.n, s.mean, s.min, s.max) == (3, 3.0, 1.0, 6.0)
    assert s.sd == pytest.approx(math.sqrt(7.0))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=3, max_size=30))
def test_spearman_bounded_and_matches_oracle(pairs):
    x = [float(a) for a, _ in pairs]
    y = [float(b) for _, b in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    r = spearman(x, y)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(spearman_oracle(x, y), abs=1e-12)
