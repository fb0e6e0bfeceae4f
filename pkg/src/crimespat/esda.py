"""Exploratory spatial statistics: Moran's I, Getis-Ord G*, Spearman, deprivation PCA."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateVarianceError
from .weights import ContiguityWeights

log = logging.getLogger(__name__)


def _values(x, w: ContiguityWeights | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if w is not None and x.size != w.n:
        raise ValueError(f"{x.size} values for {w.n} spatial units")
    if not np.all(np.isfinite(x)):
        raise ValueError("values contain NaN/inf; subset the weights to complete units first")
    return x


def _check_variance(x: np.ndarray, what: str = "x"):
    if x.size == 0 or np.all(x == x[0]):
        raise DegenerateVarianceError(f"{what} is constant; the statistic is undefined")


def morans_i(x, w: ContiguityWeights) -> float:
    """Global Moran's I with the n / S0 scaling, for any weights standardization."""
    x = _values(x, w)
    _check_variance(x)
    z = x - x.mean()
    s0 = w.matrix.sum()
    if s0 == 0:
        raise DegenerateVarianceError("weights have no links (S0 = 0)")
    return float(w.n / s0 * (z @ (w.matrix @ z)) / (z @ z))


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected: float
    p_perm: float
    permutations: int
    seed: int


def morans_permutation(x, w: ContiguityWeights, permutations: int = 999, seed: int = 0) -> MoranResult:
    """Moran's I with a two-sided total-randomization pseudo p-value.

    Replicate ``r`` draws its permutation from ``default_rng([seed, r])`` so
    results do not depend on evaluation order.
    """
    if permutations < 99:
        raise ValueError("at least 99 permutations are required")
    x = _values(x, w)
    observed = morans_i(x, w)
    n = w.n
    expected = -1.0 / (n - 1)
    z = x - x.mean()
    scale = n / w.matrix.sum() / (z @ z)
    exceed = 0
    batch = 256
    for start in range(0, permutations, batch):
        reps = range(start, min(start + batch, permutations))
        zp = np.column_stack([np.random.default_rng([seed, r]).permutation(z) for r in reps])
        sims = scale * np.einsum("ij,ij->j", zp, w.matrix @ zp)
        exceed += int(np.count_nonzero(np.abs(sims - expected) >= abs(observed - expected)))
    return MoranResult(
        I=observed,
        expected=expected,
        p_perm=(1 + exceed) / (permutations + 1),
        permutations=permutations,
        seed=seed,
    )


class HotSpotClass(str, Enum):
    HOT = "Hot"
    COLD = "Cold"
    NOT_SIGNIFICANT = "NotSignificant"


@dataclass
class GStarResult:
    ids: tuple
    g_z: np.ndarray
    classes: list[HotSpotClass]
    threshold: float
    flagged: list = field(default_factory=list)

    def mask(self, cls: HotSpotClass) -> np.ndarray:
        return np.array([c is cls for c in self.classes], dtype=bool)


def getis_ord_gstar(x, w: ContiguityWeights, threshold: float = 1.96) -> GStarResult:
    """Standardized G*_i for every unit, classified at |z| >= threshold.

    ``w`` is used as given; pass ``with_self(binary)`` for the usual Gi*
    convention.  The spread ``s_x`` is the population standard deviation.
    Units whose variance term is not positive get NaN and are flagged.
    """
    x = _values(x, w)
    _check_variance(x)
    n = x.size
    xbar = x.mean()
    s = math.sqrt(np.mean(x * x) - xbar * xbar)
    m = w.matrix.tocsr()
    wsum = np.asarray(m.sum(axis=1)).ravel()
    wsq = np.asarray(m.multiply(m).sum(axis=1)).ravel()
    radicand = (n * wsq - wsum**2) / (n - 1)
    num = m @ x - xbar * wsum
    ok = radicand > 0
    g = np.full(n, np.nan)
    g[ok] = num[ok] / (s * np.sqrt(radicand[ok]))
    flagged = [w.ids[k] for k in np.flatnonzero(~ok)]
    if flagged:
        log.warning("G*: %d unit(s) with non-positive variance term marked NotSignificant", len(flagged))
    classes = []
    for z in g:
        if z >= threshold:
            classes.append(HotSpotClass.HOT)
        elif z <= -threshold:
            classes.append(HotSpotClass.COLD)
        else:
            classes.append(HotSpotClass.NOT_SIGNIFICANT)
    return GStarResult(tuple(w.ids), g, classes, threshold, flagged)


@dataclass(frozen=True)
class ProfileRow:
    cls: HotSpotClass
    variable: str
    n: int
    mean: float
    sd: float


@dataclass
class HotspotProfile:
    rows: list[ProfileRow]
    empty: bool


def hotspot_profile(
    gstar: GStarResult,
    variables: Mapping[str, Sequence[float]],
    classes: Sequence[HotSpotClass] = (HotSpotClass.HOT,),
) -> HotspotProfile:
    """Mean and sample SD (ddof=1) of each variable over units in each class.

    Missing values are dropped per variable.
    """
    rows = []
    any_units = False
    for cls in classes:
        mask = gstar.mask(cls)
        if not mask.any():
            continue
        any_units = True
        for name, values in variables.items():
            v = np.asarray(values, dtype=float)[mask]
            v = v[np.isfinite(v)]
            mean = float(v.mean()) if v.size else math.nan
            sd = float(v.std(ddof=1)) if v.size > 1 else math.nan
            rows.append(ProfileRow(cls, name, int(v.size), mean, sd))
    return HotspotProfile(rows, empty=not any_units)


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("spearman: inputs differ in length")
    if x.size < 3:
        raise ValueError("spearman: need at least 3 observations")
    _check_variance(x, "first argument")
    _check_variance(y, "second argument")
    rx = rankdata(x) - (x.size + 1) / 2
    ry = rankdata(y) - (y.size + 1) / 2
    r = float(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)))
    return max(-1.0, min(1.0, r))


def pairwise_spearman(x, y) -> float:
    """Spearman over pairs where both values are finite; NaN when undefined."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    try:
        return spearman(x[ok], y[ok])
    except ValueError:
        return math.nan


@dataclass
class CorrelationMatrix:
    labels: list[str]
    values: np.ndarray  # lower triangle incl. diagonal; NaN above

    def cells(self):
        for i, a in enumerate(self.labels):
            for j in range(i + 1):
                yield a, self.labels[j], float(self.values[i, j])


def spearman_matrix(columns: Mapping[str, Sequence[float]]) -> CorrelationMatrix:
    labels = list(columns)
    k = len(labels)
    vals = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i + 1):
            vals[i, j] = 1.0 if i == j else pairwise_spearman(columns[labels[i]], columns[labels[j]])
    return CorrelationMatrix(labels, vals)


@dataclass
class CorrelationTables:
    full: CorrelationMatrix
    night: CorrelationMatrix
    diff: CorrelationMatrix


def correlation_tables(
    crime_all: Mapping[str, Sequence[float]],
    crime_night: Mapping[str, Sequence[float]],
    covariates: Mapping[str, Sequence[float]],
) -> CorrelationTables:
    """Full-day and night Spearman matrices and their difference (night - all).

    ``crime_all`` and ``crime_night`` must list the crime types in the same
    order.  Differences are reported for cells involving a crime variable;
    covariate-only cells are NaN.
    """
    if len(crime_all) != len(crime_night):
        raise ValueError("crime_all and crime_night must have the same crime types")
    full = spearman_matrix({**crime_all, **covariates})
    night = spearman_matrix({**crime_night, **covariates})
    nc = len(crime_all)
    diff = night.values - full.values
    for i in range(len(full.labels)):
        for j in range(i + 1):
            if i >= nc and j >= nc:
                diff[i, j] = np.nan
    return CorrelationTables(full, night, CorrelationMatrix(night.labels, diff))


@dataclass
class DeprivationIndex:
    scores: np.ndarray
    loadings: np.ndarray
    explained_share: float
    eigenvalue: float
    indicators: list[str]
    dropped: list[str]


def deprivation_pca(indicators: Mapping[str, Sequence[float]], sign_reference: str = "poverty") -> DeprivationIndex:
    """First principal component of the standardized indicators.

    Uses the correlation matrix; standardization uses the sample SD so the
    score variance equals the leading eigenvalue.  Units missing any indicator
    get a NaN score.  The loading on ``sign_reference`` (or on the first
    indicator if that one was dropped) is made positive.
    """
    names = list(indicators)
    data = np.column_stack([np.asarray(indicators[k], dtype=float) for k in names])
    complete = np.all(np.isfinite(data), axis=1)
    if complete.sum() < 5:
        raise ValueError("deprivation PCA needs at least 5 units with every indicator present")
    fit = data[complete]
    sd = fit.std(axis=0, ddof=1)
    keep = sd > 0
    dropped = [k for k, ok in zip(names, keep) if not ok]
    for k in dropped:
        log.warning("deprivation indicator %r is constant and was dropped", k)
    if not keep.any():
        raise DegenerateVarianceError("every deprivation indicator is constant")
    used = [k for k, ok in zip(names, keep) if ok]
    z = (fit[:, keep] - fit[:, keep].mean(axis=0)) / sd[keep]
    corr = (z.T @ z) / (z.shape[0] - 1)
    evals, evecs = np.linalg.eigh(corr)
    lam = float(evals[-1])
    v = evecs[:, -1]
    ref = used.index(sign_reference) if sign_reference in used else 0
    if v[ref] < 0:
        v = -v
    scores = np.full(data.shape[0], np.nan)
    scores[complete] = z @ v
    return DeprivationIndex(
        scores=scores,
        loadings=v,
        explained_share=lam / len(used),
        eigenvalue=lam,
        indicators=used,
        dropped=dropped,
    )


@dataclass(frozen=True)
class Summary:
    variable: str
    n: int
    mean: float
    sd: float
    min: float
    max: float


def describe(columns: Mapping[str, Sequence[float]]) -> list[Summary]:
    """Mean, sample SD, min and max of each column over its finite values."""
    out = []
    for name, values in columns.items():
        v = np.asarray(values, dtype=float)
        v = v[np.isfinite(v)]
        if v.size == 0:
            out.append(Summary(name, 0, math.nan, math.nan, math.nan, math.nan))
            continue
        sd = float(v.std(ddof=1)) if v.size > 1 else math.nan
        out.append(Summary(name, int(v.size), float(v.mean()), sd, float(v.min()), float(v.max())))
    return out
