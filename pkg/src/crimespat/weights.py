"""Queen contiguity weights and the spectral quantities the lag model needs."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Hashable, Sequence, TextIO

import numpy as np
from scipy import sparse

from .errors import DataError, IslandError
from .geo import PolygonGeom, build_index, polygons_touch

RHO_EPS = 1e-6


class Standardization(str, Enum):
    BINARY = "Binary"
    ROW = "RowStandardized"


@dataclass(frozen=True, eq=False)
class ContiguityWeights:
    """Sparse weights aligned with ``ids`` (sorted)."""

    ids: tuple[Hashable, ...]
    matrix: sparse.csr_matrix
    standardization: Standardization = Standardization.BINARY
    include_self: bool = False

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def adjacency(self) -> sparse.csr_matrix:
        """Binary neighbour structure (diagonal excluded)."""
        a = (self.matrix != 0).astype(float).tocsr()
        a.setdiag(0.0)
        a.eliminate_zeros()
        return a

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def islands(self) -> list[Hashable]:
        return [i for i, d in zip(self.ids, self.degrees) if d == 0]

    def neighbors(self, unit: Hashable) -> list[Hashable]:
        k = self.ids.index(unit)
        row = self.adjacency.getrow(k)
        return [self.ids[j] for j in sorted(row.indices)]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def subset(self, ids: Sequence[Hashable]) -> "ContiguityWeights":
        """Restrict to ``ids`` and re-apply this standardization/self convention."""
        pos = {u: k for k, u in enumerate(self.ids)}
        try:
            keep = [pos[u] for u in ids]
        except KeyError as exc:
            raise DataError(f"unit {exc} not in weights") from None
        b = self.adjacency[keep][:, keep].tocsr()
        w = ContiguityWeights(tuple(ids), b, Standardization.BINARY, False)
        if self.standardization is Standardization.ROW:
            w = row_standardize(w)
        if self.include_self:
            w = with_self(w)
        return w


def build_queen(
    units: Sequence[tuple[Hashable, PolygonGeom]], tol: float = 1e-6
) -> ContiguityWeights:
    """First-order Queen contiguity; units are sorted by id first."""
    units = sorted(units, key=lambda u: u[0])
    ids = tuple(u for u, _ in units)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate unit ids in weights construction")
    geoms = [g for _, g in units]
    index = build_index(enumerate(geoms))
    rows, cols = [], []
    for i, g in enumerate(geoms):
        minx, miny, maxx, maxy = g.bounds
        for j in index.query_bbox((minx - tol, miny - tol, maxx + tol, maxy + tol)):
            if j > i and polygons_touch(g, geoms[j], tol):
                rows += [i, j]
                cols += [j, i]
    n = len(ids)
    m = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    m.sum_duplicates()
    return ContiguityWeights(ids, m, Standardization.BINARY, False)


def row_standardize(w: ContiguityWeights) -> ContiguityWeights:
    """Rows scaled to sum to 1; island rows stay zero."""
    b = w.adjacency
    d = np.asarray(b.sum(axis=1)).ravel()
    inv = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    return ContiguityWeights(w.ids, (sparse.diags(inv) @ b).tocsr(), Standardization.ROW, False)


def with_self(w: ContiguityWeights) -> ContiguityWeights:
    """Binary weights with w_ii = 1 (the G* convention)."""
    if w.standardization is not Standardization.BINARY:
        w = ContiguityWeights(w.ids, w.adjacency, Standardization.BINARY, False)
    m = (w.adjacency + sparse.identity(w.n, format="csr")).tocsr()
    return ContiguityWeights(w.ids, m, Standardization.BINARY, True)


def drop_islands(w: ContiguityWeights) -> ContiguityWeights:
    isl = set(w.islands)
    return w.subset([u for u in w.ids if u not in isl])


def spectrum(w: ContiguityWeights) -> np.ndarray:
    """Sorted real eigenvalues of the weights matrix as used in the lag model.

    Row-standardized weights are handled through the symmetric similar matrix
    D^-1/2 B D^-1/2; island rows contribute zero eigenvalues.
    """
    if w.include_self:
        raise ValueError("spectrum() expects weights without self-neighbours")
    b = w.adjacency.toarray()
    if w.standardization is Standardization.BINARY:
        return np.linalg.eigvalsh(b)
    d = b.sum(axis=1)
    s = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    sym = s[:, None] * b * s[None, :]
    return np.linalg.eigvalsh(0.5 * (sym + sym.T))


def eigen_range(w: ContiguityWeights, drop: bool = False) -> tuple[float, float]:
    """(lambda_min, lambda_max) of the row-standardized matrix."""
    if w.islands:
        if not drop:
            raise IslandError(w.islands)
        w = drop_islands(w)
    if w.standardization is not Standardization.ROW:
        w = row_standardize(w)
    lam = spectrum(w)
    return float(lam[0]), float(lam[-1])


def rho_bounds(lam_min: float, lam_max: float = 1.0, eps: float = RHO_EPS) -> tuple[float, float]:
    return 1.0 / lam_min + eps, 1.0 / lam_max - eps


def write_weights(w: ContiguityWeights, stream: TextIO) -> None:
    """Sparse text: ``n`` header then ``i j w`` lines; islands get an ``i i 0`` line."""
    bad = [u for u in w.ids if not str(u) or any(ch.isspace() for ch in str(u))]
    if bad:
        raise DataError(f"ids must be non-empty and free of whitespace for the text format: {bad[:5]}")
    stream.write(f"{w.n}\n")
    m = w.matrix.tocsr()
    for k, unit in enumerate(w.ids):
        start, end = m.indptr[k], m.indptr[k + 1]
        cols = m.indices[start:end]
        vals = m.data[start:end]
        nz = [(c, v) for c, v in sorted(zip(cols, vals)) if v != 0]
        if not nz:
            stream.write(f"{unit} {unit} 0\n")
        for c, v in nz:
            stream.write(f"{unit} {w.ids[c]} {float(v)!r}\n")


def read_weights(
    stream: TextIO,
    standardization: Standardization = Standardization.BINARY,
    id_type=str,
) -> ContiguityWeights:
    lines = [ln.split() for ln in stream.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty weights file")
    try:
        n = int(lines[0][0])
        triples = [(id_type(a), id_type(b), float(v)) for a, b, v in lines[1:]]
    except ValueError as exc:
        raise DataError(f"malformed weights file: {exc}") from None
    ids = tuple(sorted({a for a, _, _ in triples} | {b for _, b, _ in triples}))
    if len(ids) != n:
        raise DataError(f"weights header says n={n} but {len(ids)} ids appear")
    pos = {u: k for k, u in enumerate(ids)}
    r = [pos[a] for a, _, v in triples if v != 0]
    c = [pos[b] for _, b, v in triples if v != 0]
    v = [v for _, _, v in triples if v != 0]
    m = sparse.csr_matrix((v, (r, c)), shape=(n, n))
    include_self = bool(m.diagonal().any())
    return ContiguityWeights(ids, m, standardization, include_self)
