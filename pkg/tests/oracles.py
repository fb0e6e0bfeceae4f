"""Brute-force reference implementations used as test oracles.

Deliberately naive: explicit loops over the textbook definitions, no shared
code with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def moran_double_sum(x, W) -> float:
    n = len(x)
    xbar = sum(x) / n
    num = 0.0
    s0 = 0.0
    for i in range(n):
        for j in range(n):
            num += W[i][j] * (x[i] - xbar) * (x[j] - xbar)
            s0 += W[i][j]
    den = sum((xi - xbar) ** 2 for xi in x)
    return (n / s0) * num / den


def gstar_direct(x, W) -> list[float]:
    """G*_i z-scores with w_ii included in W and population SD."""
    n = len(x)
    xbar = sum(x) / n
    s = math.sqrt(sum(v * v for v in x) / n - xbar * xbar)
    out = []
    for i in range(n):
        sw = sum(W[i][j] for j in range(n))
        sw2 = sum(W[i][j] ** 2 for j in range(n))
        num = sum(W[i][j] * x[j] for j in range(n)) - xbar * sw
        rad = (n * sw2 - sw * sw) / (n - 1)
        out.append(num / (s * math.sqrt(rad)) if rad > 0 else math.nan)
    return out


def average_ranks(x) -> list[float]:
    out = []
    for v in x:
        less = sum(1 for u in x if u < v)
        equal = sum(1 for u in x if u == v)
        out.append(less + (equal + 1) / 2.0)
    return out


def pearson(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def spearman_oracle(x, y) -> float:
    return pearson(average_ranks(list(x)), average_ranks(list(y)))


def seg_dist(px, py, x1, y1, x2, y2) -> float:
    dx, dy = x2 - x1, y2 - y1
    L = dx * dx + dy * dy
    if L == 0:
        return math.hypot(px - x1, py - y1)
    t = max(0.0, min(1.0, ((px - x1) * dx + (py - y1) * dy) / L))
    return math.hypot(px - (x1 + t * dx), py - (y1 + t * dy))


def ring_edges(rings):
    for ring in rings:
        for k in range(len(ring) - 1):
            yield ring[k][0], ring[k][1], ring[k + 1][0], ring[k + 1][1]


def inside_even_odd(px, py, rings) -> bool:
    """Ray casting to +x; boundary handled separately by the caller."""
    c = False
    for x1, y1, x2, y2 in ring_edges(rings):
        if (y1 > py) != (y2 > py):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < xint:
                c = not c
    return c


def polygon_distance(px, py, rings) -> float:
    d = min(seg_dist(px, py, *e) for e in ring_edges(rings))
    if d == 0 or inside_even_odd(px, py, rings):
        return 0.0
    return d


def dense_logdet(W, rho) -> float:
    sign, val = np.linalg.slogdet(np.eye(len(W)) - rho * np.asarray(W))
    assert sign > 0
    return float(val)


def lag_loglik(rho, beta, sigma2, y, W, X) -> float:
    """Full spatial-lag log-likelihood with a dense determinant."""
    n = len(y)
    A = np.eye(n) - rho * np.asarray(W)
    e = A @ y - X @ beta
    return -0.5 * n * math.log(2 * math.pi * sigma2) - (e @ e) / (2 * sigma2) + dense_logdet(W, rho)


def lag_hessian(rho, beta, sigma2, y, W, X) -> np.ndarray:
    """Analytic observed Hessian of the lag log-likelihood in (rho, beta, sigma2)."""
    W = np.asarray(W)
    n, p = X.shape
    Wy = W @ y
    e = y - rho * Wy - X @ beta
    lam = np.linalg.eigvals(W).real
    H = np.zeros((p + 2, p + 2))
    H[0, 0] = -(Wy @ Wy) / sigma2 - np.sum(lam**2 / (1 - rho * lam) ** 2)
    H[0, 1 : p + 1] = H[1 : p + 1, 0] = -(X.T @ Wy) / sigma2
    H[1 : p + 1, 1 : p + 1] = -(X.T @ X) / sigma2
    H[0, -1] = H[-1, 0] = -(Wy @ e) / sigma2**2
    H[1 : p + 1, -1] = H[-1, 1 : p + 1] = -(X.T @ e) / sigma2**2
    H[-1, -1] = n / (2 * sigma2**2) - (e @ e) / sigma2**3
    return H


def grid_rho(y, W, X, lo, hi, step=1e-4) -> float:
    """Maximiser of the concentrated log-likelihood on a fixed grid (dense algebra)."""
    W = np.asarray(W)
    n = len(y)
    lam = np.linalg.eigvals(W).real
    pinv = np.linalg.pinv(X)
    e0 = y - X @ (pinv @ y)
    Wy = W @ y
    eL = Wy - X @ (pinv @ Wy)
    grid = np.arange(lo, hi, step)
    best, best_val = None, -math.inf
    a, b, c = e0 @ e0, e0 @ eL, eL @ eL
    for r in grid:
        s2 = (a - 2 * r * b + r * r * c) / n
        val = -0.5 * n * math.log(s2) + float(np.sum(np.log(1 - r * lam)))
        if val > best_val:
            best, best_val = float(r), val
    return best


def queen_pairs_lattice(cells: list[tuple[int, int]]) -> set[frozenset]:
    """Neighbour pairs among lattice cells under the 8-neighbourhood."""
    cs = set(cells)
    out = set()
    for r, c in cells:
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if (dr or dc) and (r + dr, c + dc) in cs:
                    out.add(frozenset({(r, c), (r + dr, c + dc)}))
    return out
