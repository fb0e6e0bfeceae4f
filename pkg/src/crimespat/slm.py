"""Maximum-likelihood spatial lag regression, y = rho W y + X beta + e.

Estimation concentrates beta and sigma^2 out of the likelihood and searches
the one-dimensional profile in rho; the log-Jacobian uses the eigenvalues of
W (Ord's method), which is exact and cheap at block-group scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.linalg import solve_triangular
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import spsolve
from scipy.stats import norm

from .errors import (
    CrimeSpatError,
    DomainError,
    IslandError,
    NonConcaveProfileError,
    RankDeficientError,
)
from .weights import RHO_EPS, ContiguityWeights, spectrum

log = logging.getLogger(__name__)

COVARIATES = ("LIQDENS", "PERCRENT", "PERCWHITE", "PERCVAC", "DEPRIVATION", "POPDENS", "QMIPARC")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DesignMatrix:
    response: str
    y: np.ndarray
    X: np.ndarray
    names: list[str]
    ids: list[Hashable]
    dropped: list[Hashable] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.y.size


def design_matrix(
    response: str,
    y: Sequence[float],
    covariates: Mapping[str, Sequence[float]],
    ids: Sequence[Hashable],
    constant: bool = True,
) -> DesignMatrix:
    """Assemble y and X, dropping units with any missing cell."""
    y = np.asarray(y, dtype=float)
    cols = [np.asarray(v, dtype=float) for v in covariates.values()]
    names = list(covariates)
    if constant:
        cols.insert(0, np.ones_like(y))
        names.insert(0, "CONSTANT")
    X = np.column_stack(cols) if cols else np.empty((y.size, 0))
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    dropped = [u for u, keep in zip(ids, ok) if not keep]
    if dropped:
        log.info("%s: %d unit(s) with missing data dropped", response, len(dropped))
    return DesignMatrix(
        response=response,
        y=y[ok],
        X=X[ok],
        names=names,
        ids=[u for u, keep in zip(ids, ok) if keep],
        dropped=dropped,
    )


@dataclass
class OLSResult:
    beta: np.ndarray
    residuals: np.ndarray
    sigma2: float  # ML estimate e'e / n


def ols_fit(y, X) -> OLSResult:
    """Least squares through a QR factorization."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    if n <= k:
        raise RankDeficientError(f"need more observations ({n}) than regressors ({k})")
    q, r = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(r))
    if diag.min() <= max(n, k) * np.finfo(float).eps * diag.max():
        raise RankDeficientError("design matrix is rank deficient")
    beta = solve_triangular(r, q.T @ y)
    e = y - X @ beta
    return OLSResult(beta, e, float(e @ e) / n)


def rho_domain(eigenvalues: np.ndarray) -> tuple[float, float]:
    """Open interval of rho for which I - rho W is nonsingular with positive determinant."""
    lam_min, lam_max = float(np.min(eigenvalues)), float(np.max(eigenvalues))
    lo = 1.0 / lam_min if lam_min < 0 else -math.inf
    hi = 1.0 / lam_max if lam_max > 0 else math.inf
    return lo, hi


def log_jacobian(rho, eigenvalues: np.ndarray):
    """sum_i ln(1 - rho lambda_i); vectorised over ``rho``."""
    rho = np.asarray(rho, dtype=float)
    return np.log1p(-np.multiply.outer(rho, eigenvalues)).sum(axis=-1)


def _profile(rho, e0: np.ndarray, eL: np.ndarray, eigenvalues: np.ndarray):
    n = e0.size
    rho = np.asarray(rho, dtype=float)
    a, b, c = e0 @ e0, e0 @ eL, eL @ eL
    sig2 = (a - 2.0 * rho * b + rho * rho * c) / n
    return -0.5 * n * (LOG_2PI + 1.0) - 0.5 * n * np.log(sig2) + log_jacobian(rho, eigenvalues)


def concentrated_loglik(rho: float, e0, eL, eigenvalues) -> float:
    """Profile log-likelihood at ``rho`` given the two OLS residual vectors."""
    lam = np.asarray(eigenvalues, dtype=float)
    lo, hi = rho_domain(lam)
    if not lo < rho < hi:
        raise DomainError(f"rho={rho} outside the admissible interval ({lo}, {hi})")
    return float(_profile(rho, np.asarray(e0, float), np.asarray(eL, float), lam))


def full_loglik(theta: np.ndarray, y: np.ndarray, Wy: np.ndarray, X: np.ndarray, eigenvalues) -> float:
    """Log-likelihood at theta = (rho, beta..., sigma2)."""
    rho, beta, sig2 = theta[0], theta[1:-1], theta[-1]
    if sig2 <= 0:
        return -math.inf
    e = y - rho * Wy - X @ beta
    n = y.size
    return float(
        -0.5 * n * (LOG_2PI + math.log(sig2)) - (e @ e) / (2.0 * sig2) + log_jacobian(rho, eigenvalues)
    )


def numerical_hessian(f, theta: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Central finite-difference Hessian of scalar ``f``."""
    k = theta.size
    h = np.zeros((k, k))
    f0 = f(theta)
    ei = np.eye(k)
    for i in range(k):
        di = steps[i] * ei[i]
        h[i, i] = (f(theta + di) - 2.0 * f0 + f(theta - di)) / steps[i] ** 2
        for j in range(i):
            dj = steps[j] * ei[j]
            h[i, j] = h[j, i] = (
                f(theta + di + dj) - f(theta + di - dj) - f(theta - di + dj) + f(theta - di - dj)
            ) / (4.0 * steps[i] * steps[j])
    return h


@dataclass
class LagModelFit:
    response: str
    names: list[str]
    rho: float
    beta: np.ndarray
    se_rho: float
    se_beta: np.ndarray
    p_rho: float
    p_beta: np.ndarray
    sigma2: float
    loglik: float
    pseudo_r2: float
    aic: float
    n: int
    k: int
    rho_bounds: tuple[float, float]
    yhat: np.ndarray
    ids: list[Hashable]
    vcov: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)

    def significant(self, alpha: float = 0.05) -> dict[str, bool]:
        out = {"rho": bool(self.p_rho < alpha)}
        out.update({n: bool(p < alpha) for n, p in zip(self.names, self.p_beta)})
        return out

    def coefficients(self) -> list[tuple[str, float, float, float]]:
        rows = [("rho", self.rho, self.se_rho, self.p_rho)]
        rows += [
            (n, float(b), float(s), float(p))
            for n, b, s, p in zip(self.names, self.beta, self.se_beta, self.p_beta)
        ]
        return rows


def _local_maxima(values: np.ndarray) -> np.ndarray:
    tol = 1e-10 * max(1.0, float(np.nanmax(np.abs(values))))
    inner = values[1:-1]
    peaks = (inner > values[:-2] + tol) & (inner > values[2:] + tol)
    return np.flatnonzero(peaks) + 1


def _hessian_steps(theta: np.ndarray, X: np.ndarray, sigma2: float) -> np.ndarray:
    # relative steps, floored at each parameter's natural scale
    rms = np.sqrt(np.mean(X * X, axis=0))
    scale_beta = math.sqrt(sigma2) / np.where(rms > 0, rms, 1.0)
    floors = np.concatenate([[0.1], scale_beta, [sigma2]])
    return 1e-5 * np.maximum(np.abs(theta), floors)


def _inference(estimates: np.ndarray, vcov: np.ndarray | None):
    if vcov is None:
        nan = np.full(estimates.size, np.nan)
        return nan, nan
    se = np.sqrt(np.diag(vcov))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 2.0 * norm.sf(np.abs(estimates / se))
    return se, p


def fit_spatial_lag(
    dm: DesignMatrix,
    w: ContiguityWeights,
    eigenvalues: np.ndarray | None = None,
    scan_points: int = 1000,
    xtol: float = 1e-10,
) -> LagModelFit:
    """Concentrated ML fit of the spatial lag model.

    ``w`` is aligned to ``dm.ids`` (subsetting if needed).  Standard errors
    come from a finite-difference Hessian of the full log-likelihood in
    (rho, beta, sigma^2); p-values are two-sided normal.  AIC counts the betas
    and rho.
    """
    if tuple(w.ids) != tuple(dm.ids):
        w = w.subset(dm.ids)
        eigenvalues = None
    y, X = dm.y, dm.X
    n, p = X.shape
    if n <= p + 2:
        raise RankDeficientError(f"{dm.response}: n={n} too small for {p} regressors")
    notes = []

    if w.matrix.nnz == 0:
        # no spatial links: the model collapses to OLS with rho fixed at 0
        ols = ols_fit(y, X)
        theta = np.concatenate([[0.0], ols.beta, [ols.sigma2]])
        zero = np.zeros(n)
        f = lambda t: full_loglik(np.concatenate([[0.0], t]), y, zero, X, zero)  # noqa: E731
        hess = numerical_hessian(f, theta[1:], _hessian_steps(theta, X, ols.sigma2)[1:])
        vcov = _safe_inverse(-hess)
        se, pv = _inference(ols.beta, None if vcov is None else vcov[:p, :p])
        loglik = float(-0.5 * n * (LOG_2PI + 1.0 + math.log(ols.sigma2)))
        notes.append("weights have no links; rho fixed at 0")
        yhat = X @ ols.beta
        return LagModelFit(
            dm.response, dm.names, 0.0, ols.beta, math.nan, se, math.nan, pv, ols.sigma2, loglik,
            _pseudo_r2(y, yhat), 2 * (p + 1) - 2 * loglik, n, p + 1, (0.0, 0.0), yhat, list(dm.ids),
            vcov, notes,
        )

    if w.islands:
        raise IslandError(w.islands)
    lam = spectrum(w) if eigenvalues is None else np.asarray(eigenvalues, dtype=float)
    lo_dom, hi_dom = rho_domain(lam)
    lo, hi = lo_dom + RHO_EPS, hi_dom - RHO_EPS

    Wy = w.matrix @ y
    ols_y = ols_fit(y, X)
    ols_l = ols_fit(Wy, X)
    e0, eL = ols_y.residuals, ols_l.residuals

    grid = np.linspace(lo, hi, scan_points)
    prof = _profile(grid, e0, eL, lam)
    peaks = _local_maxima(prof)
    if peaks.size > 1:
        raise NonConcaveProfileError(
            f"{dm.response}: concentrated likelihood has {peaks.size} interior maxima at rho="
            f"{np.round(grid[peaks], 4).tolist()}",
            scan=np.column_stack([grid, prof]),
        )
    best = int(np.argmax(prof))
    a, b = grid[max(best - 1, 0)], grid[min(best + 1, grid.size - 1)]
    res = minimize_scalar(
        lambda r: -_profile(r, e0, eL, lam), bounds=(a, b), method="bounded", options={"xatol": xtol}
    )
    rho = float(res.x)
    if -res.fun < prof[best]:
        rho = float(grid[best])
    beta = ols_y.beta - rho * ols_l.beta
    resid = e0 - rho * eL
    sigma2 = float(resid @ resid) / n
    loglik = float(_profile(rho, e0, eL, lam))

    theta = np.concatenate([[rho], beta, [sigma2]])
    hess = numerical_hessian(
        lambda t: full_loglik(t, y, Wy, X, lam), theta, _hessian_steps(theta, X, sigma2)
    )
    vcov = _safe_inverse(-hess)
    if vcov is None:
        notes.append("Hessian singular or not negative definite; standard errors unavailable")
        log.warning("%s: %s", dm.response, notes[-1])
    se, pv = _inference(theta[:-1], None if vcov is None else vcov[:-1, :-1])

    a_mat = sparse.identity(n, format="csc") - rho * w.matrix.tocsc()
    yhat = np.asarray(spsolve(a_mat, X @ beta)).ravel()
    return LagModelFit(
        response=dm.response,
        names=list(dm.names),
        rho=rho,
        beta=beta,
        se_rho=float(se[0]),
        se_beta=se[1:],
        p_rho=float(pv[0]),
        p_beta=pv[1:],
        sigma2=sigma2,
        loglik=loglik,
        pseudo_r2=_pseudo_r2(y, yhat),
        aic=2.0 * (p + 1) - 2.0 * loglik,
        n=n,
        k=p + 1,
        rho_bounds=(lo, hi),
        yhat=yhat,
        ids=list(dm.ids),
        vcov=vcov,
        notes=notes,
    )


def _safe_inverse(info: np.ndarray) -> np.ndarray | None:
    if not np.all(np.isfinite(info)):
        return None
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        return None
    v = np.linalg.inv(info)
    return v if np.all(np.isfinite(v)) and np.all(np.diag(v) > 0) else None


def _pseudo_r2(y: np.ndarray, yhat: np.ndarray) -> float:
    if np.ptp(yhat) == 0 or np.ptp(y) == 0:
        return math.nan
    return float(np.corrcoef(y, yhat)[0, 1] ** 2)


@dataclass
class FitFailure:
    response: str
    error: str


def fit_all(
    responses: Mapping[str, Sequence[float]],
    covariates: Mapping[str, Sequence[float]],
    ids: Sequence[Hashable],
    w: ContiguityWeights,
) -> dict[str, LagModelFit | FitFailure]:
    """One lag model per response; a failing cell does not stop the others."""
    eig_cache: dict[tuple, np.ndarray] = {}
    out: dict[str, LagModelFit | FitFailure] = {}
    for name, y in responses.items():
        try:
            dm = design_matrix(name, y, covariates, ids)
            if dm.n == 0 or np.ptp(dm.y) == 0:
                raise CrimeSpatError(f"{name}: response is constant")
            key = tuple(dm.ids)
            wk = w if tuple(w.ids) == key else w.subset(dm.ids)
            if key not in eig_cache and wk.matrix.nnz and not wk.islands:
                eig_cache[key] = spectrum(wk)
            out[name] = fit_spatial_lag(dm, wk, eigenvalues=eig_cache.get(key))
        except (CrimeSpatError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("lag model %s failed: %s", name, exc)
            out[name] = FitFailure(name, f"{type(exc).__name__}: {exc}")
    return out
