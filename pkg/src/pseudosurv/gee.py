"""Generalized estimating equations for pseudo-observation outcomes.

Pseudo-observations land outside [0, 1], so the working variance is the
identity rather than a binomial mean-variance function; the working
correlation only reweights the K within-subject residuals.  Standard
errors come from the usual sandwich.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .design import DesignMatrix, cloglog, mean_and_derivative
from .pseudo import PseudoObsMatrix

MAX_ITER = 50
STEP_TOL = 1e-8
SCORE_TOL = 1e-8


@dataclass(frozen=True)
class WorkingCorrelation:
    """Within-subject working correlation: IND, EXCH, or AR1.

    EXCH needs alpha in (-1/(K-1), 1) and AR1 alpha in (-1, 1) for the
    K x K matrix to stay positive definite.
    """

    kind: str
    K: int
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ("IND", "EXCH", "AR1"):
            raise ValueError(f"unknown working correlation {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.kind == "IND":
            if self.alpha is not None:
                raise ValueError("IND takes no nuisance parameter")
        elif self.alpha is not None:
            lo = -1.0 / (self.K - 1) if self.kind == "EXCH" and self.K > 1 else -1.0
            if not (lo < self.alpha < 1.0):
                raise ValueError(
                    f"alpha={self.alpha} outside ({lo}, 1) for {self.kind}"
                )

    def matrix(self) -> np.ndarray:
        K = self.K
        if self.kind == "IND" or self.alpha is None:
            return np.eye(K)
        if self.kind == "EXCH":
            return np.full((K, K), self.alpha) + (1.0 - self.alpha) * np.eye(K)
        lags = np.abs(np.subtract.outer(np.arange(K), np.arange(K)))
        return self.alpha ** lags


@dataclass(frozen=True)
class FitResult:
    """Point estimates plus covariance, shared by GEE, GMM, and Cox fits."""

    beta: np.ndarray
    covariance: np.ndarray
    iterations: int
    converged: bool
    correlation: str = ""
    alpha: float | None = None
    names: tuple[str, ...] = ()
    message: str = ""

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        beta.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "covariance", cov)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def fit_gee(
    y: PseudoObsMatrix, X: DesignMatrix, wc: WorkingCorrelation | str = "IND"
) -> FitResult:
    """Fit the cloglog mean model by Fisher scoring.

    The nuisance correlation (EXCH/AR1) is re-estimated from moment
    averages of the residuals between scoring steps.  Non-convergence
    after MAX_ITER steps returns a flagged result with a warning rather
    than raising.
    """
    if isinstance(wc, str):
        wc = WorkingCorrelation(kind=wc, K=X.K)
    if wc.K != X.K:
        raise ValueError("working correlation dimension must match the grid")
    values = y.values
    if values.shape != (X.n, X.K):
        raise ValueError("pseudo-observation matrix and design disagree on n or K")

    beta = _initial_beta(values, X.P)
    alpha = wc.alpha if wc.alpha is not None else 0.0
    converged = False
    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        r_inv = np.linalg.inv(WorkingCorrelation(wc.kind, wc.K, _valid_alpha(wc, alpha)).matrix())
        mu, D = mean_and_derivative(X.blocks, beta)
        resid = values - mu
        step = np.linalg.solve(*_score_system(D, resid, r_inv))
        beta = beta + step
        if wc.kind != "IND":
            mu, _ = mean_and_derivative(X.blocks, beta)
            alpha = _moment_alpha(values - mu, wc.kind)
        if np.max(np.abs(step)) < STEP_TOL:
            converged = True
            break

    alpha_hat = _valid_alpha(wc, alpha) if wc.kind != "IND" else None
    r_inv = np.linalg.inv(WorkingCorrelation(wc.kind, wc.K, alpha_hat).matrix())
    mu, D = mean_and_derivative(X.blocks, beta)
    resid = values - mu
    gamma0, score = _score_system(D, resid, r_inv)
    if converged and np.max(np.abs(score)) > SCORE_TOL:
        converged = False
    if not converged:
        warnings.warn("GEE did not converge; returning last iterate", RuntimeWarning)
    covariance = _sandwich(D, resid, r_inv, gamma0)
    return FitResult(
        beta=beta,
        covariance=covariance,
        iterations=iterations,
        converged=converged,
        correlation=wc.kind,
        alpha=alpha_hat,
        names=X.column_names,
        message="" if converged else "no convergence after Fisher scoring",
    )


def wald_interval(fit: FitResult, level: float = 0.95) -> np.ndarray:
    """Per-coefficient equal-tailed normal intervals, shape (P, 2)."""
    if not fit.converged:
        raise ValueError("interval requested from a non-converged fit")
    z = norm.ppf(0.5 + level / 2.0)
    se = fit.se
    return np.column_stack((fit.beta - z * se, fit.beta + z * se))


def _initial_beta(values: np.ndarray, P: int) -> np.ndarray:
    beta = np.zeros(P)
    pooled = float(np.clip(values.mean(), 1e-6, 1.0 - 1e-6))
    beta[0] = float(cloglog(pooled))
    return beta


def _score_system(D, resid, r_inv):
    """(Gamma0, U): the Fisher-scoring matrix and the estimating function."""
    n = D.shape[0]
    weighted = resid @ r_inv.T
    gamma0 = np.einsum("nkp,kl,nlq->pq", D, r_inv, D) / n
    score = np.einsum("nkp,nk->p", D, weighted) / n
    return gamma0, score


def _sandwich(D, resid, r_inv, gamma0) -> np.ndarray:
    n = D.shape[0]
    v = np.einsum("nkp,nk->np", D, resid @ r_inv.T)
    gamma1 = v.T @ v / n
    g0_inv = np.linalg.inv(gamma0)
    return g0_inv @ gamma1 @ g0_inv / n


def _moment_alpha(resid: np.ndarray, kind: str) -> float:
    """Moment estimate of the nuisance correlation from raw residuals."""
    phi = float(np.mean(resid**2))
    if phi == 0.0:
        return 0.0
    K = resid.shape[1]
    if kind == "EXCH":
        if K < 2:
            return 0.0
        row_sums = resid.sum(axis=1)
        cross = np.mean((row_sums**2 - (resid**2).sum(axis=1)) / (K * (K - 1)))
    else:  # AR1, lag-1 products
        cross = float(np.mean(resid[:, :-1] * resid[:, 1:])) if K > 1 else 0.0
    return cross / phi


def _valid_alpha(wc: WorkingCorrelation, alpha: float) -> float | None:
    if wc.kind == "IND":
        return None
    lo = -1.0 / (wc.K - 1) if wc.kind == "EXCH" and wc.K > 1 else -1.0
    eps = 1e-6
    return float(np.clip(alpha, lo + eps, 1.0 - eps))
