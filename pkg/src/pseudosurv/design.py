"""Regression design and the complementary log-log mean model.

The mean model ties survival probabilities to a linear predictor through
g(x) = log(-log(x)), so the treatment coefficient reads as a log hazard
ratio under proportional hazards.  Each subject contributes a K x P block:
intercept, treatment, K-1 time dummies (first grid time absorbed into the
intercept), then any extra covariates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .survival import SurvivalDataset, TimeGrid

# Above this linear-predictor value exp(exp(eta)) would overflow; the mean
# saturates to 0 with zero derivative instead of going NaN.
ETA_SATURATION = 700.0


def cloglog(x):
    """g(x) = log(-log(x)) for x in (0, 1).

    Uses log1p above 0.5 so values close to 1 keep every representable
    digit (the round trip with cloglog_inv is then limited only by the
    spacing of floats near 1).
    """
    x = np.asarray(x, dtype=float)
    inner = np.where(x >= 0.5, -np.log1p(x - 1.0), -np.log(np.where(x < 0.5, x, 0.5)))
    return np.log(inner)


def cloglog_inv(eta):
    """g^-1(eta) = exp(-exp(eta)), saturating to 0 for very large eta."""
    eta = np.asarray(eta, dtype=float)
    return np.exp(-np.exp(np.minimum(eta, ETA_SATURATION)))


@dataclass(frozen=True)
class DesignMatrix:
    """Stacked per-subject design blocks of shape (n, K, P)."""

    blocks: np.ndarray
    column_names: tuple[str, ...]

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=float)
        if blocks.ndim != 3:
            raise ValueError("blocks must have shape (n, K, P)")
        if blocks.shape[2] != len(self.column_names):
            raise ValueError("column_names length must equal P")
        blocks.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def K(self) -> int:
        return self.blocks.shape[1]

    @property
    def P(self) -> int:
        return self.blocks.shape[2]

    def stacked(self) -> np.ndarray:
        """All blocks stacked into an (n*K, P) matrix, subject-major."""
        return self.blocks.reshape(self.n * self.K, self.P)


def build_design(
    data: SurvivalDataset, grid: TimeGrid, center_covariates: bool = False
) -> DesignMatrix:
    """Design blocks for the cloglog mean model at the given grid.

    Column order is fixed: intercept, treatment, time dummies for grid
    points 2..K, then covariates.  Covariates pass through unchanged unless
    `center_covariates` asks for mean-centering and scaling by two standard
    deviations.
    """
    n = data.n
    K = grid.K
    cov = data.covariates
    n_cov = 0 if cov is None else cov.shape[1]
    P = 2 + (K - 1) + n_cov
    blocks = np.zeros((n, K, P))
    blocks[:, :, 0] = 1.0
    blocks[:, :, 1] = data.arm[:, np.newaxis]
    for k in range(1, K):
        blocks[:, k, 1 + k] = 1.0
    names = ["intercept", "treatment"]
    names += [f"time_{k + 1}" for k in range(1, K)]
    if n_cov:
        if not np.all(np.isfinite(cov)):
            raise ValueError("covariates must be finite")
        values = cov
        if center_covariates:
            sd = values.std(axis=0, ddof=1)
            sd[sd == 0] = 1.0
            values = (values - values.mean(axis=0)) / (2.0 * sd)
        blocks[:, :, 1 + K:] = values[:, np.newaxis, :]
        names += list(data.covariate_names)
    return DesignMatrix(blocks=blocks, column_names=tuple(names))


def mean_and_derivative(blocks: np.ndarray, beta: np.ndarray):
    """Mean vector and its Jacobian for design blocks under cloglog.

    Parameters
    ----------
    blocks : array of shape (n, K, P) or (K, P)
        Design block(s).
    beta : array of shape (P,)
        Coefficients; must be finite.

    Returns
    -------
    mu : array of shape (..., K)
        exp(-exp(X beta)).
    D : array of shape (..., K, P)
        Rows mu'(eta_k) * X[k, :], with mu'(eta) = -exp(eta - exp(eta)).
    """
    beta = np.asarray(beta, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta must be finite")
    blocks = np.asarray(blocks, dtype=float)
    eta = blocks @ beta
    saturated = eta > ETA_SATURATION
    eta_safe = np.where(saturated, ETA_SATURATION, eta)
    inner = np.exp(eta_safe)
    mu = np.where(saturated, 0.0, np.exp(-inner))
    dmu = np.where(saturated, 0.0, -np.exp(eta_safe - inner))
    D = dmu[..., np.newaxis] * blocks
    return mu, D
