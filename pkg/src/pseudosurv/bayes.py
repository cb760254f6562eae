"""Bayesian GMM for pseudo-observations via a pseudo-likelihood.

The mean score U_n(beta) is asymptotically normal, which motivates

    log L(beta) = -0.5 * U_n' Sigma_n^-1 U_n + const,

with Sigma_n the centered second-moment matrix of the per-subject scores.
Sigma_n is only positive definite on part of the parameter space; points
where the factorization fails (or the linear predictor overflows) are
out of support and the sampler rejects them.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .design import ETA_SATURATION, DesignMatrix, cloglog
from .gmm import BasisSet, SpectralInverse, score_vector
from .mcmc import (
    PosteriorDraws,
    PosteriorSummary,
    SamplerConfig,
    TargetDensity,
    linear_transform,
    sample,
    summarize,
)
from .pseudo import PseudoObsMatrix

DEFAULT_EPSILONS = (0.01, 0.05, 0.1)
RHAT_LIMIT = 1.01


@dataclass(frozen=True)
class PriorSpec:
    """Independent priors for all regression coefficients.

    Gaussian by default; sd 10 in general and sd 1 for small samples
    (n <= 100).  A Cauchy option exists for centered/rescaled inputs.
    """

    kind: str = "normal"
    scale: float = 10.0

    def __post_init__(self):
        if self.kind not in ("normal", "cauchy"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not (self.scale > 0):
            raise ValueError("prior scale must be positive")

    @classmethod
    def default_for(cls, n: int) -> "PriorSpec":
        return cls(kind="normal", scale=1.0 if n <= 100 else 10.0)

    def log_density(self, beta: np.ndarray) -> float:
        beta = np.asarray(beta, dtype=float)
        if self.kind == "normal":
            return float(
                -0.5 * np.sum((beta / self.scale) ** 2)
                - beta.size * math.log(self.scale * math.sqrt(2 * math.pi))
            )
        return float(
            -np.sum(np.log1p((beta / self.scale) ** 2))
            - beta.size * math.log(math.pi * self.scale)
        )


class PseudoLikelihood:
    """Log pseudo-likelihood of the stacked GMM scores over beta."""

    def __init__(self, y: PseudoObsMatrix, X: DesignMatrix, basis: BasisSet):
        if basis.K != X.K:
            raise ValueError("basis dimension must match the grid")
        self.y = y
        self.X = X
        self.basis = basis

    def sigma(self, beta: np.ndarray) -> np.ndarray:
        """Sigma_n = C_n - U_n U_n' / n (centered score covariance)."""
        state = score_vector(self.y, self.X, beta, self.basis)
        return state.C - np.outer(state.U, state.U) / state.n

    def log_density(self, beta: np.ndarray) -> float | None:
        """-0.5 U' Sigma^-1 U, or None outside the support.

        Out of support means the linear predictor saturates, Sigma_n has
        no usable positive spectrum (reciprocal condition below the
        floor after discarding structural redundancies), or the score
        picks up mass along a discarded direction.
        """
        beta = np.asarray(beta, dtype=float)
        eta = self.X.blocks @ beta
        if np.any(eta > ETA_SATURATION):
            return None
        state = score_vector(self.y, self.X, beta, self.basis)
        sigma = state.C - np.outer(state.U, state.U) / state.n
        inverse = SpectralInverse(sigma)
        if not inverse.defined or inverse.rank < self.X.P:
            return None
        quad = inverse.quadratic(state.U)
        if quad is None:
            return None
        return float(-0.5 * quad)


def _preconditioner(y, X, basis) -> np.ndarray:
    """Cholesky factor of the frequentist GMM covariance, or the identity."""
    from .gmm import fit_gmm

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            freq = fit_gmm(y, X, basis)
    except np.linalg.LinAlgError:
        return np.eye(X.P)
    if not np.all(np.isfinite(freq.covariance)):
        return np.eye(X.P)
    try:
        return np.linalg.cholesky(freq.covariance + 1e-12 * np.eye(X.P))
    except np.linalg.LinAlgError:
        return np.eye(X.P)


def starting_values(
    y: PseudoObsMatrix, X: DesignMatrix, epsilon: float
) -> np.ndarray:
    """Least-squares starting point from truncated, cloglog-mapped values.

    Clamp the pseudo-observations to [eps, 1-eps], apply the cloglog map,
    and regress on the design by ordinary least squares.  Deliberately
    rough (truncation biases it, and the link is applied to the values,
    not the mean) but it lands inside the pseudo-likelihood support.
    """
    if not (0.0 < epsilon < 0.5):
        raise ValueError("epsilon must lie in (0, 0.5)")
    clamped = np.clip(y.values, epsilon, 1.0 - epsilon)
    z = cloglog(clamped).reshape(-1)
    Xs = X.stacked()
    if np.linalg.matrix_rank(Xs) < X.P:
        raise ValueError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(Xs, z, rcond=None)
    return coef


@dataclass(frozen=True)
class BayesGmmFit:
    """Posterior draws and summaries; flagged when any R-hat exceeds 1.01."""

    draws: PosteriorDraws
    summary: PosteriorSummary
    names: tuple[str, ...]
    flagged: bool
    advice: str = ""

    @property
    def beta_mean(self) -> np.ndarray:
        return self.summary.mean

    def to_json(self) -> str:
        """Coefficient table, diagnostics, and tail probabilities as JSON."""
        s = self.summary
        record = {
            "coefficients": [
                {
                    "name": name,
                    "mean": s.mean[p],
                    "sd": s.sd[p],
                    "median": s.median[p],
                    "lower": s.lower[p],
                    "upper": s.upper[p],
                    "rhat": s.rhat[p],
                    "ess": s.ess[p],
                }
                for p, name in enumerate(self.names)
            ],
            "interval_level": s.level,
            "tail_probabilities": [
                {
                    "name": self.names[t.parameter],
                    "threshold": t.threshold,
                    "probability": t.probability,
                    "mc_se": t.mc_se,
                }
                for t in s.tail
            ],
            "flagged": self.flagged,
            "advice": self.advice,
        }
        return json.dumps(record, indent=2)


def fit_bayes_gmm(
    y: PseudoObsMatrix,
    X: DesignMatrix,
    basis: BasisSet | str = "IND",
    priors: PriorSpec | None = None,
    config: SamplerConfig | None = None,
    epsilons=DEFAULT_EPSILONS,
    tail: dict[int, list[float]] | None = None,
) -> BayesGmmFit:
    """Sample the pseudo-likelihood posterior of the mean-model coefficients.

    One chain per truncation value in `epsilons`; each chain starts at the
    least-squares point for its epsilon.
    """
    if isinstance(basis, str):
        basis = BasisSet(kind=basis, K=X.K)
    if priors is None:
        priors = PriorSpec.default_for(X.n)
    if config is None:
        config = SamplerConfig()
    if len(epsilons) != config.chains:
        raise ValueError(
            f"{config.chains} chains need {config.chains} epsilons, got {len(epsilons)}"
        )
    likelihood = PseudoLikelihood(y, X, basis)

    def log_posterior(beta):
        ll = likelihood.log_density(beta)
        if ll is None:
            return None
        return ll + priors.log_density(beta)

    # Precondition with the frequentist covariance factor: the posterior is
    # strongly correlated across intercept and time dummies, which stalls
    # plain coordinate or random-walk proposals.
    pre = _preconditioner(y, X, basis)
    target = TargetDensity(lambda gamma: log_posterior(pre @ gamma), dim=X.P)
    inits = [
        np.linalg.solve(pre, starting_values(y, X, eps)) for eps in epsilons
    ]
    draws = linear_transform(sample(target, inits, config), pre)
    summary = summarize(draws, tail=tail)
    flagged = bool(np.any(draws.rhat > RHAT_LIMIT))
    advice = (
        "some chains did not mix (R-hat > 1.01); try different truncation "
        "values for the starting points (e.g. epsilon 0.03 instead of 0.05)"
        if flagged
        else ""
    )
    return BayesGmmFit(
        draws=draws,
        summary=summary,
        names=X.column_names,
        flagged=flagged,
        advice=advice,
    )
