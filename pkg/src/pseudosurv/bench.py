"""Benchmark estimators: Cox partial likelihood and a Bayesian piecewise
exponential model (PEM).

Cox uses Newton-Raphson with Breslow tie handling.  The PEM keeps the
baseline hazard constant on intervals cut at event-time quantiles and is
sampled on the log-hazard scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .gee import FitResult
from .mcmc import (
    PosteriorDraws,
    PosteriorSummary,
    SamplerConfig,
    TargetDensity,
    sample,
    summarize,
)
from .survival import SurvivalDataset

COX_MAX_ITER = 50
COX_SCORE_TOL = 1e-9
COX_BETA_BOUND = 30.0


def _regression_columns(data: SurvivalDataset, covariates: tuple[str, ...]):
    cols = [data.arm.astype(float)]
    names = ["treatment"]
    for name in covariates:
        if name not in data.covariate_names:
            raise ValueError(f"unknown covariate {name!r}")
        j = data.covariate_names.index(name)
        cols.append(data.covariates[:, j])
        names.append(name)
    return np.column_stack(cols), tuple(names)


def fit_cox(data: SurvivalDataset, covariates: tuple[str, ...] = ()) -> FitResult:
    """Cox proportional hazards via Newton-Raphson, Breslow ties.

    Coefficient order: treatment first, then the requested covariates.
    Monotone likelihood (coefficients running away) is reported as a
    flagged non-convergence instead of an error.
    """
    Z, names = _regression_columns(data, covariates)
    order = np.argsort(data.time, kind="stable")
    t = data.time[order]
    s = data.status[order]
    Z = Z[order]
    n, q = Z.shape

    event_times = np.unique(t[s == 1])
    risk_start = np.searchsorted(t, event_times, side="left")
    # per event time: number of events and sum of their covariate rows
    d = np.zeros(event_times.size)
    z_events = np.zeros((event_times.size, q))
    for j, e in enumerate(event_times):
        mask = (t == e) & (s == 1)
        d[j] = mask.sum()
        z_events[j] = Z[mask].sum(axis=0)

    beta = np.zeros(q)
    converged = False
    message = ""
    iterations = 0
    info = np.eye(q)
    for iterations in range(1, COX_MAX_ITER + 1):
        eta = Z @ beta
        eta -= eta.max()  # rescale for overflow safety; cancels in the ratios
        w = np.exp(eta)
        # suffix sums over the risk sets (times sorted ascending)
        s0 = np.cumsum(w[::-1])[::-1]
        s1 = np.cumsum((w[:, None] * Z)[::-1], axis=0)[::-1]
        s2 = np.cumsum(
            (w[:, None, None] * Z[:, :, None] * Z[:, None, :])[::-1], axis=0
        )[::-1]
        s0_j = s0[risk_start]
        s1_j = s1[risk_start]
        s2_j = s2[risk_start]
        zbar = s1_j / s0_j[:, None]
        score = (z_events - d[:, None] * zbar).sum(axis=0)
        info = (
            d[:, None, None]
            * (s2_j / s0_j[:, None, None] - zbar[:, :, None] * zbar[:, None, :])
        ).sum(axis=0)
        if np.max(np.abs(score)) < COX_SCORE_TOL:
            # a vanishing score at a huge coefficient is the flat tail of
            # a monotone likelihood, not an interior maximum
            if np.max(np.abs(beta)) > COX_BETA_BOUND / 2:
                message = "monotone partial likelihood (separation in risk sets)"
                break
            converged = True
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            message = "singular information matrix"
            break
        beta = beta + step
        if np.max(np.abs(beta)) > COX_BETA_BOUND:
            message = "monotone partial likelihood (separation in risk sets)"
            break

    if not converged and not message:
        message = "no convergence after Newton-Raphson"
    if not converged:
        warnings.warn(f"Cox fit flagged: {message}", RuntimeWarning)
        covariance = np.full((q, q), np.nan)
    else:
        covariance = np.linalg.inv(info)
    return FitResult(
        beta=beta,
        covariance=covariance,
        iterations=iterations,
        converged=converged,
        names=names,
        message=message,
    )


@dataclass(frozen=True)
class PemSpec:
    """Interval layout and priors for the piecewise exponential model.

    The interval count follows M = max{5, min(floor(events / 8), 20)} and
    boundaries sit at event-time quantiles so intervals hold roughly equal
    event counts.  Baseline hazards get Gamma(1, rate = h_ref) priors with
    h_ref the pooled exponential-model rate; regression coefficients get
    Normal(0, sd 10^2.5).
    """

    cuts: np.ndarray           # M interior+right boundaries; left edge is 0
    h_ref: float               # prior rate for the baseline hazards
    beta_sd: float = 10.0**2.5

    def __post_init__(self):
        cuts = np.asarray(self.cuts, dtype=float)
        if cuts.ndim != 1 or cuts.size < 1:
            raise ValueError("need at least one interval")
        if np.any(np.diff(cuts) <= 0) or cuts[0] <= 0:
            raise ValueError("cut points must be strictly increasing and positive")
        if not (self.h_ref > 0):
            raise ValueError("h_ref must be positive")
        cuts.setflags(write=False)
        object.__setattr__(self, "cuts", cuts)

    @property
    def M(self) -> int:
        return self.cuts.size

    @classmethod
    def interval_count(cls, n_events: int) -> int:
        return max(5, min(n_events // 8, 20))

    @classmethod
    def from_data(cls, data: SurvivalDataset, M: int | None = None) -> "PemSpec":
        if M is None:
            M = cls.interval_count(data.n_events)
        t_events = np.sort(data.time[data.status == 1])
        t_max = float(data.time.max())
        interior = np.quantile(t_events, np.arange(1, M) / M) if M > 1 else np.array([])
        cuts = np.unique(np.concatenate((interior, [t_max])))
        if cuts.size < M:
            warnings.warn(
                f"merged {M - cuts.size} empty interval(s) caused by tied cut points",
                RuntimeWarning,
            )
        h_ref = data.n_events / float(data.time.sum())
        return cls(cuts=cuts, h_ref=h_ref)


class PemModel:
    """Log posterior of (log h_1..M, beta) for a dataset and interval spec."""

    def __init__(
        self,
        data: SurvivalDataset,
        spec: PemSpec,
        covariates: tuple[str, ...] = (),
        include_treatment: bool = True,
    ):
        self.spec = spec
        if include_treatment:
            Z, names = _regression_columns(data, covariates)
        else:
            Z, names = np.empty((data.n, 0)), ()
        self.Z = Z
        self.names = names
        edges = np.concatenate(([0.0], spec.cuts))
        # exposure of each subject inside each interval
        self.exposure = np.clip(
            data.time[:, None] - edges[None, :-1], 0.0, np.diff(edges)[None, :]
        )
        last = spec.cuts.size - 1
        self.event_interval = np.minimum(
            np.searchsorted(spec.cuts, data.time, side="left"), last
        )
        self.status = data.status.astype(float)
        self.dim = spec.M + Z.shape[1]

    def log_likelihood(self, params: np.ndarray) -> float | None:
        M = self.spec.M
        log_h = params[:M]
        beta = params[M:]
        if np.any(log_h > 500):
            return None
        h = np.exp(log_h)
        eta = self.Z @ beta if beta.size else np.zeros(self.status.shape)
        if np.any(eta > 500):
            return None
        rel = np.exp(eta)
        return float(
            np.sum(self.status * (log_h[self.event_interval] + eta))
            - rel @ (self.exposure @ h)
        )

    def log_posterior(self, params: np.ndarray) -> float | None:
        loglik = self.log_likelihood(params)
        if loglik is None:
            return None
        spec = self.spec
        M = spec.M
        log_h = params[:M]
        beta = params[M:]
        h = np.exp(log_h)
        # Gamma(1, rate=h_ref) on h, plus the log-scale Jacobian
        log_prior = float(
            M * math.log(spec.h_ref) - spec.h_ref * h.sum() + log_h.sum()
        )
        if beta.size:
            log_prior += float(
                -0.5 * np.sum((beta / spec.beta_sd) ** 2)
                - beta.size * math.log(spec.beta_sd * math.sqrt(2 * math.pi))
            )
        return loglik + log_prior

    def initial_point(self) -> np.ndarray:
        events_m = np.bincount(
            self.event_interval, weights=self.status, minlength=self.spec.M
        )
        exposure_m = self.exposure.sum(axis=0)
        rate = np.where(
            (events_m > 0) & (exposure_m > 0), events_m / np.maximum(exposure_m, 1e-12),
            self.spec.h_ref,
        )
        return np.concatenate((np.log(rate), np.zeros(self.Z.shape[1])))


@dataclass(frozen=True)
class PemFit:
    draws: PosteriorDraws
    summary: PosteriorSummary
    spec: PemSpec
    names: tuple[str, ...]
    flagged: bool

    @property
    def beta_index(self) -> int:
        """Index of the treatment coefficient inside the parameter vector."""
        return self.spec.M


def fit_pem(
    data: SurvivalDataset,
    spec: PemSpec | None = None,
    config: SamplerConfig | None = None,
    covariates: tuple[str, ...] = (),
    include_treatment: bool = True,
    tail: dict[int, list[float]] | None = None,
) -> PemFit:
    """Sample the PEM posterior; chains start near the crude interval rates."""
    if spec is None:
        spec = PemSpec.from_data(data)
    if config is None:
        config = SamplerConfig()
    model = PemModel(
        data, spec, covariates=covariates, include_treatment=include_treatment
    )
    target = TargetDensity(model.log_posterior, dim=model.dim)
    base = model.initial_point()
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 9173)))
    inits = [base + 0.05 * rng.standard_normal(model.dim) for _ in range(config.chains)]
    draws = sample(target, inits, config)
    if tail is not None:
        offset_tail = {model.spec.M + p: cs for p, cs in tail.items()}
    else:
        offset_tail = None
    summary = summarize(draws, tail=offset_tail)
    flagged = bool(np.any(draws.rhat > 1.01))
    return PemFit(
        draws=draws,
        summary=summary,
        spec=spec,
        names=model.names,
        flagged=flagged,
    )
