"""Right-censored survival data, Kaplan-Meier estimation, and time grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SurvivalDataset:
    """Right-censored two-arm survival data.

    Parameters
    ----------
    time : array of shape (n,)
        Strictly positive observation times (event or censoring).
    status : array of shape (n,)
        1 if the event was observed, 0 if right-censored.
    arm : array of shape (n,)
        Treatment indicator, 0 = control, 1 = experimental.
    covariates : array of shape (n, C), optional
        Additional numeric covariates, one row per subject.
    covariate_names : tuple of str, optional
        Column labels for `covariates`.
    """

    time: np.ndarray
    status: np.ndarray
    arm: np.ndarray
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float)
        status = np.asarray(self.status, dtype=int)
        arm = np.asarray(self.arm, dtype=int)
        if time.ndim != 1:
            raise ValueError("time must be a 1-d array")
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise ValueError("all times must be strictly positive and finite")
        if status.shape != time.shape or arm.shape != time.shape:
            raise ValueError("time, status and arm must have equal length")
        if not np.isin(status, (0, 1)).all():
            raise ValueError("status must contain only 0 (censored) or 1 (event)")
        if status.sum() == 0:
            raise ValueError("no events observed")
        if not np.isin(arm, (0, 1)).all():
            raise ValueError("arm must contain only 0 (control) or 1 (experimental)")
        cov = self.covariates
        if cov is not None:
            cov = np.atleast_2d(np.asarray(cov, dtype=float))
            if cov.shape[0] != time.shape[0]:
                raise ValueError("covariate matrix row count must equal n")
            if not np.all(np.isfinite(cov)):
                raise ValueError("covariates must be finite")
            names = tuple(self.covariate_names) or tuple(
                f"x{j + 1}" for j in range(cov.shape[1])
            )
            if len(names) != cov.shape[1]:
                raise ValueError("covariate_names length must match covariate columns")
            object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "covariates", cov)
        for arr in (time, status, arm, cov):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    def event_times(self) -> np.ndarray:
        """Distinct observed event times, ascending."""
        return np.unique(self.time[self.status == 1])


@dataclass(frozen=True)
class KaplanMeierCurve:
    """Product-limit survival estimate as a right-continuous step function.

    Steps occur only at distinct event times; censored observations tied
    with an event time count as at risk at that time (events first).
    """

    times: np.ndarray       # distinct event times, ascending
    survival: np.ndarray    # S(t) at each event time, non-increasing
    at_risk: np.ndarray     # subjects at risk just before each event time
    events: np.ndarray      # events at each event time

    def __post_init__(self):
        for name in ("times", "survival", "at_risk", "events"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def evaluate(self, t) -> np.ndarray | float:
        """S(t) by right-continuous step lookup.

        Returns 1 before the first event time; the last step value is
        carried forward beyond the last event time.
        """
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("evaluation times must be nonnegative")
        idx = np.searchsorted(self.times, t, side="right") - 1
        padded = np.concatenate(([1.0], self.survival))
        out = padded[idx + 1]
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TimeGrid:
    """Ascending evaluation times for pseudo-observations."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 1:
            raise ValueError("grid needs at least one point")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def K(self) -> int:
        return self.points.shape[0]


def kaplan_meier(data: SurvivalDataset) -> KaplanMeierCurve:
    """Kaplan-Meier product-limit estimate over all distinct event times."""
    order = np.argsort(data.time, kind="stable")
    t = data.time[order]
    s = data.status[order]
    event_times = np.unique(t[s == 1])
    if event_times.size == 0:
        raise ValueError("no events observed")
    n = t.shape[0]
    # at risk just before e = count of times >= e; events at e by exact match
    lo = np.searchsorted(t, event_times, side="left")
    hi = np.searchsorted(t, event_times, side="right")
    at_risk = (n - lo).astype(float)
    cum_events = np.concatenate(([0], np.cumsum(s)))
    d = (cum_events[hi] - cum_events[lo]).astype(float)
    surv = np.cumprod(1.0 - d / at_risk)
    return KaplanMeierCurve(
        times=event_times, survival=surv, at_risk=at_risk.astype(float), events=d
    )


def select_time_grid(
    data: SurvivalDataset, K: int, spacing: str = "quantile"
) -> TimeGrid:
    """Choose K evaluation times snapped to observed event times.

    ``spacing="quantile"`` (default) places the points at the k/(K+1)
    quantiles of the observed event times; ``spacing="time"`` spreads them
    evenly between the smallest and largest event time.  Either way the
    raw points are snapped to the nearest observed event time (ties
    resolved downward) and deduplicated, so the realized grid can be
    shorter than K.

    The quantile rule is the default because the time rule pins the first
    point at the minimum event time, where the survival increment rests on
    a single event; that coordinate is numerically and statistically
    degenerate for the moment-based estimators.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    events = data.event_times()
    if events.size < K:
        raise ValueError(
            f"requested {K} grid points but only {events.size} distinct event times"
        )
    if spacing == "time":
        if K == 1:
            raw = np.array([0.5 * (events[0] + events[-1])])
        else:
            raw = np.linspace(events[0], events[-1], K)
    elif spacing == "quantile":
        probs = np.arange(1, K + 1) / (K + 1)
        raw = np.quantile(events, probs)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    snapped = _snap_to(events, raw)
    return TimeGrid(points=np.unique(snapped))


def _snap_to(targets: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Nearest value in `targets` for each raw point; ties go to the lower."""
    idx = np.searchsorted(targets, raw)
    idx = np.clip(idx, 1, targets.size - 1) if targets.size > 1 else np.zeros_like(idx)
    if targets.size == 1:
        return np.full_like(raw, targets[0])
    lo = targets[idx - 1]
    hi = targets[idx]
    pick_hi = (hi - raw) < (raw - lo)
    return np.where(pick_hi, hi, lo)
