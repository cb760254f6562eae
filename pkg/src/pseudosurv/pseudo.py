"""Jackknife pseudo-observations of the survival function.

For subject i and grid time t_k the pseudo-observation is

    y_ik = n * S(t_k) - (n - 1) * S_minus_i(t_k)

with S the full-sample Kaplan-Meier estimate and S_minus_i the estimate
recomputed without subject i.  The fast path below shares the risk-set
bookkeeping across subjects instead of refitting n curves; the brute-force
version does the literal n+1 fits and exists as the test oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .survival import SurvivalDataset, TimeGrid, kaplan_meier


@dataclass(frozen=True)
class PseudoObsMatrix:
    """n x K pseudo-observation matrix, rows in input subject order.

    Values are not restricted to [0, 1]: subjects censored late run above 1
    and subjects with early events go negative at later grid times.
    """

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != self.grid.K:
            raise ValueError("values must be n x K with K matching the grid")
        if not np.all(np.isfinite(vals)):
            raise ValueError("pseudo-observations must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_long_rows(self):
        """Yield (subject_index, time, value) triples in row-major order."""
        for i in range(self.n):
            for k, t in enumerate(self.grid.points):
                yield i, float(t), float(self.values[i, k])

    def write_csv(self, path) -> None:
        """Dump the matrix in long format (subject, time, value)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject", "time", "pseudo_observation"])
            for row in self.to_long_rows():
                writer.writerow(row)


def pseudo_observations(data: SurvivalDataset, grid: TimeGrid) -> PseudoObsMatrix:
    """Pseudo-observations via incremental leave-one-out recomputation.

    Runs in O(n log n + nK).  Grid points past the last event time of a
    leave-one-out subsample use that curve's carried-forward value.
    """
    n = data.n
    if n < 2:
        raise ValueError("need at least 2 subjects for leave-one-out")
    curve = kaplan_meier(data)
    et = curve.times          # distinct event times, ascending (length m)
    d = curve.events
    r = curve.at_risk

    # Cumulative products over event-time factors:
    #   full[j]    = prod_{l<=j} (1 - d_l / r_l)          (full sample)
    #   dropped[j] = prod_{l<=j} (1 - d_l / (r_l - 1))    (one at-risk subject removed)
    # dropped[j] is consumed only for subjects at risk through t_j, where
    # r_l >= 2 is guaranteed; entries with r_l < 2 are padded and never read.
    full_factors = 1.0 - d / r
    with np.errstate(divide="ignore", invalid="ignore"):
        drop_factors = np.where(r > 1, 1.0 - d / (r - 1.0), 1.0)
    full = np.concatenate(([1.0], np.cumprod(full_factors)))
    dropped = np.concatenate(([1.0], np.cumprod(drop_factors)))

    # Index of the last event time <= x, as counts into the prefix arrays.
    def upto(x):
        return np.searchsorted(et, x, side="right")

    m_k = upto(grid.points)              # per grid point
    j_i = upto(data.time)                # per subject
    is_event = data.status == 1
    # An event subject's own time is an event time; j_i then points at it.
    # Removing the subject turns its factor into 1 - (d-1)/(r-1), or exactly 1
    # when it was the only event at that time.
    own = np.where(is_event, j_i - 1, 0)
    d_own = d[own]
    r_own = r[own]
    with np.errstate(divide="ignore", invalid="ignore"):
        corrected = np.where(d_own > 1, 1.0 - (d_own - 1.0) / (r_own - 1.0), 1.0)

    loo = np.empty((n, grid.K))
    for k in range(grid.K):
        mk = m_k[k]
        cut = np.minimum(j_i, mk)
        # product over times where subject i was at risk
        base = dropped[cut]
        has_correction = is_event & (j_i <= mk)
        base = np.where(
            has_correction, dropped[np.maximum(cut - 1, 0)] * corrected, base
        )
        # remaining times (subject not at risk): factors match the full curve
        tail = np.where(mk > j_i, full[mk] / np.where(full[cut] > 0, full[cut], 1.0), 1.0)
        loo[:, k] = base * tail

    s_full = curve.evaluate(grid.points)
    y = n * s_full[np.newaxis, :] - (n - 1) * loo
    return PseudoObsMatrix(values=y, grid=grid)


def pseudo_observations_bruteforce(
    data: SurvivalDataset, grid: TimeGrid
) -> PseudoObsMatrix:
    """Reference implementation: one Kaplan-Meier fit per left-out subject."""
    n = data.n
    if n < 2:
        raise ValueError("need at least 2 subjects for leave-one-out")
    s_full = kaplan_meier(data).evaluate(grid.points)
    y = np.empty((n, grid.K))
    for i in range(n):
        keep = np.ones(n, dtype=bool)
        keep[i] = False
        sub_time = data.time[keep]
        sub_status = data.status[keep]
        if sub_status.sum() == 0:
            loo = np.ones(grid.K)
        else:
            loo = _km_eval(sub_time, sub_status, grid.points)
        y[i] = n * s_full - (n - 1) * loo
    return PseudoObsMatrix(values=y, grid=grid)


def _km_eval(time, status, points) -> np.ndarray:
    """Product-limit estimate of a raw (time, status) sample at `points`."""
    order = np.argsort(time, kind="stable")
    t = time[order]
    s = status[order]
    et = np.unique(t[s == 1])
    lo = np.searchsorted(t, et, side="left")
    hi = np.searchsorted(t, et, side="right")
    at_risk = t.shape[0] - lo
    cum = np.concatenate(([0], np.cumsum(s)))
    d = cum[hi] - cum[lo]
    surv = np.concatenate(([1.0], np.cumprod(1.0 - d / at_risk)))
    return surv[np.searchsorted(et, points, side="right")]
