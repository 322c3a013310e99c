"""Saving rules and spending cutoffs derived from a solved value grid.

Also covers two misperceiving agents: one who believes zeta is more concave
than it is, and one who believes opportunities arrive faster than they do.
Both save at least as much as an accurately informed agent.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, PreconditionError
from .utility import UtilitySpec, is_more_concave
from .value_solver import ValueGrid, best_saving


@dataclass(frozen=True, eq=False)
class CutoffTable:
    """phi[t, i, j] for 1 <= j <= i <= n; NaN marks an undefined cutoff.

    ``defined`` is the authoritative mask.  ``domain_start[i][j]`` is the
    earliest time the cutoff is defined, or None when it is defined on the
    whole grid.
    """

    times: np.ndarray
    phi: np.ndarray
    defined: np.ndarray
    domain_start: list

    @property
    def n(self):
        return self.phi.shape[1] - 1

    def curve(self, i, j):
        return self.phi[:, i, j]

    def to_csv(self, header=None):
        buf = io.StringIO()
        if header:
            buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "i", "j", "phi", "defined"])
        for k, t in enumerate(self.times):
            for i in range(1, self.n + 1):
                for j in range(1, i + 1):
                    ok = bool(self.defined[k, i, j])
                    w.writerow([repr(float(t)), i, j, repr(float(self.phi[k, i, j])) if ok else "", int(ok)])
        return buf.getvalue()


def cutoff_arguments(grid: ValueGrid, spec: UtilitySpec):
    """(V_j - V_{j-1}) / (mu(i-j+1) - mu(i-j)) as an array [t, i, j]."""
    n = grid.capacity
    dmu = np.diff(spec.mu_table(n))
    dv = grid.delta_resource()  # dv[:, j-1] = V_j - V_{j-1}
    arg = np.full((len(grid.times), n + 1, n + 1), np.nan)
    for i in range(1, n + 1):
        for j in range(1, i + 1):
            arg[:, i, j] = dv[:, j - 1] / dmu[i - j]
    return arg


def _domain_start(times, arg):
    """Earliest time where arg <= 1, by bracketing plus root of the linear interpolant."""
    ok = arg <= 1.0
    if ok[0]:
        return None
    if not ok.any():
        return float("inf")
    k = int(np.argmax(ok))
    a0, a1 = arg[k - 1], arg[k]
    t0, t1 = times[k - 1], times[k]
    lo, hi = t0, t1
    # the interpolant is linear on the bracket; bisection keeps this generic
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        am = a0 + (a1 - a0) * (mid - t0) / (t1 - t0)
        if am <= 1.0:
            hi = mid
        else:
            lo = mid
    return float(hi)


def cutoffs(grid: ValueGrid, spec: UtilitySpec) -> CutoffTable:
    arg = cutoff_arguments(grid, spec)
    n = grid.capacity
    defined = np.zeros_like(arg, dtype=bool)
    phi = np.full_like(arg, np.nan)
    domain_start = [[None] * (n + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, i + 1):
            a = arg[:, i, j]
            ok = a <= 1.0
            defined[:, i, j] = ok
            phi[ok, i, j] = spec.zeta.inverse(np.clip(a[ok], 0.0, 1.0))
            domain_start[i][j] = _domain_start(grid.times, a)
    return CutoffTable(grid.times, phi, defined, domain_start)


def _best_y(spec, row, theta, x):
    return best_saving(float(spec.zeta(theta)), spec.mu_table(x), row, x)


def saving_rule(grid: ValueGrid, spec: UtilitySpec, theta: float, t: float, x: int) -> int:
    """Units to keep at an opportunity of quality theta at time t holding x.

    Ties, up to rounding, go to the larger y (save more).
    """
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    if not 0 <= x <= grid.capacity:
        raise DomainError(f"x={x} outside 0..{grid.capacity}")
    if t > grid.T + 1e-12:
        raise DomainError("t beyond the deadline")
    return _best_y(spec, grid.row(t), theta, x)


def saving_rule_from_row(spec: UtilitySpec, row, theta: float, x: int) -> int:
    return _best_y(spec, row, theta, x)


def misperceived_theta(true_spec: UtilitySpec, believed_spec: UtilitySpec, theta: float) -> float:
    """Quality the agent believes it sees: believed_zeta^{-1}(true_zeta(theta))."""
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    v = min(max(float(true_spec.zeta(theta)), 0.0), 1.0)
    return float(believed_spec.zeta.inverse(v))


@lru_cache(maxsize=64)
def _more_concave_cached(a, b):
    return is_more_concave(a, b)


def procrastinator_policy(true_spec: UtilitySpec, believed_spec: UtilitySpec,
                          believed_grid: ValueGrid, theta: float, t: float, x: int) -> int:
    if not _more_concave_cached(true_spec, believed_spec):
        raise PreconditionError("believed zeta must be strictly more concave than the true zeta")
    theta_b = misperceived_theta(true_spec, believed_spec, theta)
    return saving_rule(believed_grid, believed_spec, theta_b, t, x)


def dilated_time(T: float, kappa: float, t: float) -> float:
    """Time at which the accurate value function matches the believed one at t."""
    return T + kappa * (t - T)


def lambda_misperception_policy(spec: UtilitySpec, grid_true_lambda: ValueGrid, kappa: float,
                                theta: float, t: float, x: int) -> int:
    """Saving rule of an agent who believes the arrival rate is kappa * lambda.

    The believed value function is the accurate one dilated around T, so it is
    read off the accurate grid at T + kappa * (t - T).
    """
    if kappa < 1:
        raise DomainError("kappa must be at least 1")
    g = grid_true_lambda
    t_b = dilated_time(g.T, kappa, t)
    if t_b < g.t_min - 1e-12:
        raise DomainError(f"dilated time {t_b} lies below the grid start {g.t_min}")
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    return _best_y(spec, g.row(min(t_b, g.T)), theta, x)
