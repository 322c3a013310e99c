"""Numerical checks of the structural properties of the solution.

Each check returns a worst violation (0 when the property holds exactly) and
is compared against a per-property tolerance.  Strict inequalities are
checked as "no worse than -tolerance", so tolerances act as floating-point
slack rather than as required margins.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import DomainError, SolverError
from .policy import cutoffs, saving_rule_from_row
from .utility import (DualPowerZeta, PowerMu, PowerZeta, TabulatedZeta, UtilitySpec,
                      is_log_concave_zeta)
from .value_solver import (ModelParams, ValueGrid, _CutoffEmax, solve, solve_scaled)

PROPERTY_IDS = (
    "v_boundary",
    "v_positive",
    "v_decreasing_t",
    "v_increasing_x",
    "v_concave_x",
    "v_concave_t",
    "cross_partial",
    "asymptote",
    "preference_reversal",
    "cutoff_order",
    "cutoffs_approaching",
    "decomposition",
    "more_concave_marginal",
    "cutoff_crossover",
    "saving_rule_monotone",
    "emax_cross_check",
    "homogeneity",
    "lambda_dilation",
)

DEFAULT_TOLERANCES = {
    "v_boundary": 1e-12,
    "v_positive": 1e-9,
    "v_decreasing_t": 1e-9,
    "v_increasing_x": 1e-9,
    "v_concave_x": 1e-9,
    "v_concave_t": 1e-9,
    "cross_partial": 1e-9,
    "asymptote": 1e-3,
    "preference_reversal": 1e-9,
    "cutoff_order": 1e-9,
    "cutoffs_approaching": 1e-9,
    "decomposition": 1e-5,
    "more_concave_marginal": 1e-9,
    "cutoff_crossover": 0.0,
    "saving_rule_monotone": 0.0,
    "emax_cross_check": 1e-7,
    "homogeneity": 1e-9,
    "lambda_dilation": 1e-6,
}

# artifact settings for checks that need their own solves
ASYMPTOTE_HORIZON = 1e3
ASYMPTOTE_DT = 0.05
SCALE_FACTOR = 2.0
DILATION = 2.0


@dataclass
class PropertyReport:
    property_id: str
    instance_descriptor: str
    status: str
    worst_violation: float
    tolerance: float
    notes: str = ""

    def to_dict(self):
        d = asdict(self)
        if not math.isfinite(d["worst_violation"]):
            d["worst_violation"] = str(d["worst_violation"])
        return d


class _Skip(Exception):
    pass


def describe(spec: UtilitySpec, params: ModelParams) -> str:
    return json.dumps({"utility": spec.to_dict(), "lambda": params.lam, "T": params.T,
                       "n": params.n, "t_min": params.t_min}, sort_keys=True)


def default_battery():
    zetas = [PowerZeta(1.0), PowerZeta(2.0), DualPowerZeta(2.0)]
    mus = [PowerMu(0.5), PowerMu(0.7)]
    out = []
    for z in zetas:
        for m in mus:
            for n in (1, 2, 4):
                for lam in (0.5, 2.0):
                    out.append((UtilitySpec(z, m), ModelParams(lam, 10.0, n, 10.0 - 10.0 / lam)))
    return out


def more_concave_partner(spec: UtilitySpec) -> UtilitySpec:
    """A zeta with strictly larger Arrow-Pratt coefficient, same mu."""
    z = spec.zeta
    if isinstance(z, PowerZeta):
        return UtilitySpec(PowerZeta(z.k / 2.0), spec.mu)
    if isinstance(z, DualPowerZeta):
        return UtilitySpec(DualPowerZeta(z.m + 1.0), spec.mu)
    raise _Skip("no closed-form more-concave partner for a tabulated zeta")


def inject_fault(grid: ValueGrid, kind: str) -> ValueGrid:
    """Corrupt a grid so that a specific property must fail."""
    values = grid.values.copy()
    k = len(grid.times) // 2
    if kind == "bump_v1":
        values[k, 1] += 0.1 * max(1.0, abs(values[k, 1]))
    elif kind == "flatten_x":
        values[k, -1] = values[k, -2] - 0.1
    else:
        raise DomainError(f"unknown fault {kind!r}")
    return replace(grid, values=values, diagnostics=dict(grid.diagnostics))


# ---------------------------------------------------------------------------
# individual checks; each returns (violation, notes)
# ---------------------------------------------------------------------------


def _pos(x):
    return float(max(0.0, np.max(x))) if np.size(x) else 0.0


def check_boundary(grid, spec):
    return max(float(np.max(np.abs(grid.values[-1]))), float(np.max(np.abs(grid.values[:, 0])))), ""


def check_positive(grid, spec):
    return _pos(-grid.values[:-1, 1:]), ""


def check_decreasing_t(grid, spec):
    return _pos(np.diff(grid.values[:, 1:], axis=0)), ""


def check_increasing_x(grid, spec):
    return _pos(-np.diff(grid.values[:-1], axis=1)), ""


def check_concave_x(grid, spec):
    if grid.capacity < 2:
        raise _Skip("needs n >= 2")
    return _pos(np.diff(grid.values[:-1], 2, axis=1)), ""


def check_concave_t(grid, spec):
    h = np.diff(grid.times)
    if np.ptp(h) > 1e-9 * h.max():
        raise _Skip("time grid is not uniform")
    return _pos(np.diff(grid.values[:, 1:], 2, axis=0)), ""


def check_cross_partial(grid, spec):
    dv = grid.delta_resource()
    return _pos(np.diff(dv, axis=0)), ""


def check_asymptote(grid_far, spec):
    n = grid_far.capacity
    mu1 = float(spec.mu_table(1)[1])
    gap = np.abs(grid_far.values[0] - np.arange(n + 1) * mu1)
    horizon = grid_far.params.horizon
    return float(np.max(gap)), f"lambda*(T - t_min) = {horizon:g}; per-unit gaps {np.round(gap, 6).tolist()}"


def preference_reversal_curve(grid, x=1, x_bar=1, t_bar=None):
    """g(t) = V(t, x) - V(t + t_bar, x + x_bar) on grid times t <= T - t_bar."""
    if t_bar is None:
        t_bar = 1.0 / grid.params.lam
    t = grid.times[grid.times <= grid.T - t_bar + 1e-12]
    g = grid.column(x, t) - grid.column(x + x_bar, np.minimum(t + t_bar, grid.T))
    return t, g


def check_preference_reversal(grid_far, spec):
    if grid_far.capacity < 2:
        raise _Skip("needs n >= 2 for x = 1, x_bar = 1")
    t, g = preference_reversal_curve(grid_far)
    monotone = _pos(-np.diff(g))
    sign = np.sign(g)
    changes = int(np.count_nonzero(np.diff(sign[sign != 0]) != 0))
    violation = max(monotone, max(0.0, -g[-1]), max(0.0, g[0]))
    if changes != 1:
        violation = max(violation, 1.0)
    k = int(np.argmax(g > 0))
    note = f"g(t_min)={g[0]:.4g}, g(T-t_bar)={g[-1]:.4g}, sign changes={changes}, switch near t={t[k]:.4g}"
    return violation, note


def check_cutoff_order(grid, spec):
    tab = cutoffs(grid, spec)
    phi, ok = tab.phi[:-1], tab.defined[:-1]
    n = grid.capacity
    worst = 0.0
    for i in range(1, n + 1):
        if not tab.defined[:, i, i].all():
            return 1.0, f"phi_{i},{i} undefined somewhere"
    worst = max(worst, float(np.nanmax(np.abs(tab.phi[-1]))) if n else 0.0)
    for i in range(1, n):
        for j in range(1, i + 1):
            both = ok[:, i, j] & ok[:, i + 1, j + 1]
            worst = max(worst, _pos(phi[both, i + 1, j + 1] - phi[both, i, j]))
            both = ok[:, i, j] & ok[:, i + 1, j]
            worst = max(worst, _pos(phi[both, i, j] - phi[both, i + 1, j]))
    return worst, ""


def check_cutoffs_approaching(grid, spec):
    if not is_log_concave_zeta(spec):
        raise _Skip("zeta is not log-concave; hypothesis not met")
    if grid.capacity < 2:
        raise _Skip("needs n >= 2")
    tab = cutoffs(grid, spec)
    worst = 0.0
    for i in range(1, grid.capacity):
        for j in range(1, i + 1):
            both = tab.defined[:, i, j] & tab.defined[:, i + 1, j]
            d = tab.phi[both, i + 1, j] - tab.phi[both, i, j]
            worst = max(worst, _pos(np.diff(d)))
    return worst, ""


def _area_above(zeta, a):
    """Integral over y in [a, 1] of (1 - zeta^{-1}(y))."""
    a = np.clip(a, 0.0, 1.0)
    p = zeta.inverse(a)
    return zeta.integral(1.0) - zeta.integral(p) - a * (1.0 - p)


def decomposition_rhs(grid, spec):
    """V'_{i+1} - V'_i for i = 0..n-1 at every stored time, from marginal values alone."""
    n = grid.capacity
    lam = grid.params.lam
    dmu = np.diff(spec.mu_table(n))
    dv = grid.delta_resource()  # dv[:, m-1] = V_m - V_{m-1}
    out = np.zeros((len(grid.times), n))
    for i in range(n):
        total = np.zeros(len(grid.times))
        for k in range(i):
            lower = np.minimum(dv[:, i - k] / dmu[k], 1.0)
            upper = np.minimum(dv[:, i - k - 1] / dmu[k], 1.0)
            total += dmu[k] * (_area_above(spec.zeta, lower) - _area_above(spec.zeta, upper))
        total += dmu[i] * _area_above(spec.zeta, np.minimum(dv[:, 0] / dmu[i], 1.0))
        out[:, i] = -lam * total
    return out


def check_decomposition(grid, spec):
    h = np.diff(grid.times)
    if np.ptp(h) > 1e-9 * h.max():
        raise _Skip("time grid is not uniform")
    dvdt = (grid.values[2:] - grid.values[:-2]) / (2.0 * h[0])
    direct = np.diff(dvdt, axis=1)
    formula = decomposition_rhs(grid, spec)[1:-1]
    return float(np.max(np.abs(direct - formula))), ""


def check_more_concave_marginal(grid, spec, grid_w):
    dv = grid.delta_resource()[:-1]
    dw = grid_w.delta_resource()[:-1]
    return _pos(dv - dw), ""


def crossover_times(grid, spec, grid_w, spec_w):
    """For each j < i, the time where phi_{i,j} - psi_{i,j} changes sign."""
    tab_v = cutoffs(grid, spec)
    tab_w = cutoffs(grid_w, spec_w)
    t = grid.times
    found = {}
    for i in range(2, grid.capacity + 1):
        for j in range(1, i):
            start = tab_w.domain_start[i][j]
            if start is None:
                found[(i, j)] = None
                continue
            both = tab_v.defined[:, i, j] & tab_w.defined[:, i, j]
            d = tab_v.phi[:, i, j] - tab_w.phi[:, i, j]
            idx = np.flatnonzero(both[:-1])
            if idx.size < 2:
                found[(i, j)] = None
                continue
            dd = d[idx]
            if not (dd[-1] > 0 and dd[0] < 0):
                found[(i, j)] = None
                continue
            k = int(np.flatnonzero(dd > 0)[0])
            a, b = idx[k - 1], idx[k]
            lo, hi = t[a], t[b]
            da, db = d[a], d[b]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                dm = da + (db - da) * (mid - t[a]) / (t[b] - t[a])
                lo, hi = (mid, hi) if dm < 0 else (lo, mid)
            found[(i, j)] = 0.5 * (lo + hi)
    return found


def check_cutoff_crossover(grid, spec, grid_w, spec_w):
    if grid.capacity < 2:
        raise _Skip("needs a pair j < i, so n >= 2")
    found = crossover_times(grid, spec, grid_w, spec_w)
    missing = [k for k, v in found.items() if v is None]
    note = ", ".join(f"({i},{j})@{v:.4g}" for (i, j), v in found.items() if v is not None)
    return float(len(missing)), note + (f"; missing {missing}" if missing else "")


def check_saving_rule(grid, spec, points=21):
    n = grid.capacity
    thetas = np.linspace(0.0, 1.0, points)
    times = np.linspace(grid.t_min, grid.T, points)
    Y = np.zeros((points, points, n + 1), dtype=int)
    for a, t in enumerate(times):
        row = grid.row(t)
        for b, th in enumerate(thetas):
            for x in range(n + 1):
                Y[a, b, x] = saving_rule_from_row(spec, row, th, x)
    bad = 0
    bad += int(np.count_nonzero(np.diff(Y, axis=1) > 0))  # in theta
    bad += int(np.count_nonzero(np.diff(Y[:, 1:], axis=0) > 0))  # in t, theta > 0
    inc = np.diff(Y, axis=2)
    bad += int(np.count_nonzero((inc < 0) | (inc > 1)))
    return float(bad), f"{points}x{points} lattice, x = 0..{n}"


def check_emax(grid, spec):
    d = grid.diagnostics.get("emax_max_discrepancy")
    if d is None:
        raise _Skip("grid was solved without the cross-check")
    return float(d), f"rows checked: {grid.diagnostics.get('emax_checked_rows')}"


def check_homogeneity(spec, params, base, k=SCALE_FACTOR):
    try:
        scaled = solve_scaled(spec, params, k, base=base)
    except SolverError as exc:
        return 1.0, str(exc)
    return float(np.max(np.abs(scaled.values - k * base.values))), f"k = {k}"


def dilation_gap(spec, params, base, kappa=DILATION):
    """Max |V at kappa*lambda (t) - V at lambda (T + kappa (t - T))| on the fast grid."""
    fast = replace(params, lam=params.lam * kappa, t_min=params.T - (params.T - params.t_min) / kappa,
                   dt=params.dt / kappa)
    g_fast = solve(spec, fast, cross_check=False)
    t_slow = params.T + kappa * (g_fast.times - params.T)
    ref = np.stack([base.column(i, t_slow) for i in range(params.n + 1)], axis=1)
    return float(np.max(np.abs(g_fast.values - ref)))


def check_dilation(spec, params, base, kappa=DILATION):
    return dilation_gap(spec, params, base, kappa), f"kappa = {kappa}"


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def effective_discount(lam: float, T: float, t: float) -> float:
    """Probability that another opportunity arrives before T: 1 - exp(-lam (T - t))."""
    if t > T:
        raise DomainError("t must not exceed T")
    return -math.expm1(-lam * (T - t))


@dataclass
class EulerRatio:
    t: float
    analytic: float
    empirical: float


def euler_ratio_diagnostic(grid: ValueGrid, spec: UtilitySpec, t: float, x: int = 1) -> EulerRatio:
    """Conditional-on-arrival marginal continuation value over current marginal value.

    Analytic: 1 / P(next opportunity before T).  Empirical: the marginal value
    of unit x realized at the next opportunity, integrated against the
    arrival density on the stored grid, divided by P and by V_x(t) - V_{x-1}(t).
    """
    if t >= grid.T:
        raise DomainError("t must precede the deadline")
    lam = grid.params.lam
    p = effective_discount(lam, grid.T, t)
    mask = grid.times > t
    s = np.concatenate([[t], grid.times[mask]])
    rows = np.vstack([grid.row(t), grid.values[mask]])
    kernel = _CutoffEmax(spec.zeta, spec.mu_table(grid.capacity))
    em = np.array([kernel(list(r)) for r in rows])
    marginal = em[:, x] - em[:, x - 1]
    f = marginal * lam * np.exp(-lam * (s - t))
    cont = float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(s)))
    dv = float(rows[0, x] - rows[0, x - 1])
    return EulerRatio(t, 1.0 / p, cont / p / dv)


# ---------------------------------------------------------------------------
# battery
# ---------------------------------------------------------------------------

_GRID_CHECKS = {
    "v_boundary": check_boundary,
    "v_positive": check_positive,
    "v_decreasing_t": check_decreasing_t,
    "v_increasing_x": check_increasing_x,
    "v_concave_x": check_concave_x,
    "v_concave_t": check_concave_t,
    "cross_partial": check_cross_partial,
    "cutoff_order": check_cutoff_order,
    "cutoffs_approaching": check_cutoffs_approaching,
    "decomposition": check_decomposition,
    "saving_rule_monotone": check_saving_rule,
    "emax_cross_check": check_emax,
}


def _report(pid, desc, tol, fn):
    try:
        violation, note = fn()
    except _Skip as exc:
        return PropertyReport(pid, desc, "skipped", 0.0, tol, str(exc))
    status = "pass" if violation <= tol else "fail"
    return PropertyReport(pid, desc, status, float(violation), tol, note)


def verify_instance(spec, params, tolerances=None, properties=None, fault=None):
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    props = list(properties or PROPERTY_IDS)
    desc = describe(spec, params)
    try:
        grid = solve(spec, params, validate=fault is None)
    except (SolverError, DomainError) as exc:
        return [PropertyReport(p, desc, "skipped", 0.0, tol[p], f"solver failure: {exc}") for p in props]
    if fault:
        grid = inject_fault(grid, fault)
    reports = []
    lazy = {}

    def far():
        if "far" not in lazy:
            horizon = tol.get("asymptote_horizon", ASYMPTOTE_HORIZON)
            p_far = replace(params, t_min=params.T - horizon / params.lam, dt=ASYMPTOTE_DT / params.lam)
            lazy["far"] = solve(spec, p_far, cross_check=False)
        return lazy["far"]

    def partner():
        if "w" not in lazy:
            spec_w = more_concave_partner(spec)
            lazy["w"] = (spec_w, solve(spec_w, params, cross_check=False))
        return lazy["w"]

    for pid in props:
        if pid in _GRID_CHECKS:
            fn = lambda f=_GRID_CHECKS[pid]: f(grid, spec)
        elif pid == "asymptote":
            fn = lambda: check_asymptote(far(), spec)
        elif pid == "preference_reversal":
            fn = lambda: check_preference_reversal(far(), spec)
        elif pid == "more_concave_marginal":
            fn = lambda: check_more_concave_marginal(grid, spec, partner()[1])
        elif pid == "cutoff_crossover":
            fn = lambda: check_cutoff_crossover(grid, spec, partner()[1], partner()[0])
        elif pid == "homogeneity":
            fn = lambda: check_homogeneity(spec, params, grid)
        elif pid == "lambda_dilation":
            fn = lambda: check_dilation(spec, params, grid)
        else:
            raise DomainError(f"unknown property id {pid!r}")
        try:
            reports.append(_report(pid, desc, tol[pid], fn))
        except (SolverError, DomainError) as exc:
            reports.append(PropertyReport(pid, desc, "skipped", 0.0, tol[pid], f"solver failure: {exc}"))
    return reports


def _verify_star(args):
    return verify_instance(*args)


def verify_all(battery, tolerances=None, properties=None, fault=None, workers=1):
    """One PropertyReport per (property, instance), sorted by property then instance."""
    if not battery:
        raise DomainError("battery must not be empty")
    for pid in properties or ():
        if pid not in PROPERTY_IDS:
            raise DomainError(f"unknown property id {pid!r}")
    jobs = [(spec, params, tolerances, properties, fault) for spec, params in battery]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_verify_star, jobs))
    else:
        results = [_verify_star(j) for j in jobs]
    reports = [r for rs in results for r in rs]
    order = {p: k for k, p in enumerate(PROPERTY_IDS)}
    reports.sort(key=lambda r: (order[r.property_id], r.instance_descriptor))
    return reports


def format_table(reports):
    lines = [f"{'property':<22} {'status':<8} {'violation':>11} {'tol':>9}  instance"]
    for r in reports:
        inst = json.loads(r.instance_descriptor)
        short = (f"zeta={inst['utility']['zeta']} mu={inst['utility']['mu']} "
                 f"n={inst['n']} lam={inst['lambda']}")
        lines.append(f"{r.property_id:<22} {r.status:<8} {r.worst_violation:>11.3e} {r.tolerance:>9.1e}  {short}")
    return "\n".join(lines)
