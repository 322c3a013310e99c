"""Backward integration of the value function V_i(t) for i = 0..n units.

V satisfies dV_i/dt = lam * (V_i - E max_y {zeta(theta) mu(i - y) + V_y(t)})
with V(T, .) = 0.  The expectation is over theta ~ U[0, 1].
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DegradedAccuracyWarning, DomainError, SolverError
from .utility import UtilitySpec

EMAX_AGREEMENT = 1e-7
GRID_TOL = 1e-8
# objective values this close (relative) count as a tie, resolved toward saving more
TIE_RTOL = 1e-12


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    lam: float
    T: float
    n: int
    t_min: float
    dt: float | None = None
    quad_points: int = 64

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError("lambda must be positive")
        if int(self.n) != self.n or self.n < 0:
            raise DomainError("n must be a non-negative integer")
        if not self.t_min < self.T:
            raise DomainError(f"t_min must be below T (t_min={self.t_min}, T={self.T})")
        if self.dt is None:
            object.__setattr__(self, "dt", 1e-3 / self.lam)
        if not 0 < self.dt <= 0.1 / self.lam * (1 + 1e-12):
            raise DomainError(f"dt must lie in (0, 0.1/lambda], got {self.dt}")
        if self.quad_points < 64:
            raise DomainError("quad_points must be at least 64")

    @property
    def horizon(self):
        """lam * (T - t_min), the expected number of opportunities on the grid."""
        return self.lam * (self.T - self.t_min)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        lam = d.pop("lambda", d.pop("lam", None))
        if lam is None:
            raise DomainError("model parameters need 'lambda'")
        return cls(lam=float(lam), T=float(d["T"]), n=int(d["n"]), t_min=float(d["t_min"]),
                   dt=None if d.get("dt") is None else float(d["dt"]),
                   quad_points=int(d.get("quad_points", 64)))


@dataclass(frozen=True, eq=False)
class ValueGrid:
    """Values V_i(t) on an increasing time grid; column i holds i units."""

    params: ModelParams
    times: np.ndarray
    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def capacity(self):
        return self.values.shape[1] - 1

    @property
    def t_min(self):
        return float(self.times[0])

    @property
    def T(self):
        return float(self.times[-1])

    def row(self, t):
        """Linearly interpolated value row at time t."""
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise DomainError(f"t={t} outside grid [{times[0]}, {times[-1]}]")
        k = int(np.searchsorted(times, t, side="right")) - 1
        if k >= len(times) - 1:
            return self.values[-1].copy()
        k = max(k, 0)
        w = (t - times[k]) / (times[k + 1] - times[k])
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def value(self, t, i):
        if not 0 <= i <= self.capacity:
            raise DomainError(f"resource index {i} outside 0..{self.capacity}")
        return float(self.row(t)[i])

    def column(self, i, t):
        """Vectorized interpolation of column i at the times ``t``."""
        return np.interp(t, self.times, self.values[:, i])

    def delta_resource(self):
        """Discrete derivative in the resource index: V_{i+1}(t) - V_i(t)."""
        return np.diff(self.values, axis=1)

    def scaled(self, k):
        return replace(self, values=k * self.values, diagnostics=dict(self.diagnostics))

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "times": self.times.tolist(),
            "values": self.values.tolist(),
            "meta": self.meta,
        }

    def to_json(self, header=None):
        d = self.to_dict()
        if header:
            d = {**header, **d}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(ModelParams.from_dict(d["params"]), np.asarray(d["times"], dtype=float),
                   np.asarray(d["values"], dtype=float), meta=d.get("meta", {}))

    def to_csv(self, header=None):
        buf = io.StringIO()
        info = {"params": self.params.to_dict(), "meta": self.meta, **(header or {})}
        buf.write("# " + json.dumps(info, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"V_{i}" for i in range(self.capacity + 1)])
        for t, row in zip(self.times, self.values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        lines = text.splitlines()
        info = json.loads(lines[0][2:]) if lines and lines[0].startswith("# ") else None
        body = [ln for ln in lines if not ln.startswith("#")]
        rows = list(csv.reader(body))[1:]
        data = np.asarray(rows, dtype=float)
        if info is None:
            raise DomainError("CSV grid lacks the parameter header line")
        return cls(ModelParams.from_dict(info["params"]), data[:, 0], data[:, 1:],
                   meta=info.get("meta", {}))


@dataclass(frozen=True)
class TwoPaymentSpec:
    base: ModelParams
    x: int
    x_bar: int
    t_bar: float

    def __post_init__(self):
        if self.x < 0 or self.x_bar < 1:
            raise DomainError("need x >= 0 and x_bar >= 1")
        if self.x + self.x_bar > self.base.n:
            raise DomainError(f"x + x_bar = {self.x + self.x_bar} exceeds capacity n = {self.base.n}")
        if self.t_bar > self.base.T:
            raise DomainError("payment time t_bar must not exceed the deadline T")
        if self.t_bar <= self.base.t_min:
            raise DomainError("payment time t_bar must lie above t_min")


# ---------------------------------------------------------------------------
# expected maximum
# ---------------------------------------------------------------------------


class _CutoffEmax:
    """E max via cutoff decomposition, in plain floats for speed.

    For x units the agent saves j when theta lies in (phi_{x,j+1}, phi_{x,j}],
    phi_{x,j} = zeta^{-1}((V_j - V_{j-1}) / (mu(x-j+1) - mu(x-j))), clamped to
    [0, 1].  Returns None when the cutoffs come out disordered (row not
    discrete-concave), in which case the caller falls back to quadrature.
    """

    def __init__(self, zeta, mu):
        self.inv = zeta.scalar_inverse()
        self.Z = zeta.scalar_integral()
        self.Z1 = self.Z(1.0)
        self.mu = [float(v) for v in mu]
        self.dmu = [self.mu[k + 1] - self.mu[k] for k in range(len(self.mu) - 1)]

    def __call__(self, v):
        inv, Z, Z1, mu, dmu = self.inv, self.Z, self.Z1, self.mu, self.dmu
        m = len(v) - 1
        dv = [v[j + 1] - v[j] for j in range(m)]
        out = [v[0]]
        for x in range(1, m + 1):
            prev_phi, prev_Z = 1.0, Z1
            total = 0.0
            for j in range(x + 1):
                if j < x:
                    a = dv[j] / dmu[x - j - 1]
                    if a >= 1.0:
                        phi, zp = 1.0, Z1
                    elif a <= 0.0:
                        phi, zp = 0.0, 0.0
                    else:
                        phi = inv(a)
                        zp = Z(phi)
                    if phi > prev_phi:
                        if phi - prev_phi > 1e-12:
                            return None
                        phi, zp = prev_phi, prev_Z
                else:
                    phi, zp = 0.0, 0.0
                total += mu[x - j] * (prev_Z - zp) + v[j] * (prev_phi - phi)
                prev_phi, prev_Z = phi, zp
            out.append(total)
        return out


def _simpson_weights(q):
    w = np.ones(q + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / (3.0 * q)


def emax_quadrature(zeta, mu, rows, quad_points=64, bisect_iter=45, block=4096):
    """E max for every x = 0..m and every row, by pointwise-max quadrature.

    The switch points of the pointwise argmax are located by bisection on
    pointwise comparisons only, then each smooth piece of the upper envelope
    is integrated by composite Simpson (4 * ``quad_points`` panels in a
    square-root-graded variable).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    R, m1 = rows.shape
    mu = np.asarray(mu, dtype=float)[:m1]
    if mu.size < m1:
        raise DomainError("mu table shorter than value row")
    q = quad_points + (quad_points % 2)
    # integrals of zeta over [0, b] with theta = b * v**2, so that endpoint
    # behaviour like theta**k with k < 1 stays smooth enough for Simpson
    v = np.linspace(0.0, 1.0, 4 * q + 1)
    u, w = v ** 2, _simpson_weights(4 * q) * 2.0 * v

    def from_zero(b):
        return (np.asarray(zeta(b[..., None] * u)) @ w) * b
    out = np.empty((R, m1))
    out[:, 0] = rows[:, 0]
    for start in range(0, R, block):
        V_all = rows[start:start + block]
        r = V_all.shape[0]
        for x in range(1, m1):
            ys = np.arange(x + 1)
            mu_spend = mu[x - ys]
            V = V_all[:, : x + 1]
            js = np.arange(1, x + 1)

            def saves_at_least(theta):
                comp = np.asarray(zeta(theta))[..., None] * mu_spend + V[:, None, :]
                # ties resolved toward saving more
                y = x - np.argmax(comp[..., ::-1], axis=-1)
                return y >= js

            at_one = saves_at_least(np.ones((r, x)))
            lo = np.zeros((r, x))
            hi = np.ones((r, x))
            for _ in range(bisect_iter):
                mid = 0.5 * (lo + hi)
                ok = saves_at_least(mid)
                lo = np.where(ok, mid, lo)
                hi = np.where(ok, hi, mid)
            s = np.where(at_one, 1.0, 0.5 * (lo + hi))
            upper = np.concatenate([np.ones((r, 1)), s], axis=1)
            lower = np.concatenate([s, np.zeros((r, 1))], axis=1)
            lower = np.minimum(lower, upper)
            width = upper - lower
            zint = from_zero(upper) - from_zero(lower)
            out[start:start + r, x] = zint @ mu_spend + np.sum(V * width, axis=1)
    return out


def emax(spec: UtilitySpec, v_row, x: int, quad_points: int = 64) -> float:
    """E over theta of max_y {u(theta, x - y) + v_row[y]}.

    Evaluated by pointwise-max quadrature and cross-checked against the
    cutoff decomposition; disagreement beyond 1e-7 raises a
    DegradedAccuracyWarning.  Returns the quadrature value.
    """
    v = np.asarray(v_row, dtype=float)
    if v.ndim != 1 or not 0 <= x <= v.size - 1:
        raise DomainError(f"x={x} inconsistent with value row of length {v.size}")
    mu = spec.mu_table(v.size - 1)
    v = v[: x + 1]
    if x >= 2 and np.any(np.diff(v, 2) > 1e-9):
        warnings.warn("value row is not discrete-concave", DegradedAccuracyWarning, stacklevel=2)
    quad = float(emax_quadrature(spec.zeta, mu, v[None, :], quad_points)[0, x])
    cut = _CutoffEmax(spec.zeta, mu)(list(v))
    if cut is None or abs(cut[x] - quad) > EMAX_AGREEMENT:
        warnings.warn(
            f"emax routes disagree: quadrature={quad!r}, cutoff={None if cut is None else cut[x]!r}",
            DegradedAccuracyWarning, stacklevel=2)
    return quad


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


def _integrate(spec, mu, lam, y0, t_start, t_end, dt, quad_points):
    """Fixed-step RK4 from t_start down to t_end.

    Returns decreasing times, the state at every node, the E max evaluated at
    every node, and the number of rows that needed the quadrature fallback.
    """
    kernel = _CutoffEmax(spec.zeta, mu)
    fallbacks = 0

    def emax_all(y):
        nonlocal fallbacks
        e = kernel(y)
        if e is None:
            fallbacks += 1
            e = emax_quadrature(spec.zeta, mu, [y], quad_points)[0].tolist()
        return e

    def g(y):
        e = emax_all(y)
        return [lam * (ei - yi) for ei, yi in zip(e, y)], e

    span = t_start - t_end
    N = max(1, math.ceil(span / dt - 1e-9))
    h = span / N
    y = [float(v) for v in y0]
    states = [y]
    emaxes = []
    h2, h6 = 0.5 * h, h / 6.0
    for _ in range(N):
        k1, e = g(y)
        emaxes.append(e)
        k2, _ = g([a + h2 * b for a, b in zip(y, k1)])
        k3, _ = g([a + h2 * b for a, b in zip(y, k2)])
        k4, _ = g([a + h * b for a, b in zip(y, k3)])
        y = [a + h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
        states.append(y)
    emaxes.append(emax_all(y))
    times = t_start - h * np.arange(N + 1)
    times[-1] = t_end
    return times, np.asarray(states), np.asarray(emaxes), fallbacks


def _cross_check(spec, mu, states, emaxes, quad_points, stride=1):
    sel = slice(None, None, stride)
    quad = emax_quadrature(spec.zeta, mu, states[sel], quad_points)
    disc = float(np.max(np.abs(quad - emaxes[sel]))) if quad.size else 0.0
    return {"emax_max_discrepancy": disc, "emax_degraded": disc > EMAX_AGREEMENT,
            "emax_checked_rows": int(quad.shape[0])}


def _finish_diagnostics(diag):
    if diag.get("emax_degraded"):
        warnings.warn(
            f"emax cross-check discrepancy {diag['emax_max_discrepancy']:.3e} exceeds {EMAX_AGREEMENT}",
            DegradedAccuracyWarning, stacklevel=3)
    return diag


def check_value_grid(grid: ValueGrid, spec: UtilitySpec, tol: float = GRID_TOL) -> dict:
    """Worst violation of each value-function invariant on the grid."""
    V = grid.values
    mu1 = float(spec.mu_table(1)[1])
    inner = V[:-1]
    i = np.arange(V.shape[1])
    worst = {
        "terminal": float(np.max(np.abs(V[-1]))),
        "zero_stock": float(np.max(np.abs(V[:, 0]))),
        "positive": float(max(0.0, -np.min(inner[:, 1:]))) if V.shape[1] > 1 else 0.0,
        "decreasing_t": float(max(0.0, np.max(np.diff(V, axis=0)))),
        "increasing_x": float(max(0.0, -np.min(np.diff(V, axis=1)))) if V.shape[1] > 1 else 0.0,
        "concave_x": float(max(0.0, np.max(np.diff(V, 2, axis=1)))) if V.shape[1] > 2 else 0.0,
        "below_asymptote": float(max(0.0, np.max(V - i * mu1))),
    }
    return worst


def _validate(grid, spec, tol=GRID_TOL):
    worst = check_value_grid(grid, spec, tol)
    bad = {k: v for k, v in worst.items() if v > tol}
    if bad:
        hint = " (non-monotone in t: reduce dt)" if "decreasing_t" in bad else ""
        raise SolverError(f"value grid violates invariants {sorted(bad)}{hint}", diagnostic=worst)
    return worst


def solve(spec: UtilitySpec, params: ModelParams, cross_check: bool = True,
          validate: bool = True, check_stride: int = 1) -> ValueGrid:
    """Integrate V backward from V(T, .) = 0 to t_min with fixed-step RK4."""
    spec.validate(params.n)
    mu = spec.mu_table(params.n)
    times, states, emaxes, fb = _integrate(spec, mu, params.lam, [0.0] * (params.n + 1),
                                           params.T, params.t_min, params.dt, params.quad_points)
    diag = {"fallback_rows": fb, "steps": len(times) - 1}
    if cross_check and params.n > 0:
        diag.update(_cross_check(spec, mu, states, emaxes, params.quad_points, check_stride))
    grid = ValueGrid(params, times[::-1].copy(), states[::-1].copy(), diag)
    if validate:
        diag["invariants"] = _validate(grid, spec)
    _finish_diagnostics(diag)
    return grid


def solve_scaled(spec: UtilitySpec, params: ModelParams, k: float,
                 base: ValueGrid | None = None) -> ValueGrid:
    """Solve for k * u and assert the result is k times the unscaled solution."""
    scaled_spec = spec.scaled(k, params.n)
    grid = solve(scaled_spec, params)
    base = base if base is not None else solve(spec, params)
    gap = float(np.max(np.abs(grid.values - k * base.values)))
    if gap > 1e-9:
        raise SolverError(f"scaled solve deviates from k*V by {gap:.3e}", {"gap": gap})
    dmu = np.diff(spec.mu_table(params.n))
    # the saving rule depends on V only through these cutoff arguments
    arg_base = base.delta_resource()[:, :, None] / dmu[None, None, :]
    arg_scaled = grid.delta_resource()[:, :, None] / (k * dmu)[None, None, :]
    if not np.allclose(arg_base, arg_scaled, rtol=1e-9, atol=1e-12):
        raise SolverError("scaled solve changes the saving rule")
    grid.diagnostics["scale_gap"] = gap
    return grid


def _value_at(spec, mu, params, grid, t):
    """V(t, .) by integrating from the nearest stored node at or above t."""
    k = int(np.searchsorted(grid.times, t, side="left"))
    if k < len(grid.times) and abs(grid.times[k] - t) < 1e-12:
        return grid.values[k].copy()
    start = grid.times[k]
    _, states, _, _ = _integrate(spec, mu, params.lam, grid.values[k], start, t,
                                 params.dt, params.quad_points)
    return states[-1]


def solve_two_payment(spec: UtilitySpec, tp: TwoPaymentSpec,
                      v_grid: ValueGrid | None = None) -> ValueGrid:
    """Composite value of holding i units now plus x_bar units arriving at t_bar.

    Column i, i = 0..x, holds V~(t, i) for t < t_bar and V(t, i + x_bar) for
    t >= t_bar, which is continuous across t_bar.
    """
    p = tp.base
    spec.validate(p.n)
    mu = spec.mu_table(p.n)
    if v_grid is None:
        v_grid = solve(spec, p)
    v_tbar = _value_at(spec, mu, p, v_grid, tp.t_bar)
    cols = slice(tp.x_bar, tp.x_bar + tp.x + 1)
    start = v_tbar[cols]
    t_lo, s_lo, em, fb = _integrate(spec, mu, p.lam, start, tp.t_bar, p.t_min, p.dt, p.quad_points)
    diag = {"fallback_rows": fb}
    if tp.x > 0:
        diag.update(_cross_check(spec, mu, s_lo, em, p.quad_points))
    above = v_grid.times > tp.t_bar + 1e-12
    times = np.concatenate([t_lo[::-1], v_grid.times[above]])
    values = np.concatenate([s_lo[::-1], v_grid.values[above][:, cols]])
    meta = {"x": tp.x, "x_bar": tp.x_bar, "t_bar": tp.t_bar, "kind": "two_payment"}
    _finish_diagnostics(diag)
    return ValueGrid(replace(p, n=tp.x), times, values, diag, meta)


# ---------------------------------------------------------------------------
# closed form and discrete-time oracle
# ---------------------------------------------------------------------------


def closed_form_single(lam: float, T: float, t):
    """V(t, 1) for zeta(theta) = theta and mu(1) = 1."""
    t = np.asarray(t, dtype=float)
    if np.any(t > T):
        raise DomainError("closed form is defined for t <= T")
    out = 1.0 - 2.0 / (lam * (T - t) + 2.0)
    return float(out) if out.ndim == 0 else out


def discrete_time_choice(spec: UtilitySpec, continuation, theta: float, x: int) -> int:
    """argmax_y {u(theta, x - y) + continuation[y]}, ties toward saving more."""
    return best_saving(float(spec.zeta(theta)), spec.mu_table(x), continuation, x)


def best_saving(z, mu, continuation, x):
    """Largest y whose objective z * mu[x - y] + continuation[y] is maximal up to TIE_RTOL."""
    vals = [z * mu[x - y] + continuation[y] for y in range(x + 1)]
    top = max(vals)
    tol = TIE_RTOL * max(1.0, abs(top))
    return max(y for y, v in enumerate(vals) if v >= top - tol)


def oracle_discrete_time(spec: UtilitySpec, params: ModelParams, dt_fine: float,
                         theta_grid: int, discount=None, terminal=None) -> ValueGrid:
    """Brute-force backward induction on a fine time grid.

    Each step carries an opportunity with probability lam * dt_fine; its
    quality is drawn from the midpoints of a uniform theta grid and the agent
    picks the best y exhaustively.  With ``discount`` the continuation value is
    multiplied by discount(t + dt_fine).  Setting lam * dt_fine = 1 gives the
    pure discrete-time model with an opportunity every period.  ``terminal``
    replaces the zero row at params.T, e.g. V(t_bar, . + x_bar) for a pending
    payment.
    """
    p = params
    prob = p.lam * dt_fine
    if not 0 < prob <= 1:
        raise DomainError("need 0 < lambda * dt_fine <= 1")
    if discount is None and prob >= 0.05:
        raise DomainError("undiscounted oracle needs lambda * dt_fine < 0.05")
    spec.validate(p.n)
    n = p.n
    mu = spec.mu_table(n)
    N = int(round((p.T - p.t_min) / dt_fine))
    theta = (np.arange(theta_grid) + 0.5) / theta_grid
    z = np.asarray(spec.zeta(theta), dtype=float)
    spend = [z * mu[k] for k in range(n + 1)]
    acc = np.empty(theta_grid)
    tmp = np.empty(theta_grid)
    V = np.zeros(n + 1) if terminal is None else np.array(terminal, dtype=float)
    if V.shape != (n + 1,):
        raise DomainError("terminal row must have n + 1 entries")
    out = np.empty((N + 1, n + 1))
    out[0] = V
    best = np.empty(n + 1)
    for step in range(1, N + 1):
        t_next = p.T - (step - 1) * dt_fine
        f = 1.0 if discount is None else float(discount(t_next))
        cont = f * V
        best[0] = cont[0]
        for x in range(1, n + 1):
            np.add(spend[x], cont[0], out=acc)
            for y in range(1, x + 1):
                np.add(spend[x - y], cont[y], out=tmp)
                np.maximum(acc, tmp, out=acc)
            best[x] = acc.mean()
        V = prob * best + (1.0 - prob) * cont
        out[step] = V
    times = p.T - dt_fine * np.arange(N + 1)
    return ValueGrid(replace(p, t_min=float(times[-1])), times[::-1].copy(), out[::-1].copy(),
                     {"oracle_dt": dt_fine, "theta_grid": theta_grid})
