"""Separable instantaneous utility u(theta, x) = zeta(theta) * mu(x).

The quality component ``zeta`` maps [0, 1] onto [0, 1] and is strictly
increasing with zeta(0) = 0 and zeta(1) = 1.  The quantity component ``mu``
is defined on integer resource counts, with mu(0) = 0, strictly increasing
and strictly discrete-concave.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .errors import DomainError, UnsupportedError

FD_STEP = 1e-5
NORMALIZATION_TOL = 1e-12


# ---------------------------------------------------------------------------
# quality component
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerZeta:
    """zeta(theta) = theta**k."""

    k: float
    family = "power"

    def __post_init__(self):
        if not (self.k > 0 and math.isfinite(self.k)):
            raise DomainError(f"power zeta needs k > 0, got {self.k}")

    def __call__(self, theta):
        return np.power(theta, self.k)

    def inverse(self, v):
        return np.power(v, 1.0 / self.k)

    def integral(self, a):
        """Integral of zeta over [0, a]."""
        return np.power(a, self.k + 1.0) / (self.k + 1.0)

    def derivative(self, theta):
        return self.k * np.power(theta, self.k - 1.0)

    def second_derivative(self, theta):
        return self.k * (self.k - 1.0) * np.power(theta, self.k - 2.0)

    def risk_aversion(self, theta):
        return (1.0 - self.k) / np.asarray(theta, dtype=float)

    # scalar fast paths used by the ODE right-hand side
    def scalar_inverse(self):
        inv_k = 1.0 / self.k
        return lambda v: v ** inv_k

    def scalar_integral(self):
        kp1 = self.k + 1.0
        return lambda a: a ** kp1 / kp1

    def to_dict(self):
        return {"family": "power", "k": self.k}


@dataclass(frozen=True)
class DualPowerZeta:
    """zeta(theta) = 1 - (1 - theta)**m with m >= 1 (concave for m > 1)."""

    m: float
    family = "dual_power"

    def __post_init__(self):
        if not (self.m >= 1 and math.isfinite(self.m)):
            raise DomainError(f"dual power zeta needs m >= 1, got {self.m}")

    def __call__(self, theta):
        return 1.0 - np.power(1.0 - np.asarray(theta, dtype=float), self.m)

    def inverse(self, v):
        return 1.0 - np.power(1.0 - np.asarray(v, dtype=float), 1.0 / self.m)

    def integral(self, a):
        a = np.asarray(a, dtype=float)
        return a - (1.0 - np.power(1.0 - a, self.m + 1.0)) / (self.m + 1.0)

    def derivative(self, theta):
        return self.m * np.power(1.0 - np.asarray(theta, dtype=float), self.m - 1.0)

    def second_derivative(self, theta):
        return -self.m * (self.m - 1.0) * np.power(1.0 - np.asarray(theta, dtype=float), self.m - 2.0)

    def risk_aversion(self, theta):
        return (self.m - 1.0) / (1.0 - np.asarray(theta, dtype=float))

    def scalar_inverse(self):
        inv_m = 1.0 / self.m
        return lambda v: 1.0 - (1.0 - v) ** inv_m

    def scalar_integral(self):
        m, mp1 = self.m, self.m + 1.0
        return lambda a: a - (1.0 - (1.0 - a) ** mp1) / mp1

    def to_dict(self):
        return {"family": "dual_power", "m": self.m}


@dataclass(frozen=True)
class TabulatedZeta:
    """Strictly increasing table of (theta, zeta(theta)) pairs.

    The default interpolant is monotone cubic (PCHIP), which preserves strict
    monotonicity but is only C1.  ``smooth=True`` switches to a C2 cubic
    spline; its monotonicity is checked on a dense grid at construction.
    Curvature-based comparisons require ``smooth=True``.
    """

    thetas: tuple
    values: tuple
    smooth: bool = False
    family = "tabulated"

    def __post_init__(self):
        th = np.asarray(self.thetas, dtype=float)
        va = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "thetas", tuple(float(x) for x in th))
        object.__setattr__(self, "values", tuple(float(x) for x in va))
        if th.ndim != 1 or th.shape != va.shape or th.size < 2:
            raise DomainError("tabulated zeta needs two equal-length arrays with at least 2 points")
        if abs(th[0]) > 0 or abs(th[-1] - 1.0) > NORMALIZATION_TOL:
            raise DomainError("tabulated zeta grid must start at 0 and end at 1")
        if abs(va[0]) > 0 or abs(va[-1] - 1.0) > NORMALIZATION_TOL:
            raise DomainError("tabulated zeta must satisfy zeta(0)=0 and zeta(1)=1")
        if np.any(np.diff(th) <= 0) or np.any(np.diff(va) <= 0):
            raise DomainError("tabulated zeta must be strictly increasing")
        if self.smooth:
            dense = np.linspace(0.0, 1.0, 4001)
            slope = self._interp.derivative()(dense)
            if np.any(slope < -1e-12 * np.max(slope)):
                raise DomainError("smoothed tabulated zeta is not strictly increasing")

    @classmethod
    def from_function(cls, fn, points, smooth=False):
        th = np.linspace(0.0, 1.0, points)
        va = np.asarray(fn(th), dtype=float)
        va = (va - va[0]) / (va[-1] - va[0])
        return cls(tuple(th), tuple(va), smooth)

    @cached_property
    def _interp(self):
        th = np.asarray(self.thetas)
        va = np.asarray(self.values)
        if self.smooth:
            return CubicSpline(th, va)
        return PchipInterpolator(th, va)

    @cached_property
    def _antiderivative(self):
        return self._interp.antiderivative()

    def __call__(self, theta):
        out = self._interp(np.clip(theta, 0.0, 1.0))
        return out if np.ndim(out) else float(out)

    def inverse(self, v):
        """Bisection on the interpolant, then Newton polish."""
        v = np.asarray(v, dtype=float)
        th = np.asarray(self.thetas)
        va = np.asarray(self.values)
        # bracket by table segment
        idx = np.clip(np.searchsorted(va, v, side="right") - 1, 0, th.size - 2)
        lo, hi = th[idx].copy(), th[idx + 1].copy()
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self._interp(mid) < v
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo < 1e-15):
                break
        x = 0.5 * (lo + hi)
        deriv = self._interp.derivative()
        for _ in range(2):
            d = deriv(x)
            step = np.where(d > 0, (self._interp(x) - v) / np.where(d > 0, d, 1.0), 0.0)
            x = np.clip(x - step, th[idx], th[idx + 1])
        x = np.where(v <= 0.0, 0.0, np.where(v >= 1.0, 1.0, x))
        return x if x.ndim else float(x)

    def integral(self, a):
        out = self._antiderivative(np.clip(a, 0.0, 1.0))
        return out if np.ndim(out) else float(out)

    def derivative(self, theta):
        self._require_smooth()
        return _central_first(self, theta)

    def second_derivative(self, theta):
        self._require_smooth()
        return _central_second(self, theta)

    def risk_aversion(self, theta):
        return -self.second_derivative(theta) / self.derivative(theta)

    def _require_smooth(self):
        if not self.smooth:
            raise UnsupportedError(
                "curvature of a PCHIP-tabulated zeta is not defined; build it with smooth=True"
            )

    def scalar_inverse(self):
        return lambda v: float(self.inverse(v))

    def scalar_integral(self):
        anti = self._antiderivative
        return lambda a: float(anti(a))

    def to_dict(self):
        return {
            "family": "tabulated",
            "thetas": list(self.thetas),
            "values": list(self.values),
            "smooth": self.smooth,
        }


Zeta = Union[PowerZeta, DualPowerZeta, TabulatedZeta]


def _central_first(fn, theta, h=FD_STEP):
    theta = np.asarray(theta, dtype=float)
    return (fn(theta + h) - fn(theta - h)) / (2.0 * h)


def _central_second(fn, theta, h=FD_STEP):
    theta = np.asarray(theta, dtype=float)
    return (fn(theta + h) - 2.0 * fn(theta) + fn(theta - h)) / (h * h)


# ---------------------------------------------------------------------------
# quantity component
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerMu:
    """mu(x) = x**gamma for gamma in (0, 1]."""

    gamma: float
    family = "power"

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise DomainError(f"power mu needs gamma in (0, 1], got {self.gamma}")

    capacity = None

    def table(self, n):
        return np.arange(n + 1, dtype=float) ** self.gamma

    def to_dict(self):
        return {"family": "power", "gamma": self.gamma}


@dataclass(frozen=True)
class TableMu:
    """Explicit values mu(0), ..., mu(n)."""

    values: tuple
    family = "table"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) < 2:
            raise DomainError("table mu needs at least mu(0) and mu(1)")

    @property
    def capacity(self):
        return len(self.values) - 1

    def table(self, n):
        if n > self.capacity:
            raise DomainError(f"table mu covers {self.capacity} units, {n} requested")
        return np.asarray(self.values[: n + 1], dtype=float)

    def to_dict(self):
        return {"family": "table", "values": list(self.values)}


Mu = Union[PowerMu, TableMu]


# ---------------------------------------------------------------------------
# combined spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilitySpec:
    zeta: Zeta
    mu: Mu

    def mu_table(self, n):
        return self.mu.table(n)

    def validate(self, n):
        """Check normalization, monotonicity and strict concavity up to ``n`` units."""
        z0 = float(self.zeta(0.0))
        z1 = float(self.zeta(1.0))
        if abs(z0) > NORMALIZATION_TOL or abs(z1 - 1.0) > NORMALIZATION_TOL:
            raise DomainError(f"zeta must satisfy zeta(0)=0, zeta(1)=1; got {z0}, {z1}")
        mu = self.mu_table(n)
        if mu[0] != 0.0:
            raise DomainError("mu(0) must be 0")
        d = np.diff(mu)
        if np.any(d <= 0):
            raise DomainError("mu must be strictly increasing")
        if np.any(np.diff(d) >= 0):
            raise DomainError("mu must be strictly concave (decreasing increments)")
        return self

    def scaled(self, k, n):
        """Spec for k * u, carried by the quantity component (zeta stays normalized)."""
        if not k > 0:
            raise DomainError("scale factor must be positive")
        return UtilitySpec(self.zeta, TableMu(tuple(k * self.mu_table(n))))

    def u(self, theta, amount):
        return float(self.zeta(theta)) * float(self.mu_table(amount)[amount])

    def to_dict(self):
        return {"zeta": self.zeta.to_dict(), "mu": self.mu.to_dict()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(zeta_from_dict(d["zeta"]), mu_from_dict(d["mu"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def zeta_from_dict(d):
    family = d.get("family")
    if family == "power":
        return PowerZeta(float(d["k"]))
    if family == "dual_power":
        return DualPowerZeta(float(d["m"]))
    if family == "tabulated":
        return TabulatedZeta(tuple(d["thetas"]), tuple(d["values"]), bool(d.get("smooth", False)))
    raise DomainError(f"unknown zeta family {family!r}")


def mu_from_dict(d):
    family = d.get("family")
    if family == "power":
        return PowerMu(float(d["gamma"]))
    if family in ("table", "explicit"):
        return TableMu(tuple(d["values"]))
    raise DomainError(f"unknown mu family {family!r}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def eval_u(spec: UtilitySpec, theta: float, amount: int, n: int | None = None) -> float:
    """zeta(theta) * mu(amount), with domain checks."""
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    if int(amount) != amount or amount < 0:
        raise DomainError(f"amount must be a non-negative integer, got {amount}")
    limit = n if n is not None else spec.mu.capacity
    if limit is not None and amount > limit:
        raise DomainError(f"amount {amount} exceeds resource stock {limit}")
    if theta == 0.0 or amount == 0:
        return 0.0
    return spec.u(theta, int(amount))


def zeta_inverse(spec: UtilitySpec, v: float) -> float:
    if not 0.0 <= v <= 1.0:
        raise DomainError(f"zeta inverse is defined on [0, 1], got {v}")
    return float(spec.zeta.inverse(v))


def is_more_concave(a: UtilitySpec, b: UtilitySpec, grid: int = 1000) -> bool:
    """True iff b's zeta has strictly larger Arrow-Pratt coefficient than a's at
    every interior point i/grid."""
    if grid < 2:
        raise DomainError("grid must be at least 2")
    theta = np.arange(1, grid) / grid
    ra = np.asarray(a.zeta.risk_aversion(theta), dtype=float)
    rb = np.asarray(b.zeta.risk_aversion(theta), dtype=float)
    return bool(np.all(rb > ra))


def is_log_concave_zeta(spec: UtilitySpec, grid: int = 1000) -> bool:
    """Sign test of the central second difference of log zeta on the grid."""
    if grid < 2:
        raise DomainError("grid must be at least 2")
    theta = np.arange(1, grid) / grid
    if 1.0 / grid < FD_STEP:
        raise DomainError(f"grid finer than the difference step {FD_STEP}")
    with np.errstate(divide="ignore", invalid="ignore"):
        second = _central_second(lambda x: np.log(np.asarray(spec.zeta(x), dtype=float)), theta)
    if np.any(~np.isfinite(second)):
        raise DomainError("zeta must be positive on (0, 1]")
    return bool(np.all(second < 0))
