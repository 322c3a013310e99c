"""Monte Carlo paths of Poisson opportunities and agents acting on them.

Seeding: every trace (or every fixed-size chunk of a batch) gets its own
generator built from ``SeedSequence(master_seed, spawn_key=(index,))``, so
results do not depend on how work is scheduled across threads.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .policy import saving_rule_from_row
from .utility import UtilitySpec
from .value_solver import TIE_RTOL, ModelParams, TwoPaymentSpec, ValueGrid

CHUNK = 1 << 16


def trace_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


@dataclass
class SimulationTrace:
    seed: int
    opportunities: list
    decisions: list
    realized_utility: float


def _path(rng, lam, t0, T):
    out = []
    t = t0
    while True:
        t += rng.exponential(1.0 / lam)
        if t > T:
            return out
        out.append((t, float(rng.random())))


def sample_path(params: ModelParams, t0: float, seed: int):
    """Opportunity (time, quality) pairs on (t0, T] for one seeded path."""
    if t0 > params.T:
        raise DomainError("t0 must not exceed T")
    return _path(trace_rng(seed), params.lam, t0, params.T)


def run_agent(grid: ValueGrid, spec: UtilitySpec, x0: int, t0: float, seed: int) -> SimulationTrace:
    if not 0 <= x0 <= grid.capacity:
        raise DomainError(f"x0={x0} outside 0..{grid.capacity}")
    path = _path(trace_rng(seed), grid.params.lam, t0, grid.T)
    x = x0
    total = 0.0
    decisions = []
    mu = spec.mu_table(grid.capacity)
    for t, theta in path:
        y = saving_rule_from_row(spec, grid.row(t), theta, x) if x > 0 else 0
        spend = x - y
        total += float(spec.zeta(theta)) * float(mu[spend])
        x = y
        decisions.append((spend, x))
    return SimulationTrace(seed, path, decisions, total)


def _simulate_chunk(grid, spec, x0, t0, size, rng):
    """Vectorized agents; returns realized utility per path."""
    lam, T = grid.params.lam, grid.T
    n = grid.capacity
    mu = spec.mu_table(n)
    t = np.full(size, float(t0))
    x = np.full(size, x0, dtype=np.int64)
    util = np.zeros(size)
    active = np.arange(size)
    ys = np.arange(n + 1)
    while active.size:
        t[active] += rng.exponential(1.0 / lam, active.size)
        theta = rng.random(active.size)
        live = t[active] <= T
        active, theta = active[live], theta[live]
        if not active.size:
            break
        ta, xa = t[active], x[active]
        z = np.asarray(spec.zeta(theta), dtype=float)
        cont = np.stack([np.interp(ta, grid.times, grid.values[:, y]) for y in ys], axis=1)
        spend_mu = mu[np.clip(xa[:, None] - ys[None, :], 0, n)]
        obj = z[:, None] * spend_mu + cont
        obj[ys[None, :] > xa[:, None]] = -np.inf
        # ties, up to rounding, toward saving more
        top = obj.max(axis=1, keepdims=True)
        near = obj >= top - TIE_RTOL * np.maximum(1.0, np.abs(top))
        y = n - np.argmax(near[:, ::-1], axis=1)
        util[active] += z * mu[xa - y]
        x[active] = y
        active = active[y > 0]
    return util


@dataclass
class BatchResult:
    mean: float
    stderr: float
    n_paths: int
    utilities: np.ndarray = field(repr=False)
    config_hash: str = ""

    def summary(self):
        return {"mean": self.mean, "stderr": self.stderr, "N": self.n_paths,
                "config_hash": self.config_hash}


def simulate_batch(grid: ValueGrid, spec: UtilitySpec, x0: int, t0: float, n_paths: int,
                   seed: int, threads: int = 1, chunk: int = CHUNK) -> BatchResult:
    """Mean realized utility of ``n_paths`` agents starting with x0 at t0."""
    if n_paths < 1:
        raise DomainError("n_paths must be positive")
    if not 0 <= x0 <= grid.capacity:
        raise DomainError(f"x0={x0} outside 0..{grid.capacity}")
    sizes = [min(chunk, n_paths - s) for s in range(0, n_paths, chunk)]

    def work(k):
        return _simulate_chunk(grid, spec, x0, t0, sizes[k], trace_rng(seed, k))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, range(len(sizes))))
    else:
        parts = [work(k) for k in range(len(sizes))]
    util = np.concatenate(parts)
    # exact summation keeps totals independent of chunk order
    mean = math.fsum(util) / n_paths
    var = math.fsum((util - mean) ** 2) / max(n_paths - 1, 1)
    return BatchResult(mean, math.sqrt(var / n_paths), n_paths, util)


def batch_to_csv(result: BatchResult, header=None):
    buf = io.StringIO()
    if header:
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trace", "realized_utility"])
    for k, u in enumerate(result.utilities):
        w.writerow([k, repr(float(u))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# correlated payments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelatedBernoulli:
    """X1 = 1[X <= p1], X2 = 1[c <= X <= c + p2] for X ~ U[0, 1]."""

    p1: float
    p2: float
    c: float

    def __post_init__(self):
        if not (0.0 <= self.p1 <= 1.0 and 0.0 <= self.p2 <= 1.0):
            raise DomainError("probabilities must lie in [0, 1]")
        lo, hi = self.c_range(self.p1, self.p2)
        if not lo - 1e-12 <= self.c <= hi + 1e-12:
            raise DomainError(f"c={self.c} outside admissible [{lo}, {hi}]")

    @staticmethod
    def c_range(p1, p2):
        return max(0.0, p1 - p2), min(p1, 1.0 - p2)

    def joint(self):
        """{(x1, x2): probability} implied by the interval construction."""
        p1, p2, c = self.p1, self.p2, self.c
        p11 = max(0.0, min(p1, c + p2) - max(0.0, c))
        p10 = p1 - p11
        p01 = p2 - p11
        return {(1, 1): p11, (1, 0): p10, (0, 1): p01, (0, 0): 1.0 - p11 - p10 - p01}


def shift_table(p1, p2, c):
    """Closed-form joint table parameterized by the shift c."""
    return {
        (0, 0): min(1 - p1, 1 - p2) - c,
        (0, 1): max(p2 - p1, 0.0) + c,
        (1, 0): max(p1 - p2, 0.0) + c,
        (1, 1): min(p1, p2) - c,
    }


def _draw_pairs(dist, u):
    x1 = (u <= dist.p1).astype(np.int8)
    x2 = ((u >= dist.c) & (u <= dist.c + dist.p2)).astype(np.int8)
    return x1, x2


def sample_correlated(dist: CorrelatedBernoulli, seed: int):
    x1, x2 = _draw_pairs(dist, trace_rng(seed).random(1))
    return int(x1[0]), int(x2[0])


def sample_correlated_batch(dist: CorrelatedBernoulli, n: int, seed: int):
    return _draw_pairs(dist, trace_rng(seed).random(n))


def empirical_joint(x1, x2):
    n = len(x1)
    return {(a, b): float(np.count_nonzero((x1 == a) & (x2 == b))) / n for a in (0, 1) for b in (0, 1)}


def double_payment_value(v_grid: ValueGrid, vt_grid: ValueGrid, tp: TwoPaymentSpec,
                         dist: CorrelatedBernoulli, t: float):
    """Expected value E before t of the double random payment, and dE/dc.

    Outcome weights come from ``dist.joint()``: both payments pay V~(t, x),
    only the first pays V(t, x), only the second pays V(t_bar, x_bar).
    """
    if not t < tp.t_bar:
        raise DomainError("query time must precede the payment time")
    joint = dist.joint()
    vt = vt_grid.value(t, tp.x)
    v_now = v_grid.value(t, tp.x)
    v_later = v_grid.value(tp.t_bar, tp.x_bar)
    e = joint[(1, 1)] * vt + joint[(1, 0)] * v_now + joint[(0, 1)] * v_later
    return e, -vt + v_now + v_later


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
