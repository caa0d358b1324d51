"""sigma-finite distribution flows evaluated exactly and by Monte Carlo.

The flow up to time ``t`` started at ``x`` integrates a cylinder functional
``f(X_{t_1}, ..., X_{t_n})`` (``t_n = t``) against

    h(x) E^h_x[ e^{alpha t} f(...) / h(X_t) ; t < zeta ],

which equals the kernel product  T_{t_1} T_{t_2 - t_1} ... T_{t_n - t_{n-1}} f
and so does not depend on ``h``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .htransform import q_kernel
from .model import check_semi_dirichlet
from .pathsim import DELTA, McEstimate, run_mc, weights_at, z_score
from .semigroup import engine_for


class CylinderFunctional:
    """f(X_{t_1}, ..., X_{t_n}) on a strictly increasing time grid.

    ``f`` is either a product of per-coordinate vectors (``factors``) or a
    full table indexed by ``(x_1, ..., x_n)``.  An empty grid is the constant
    functional 1.
    """

    def __init__(self, times, factors=None, table=None):
        times = [float(t) for t in times]
        if any(t < 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"cylinder times must be increasing and >= 0: {times}")
        if (factors is None) == (table is None) and times:
            raise ValueError("give exactly one of factors or table")
        self.times = tuple(times)
        self.factors = None if factors is None else [np.asarray(f, dtype=float) for f in factors]
        self.table = None if table is None else np.asarray(table, dtype=float)
        if self.factors is not None and len(self.factors) != len(times):
            raise ValueError("one factor per time")
        if self.table is not None and self.table.ndim != len(times):
            raise ValueError("table rank must equal the number of times")

    @classmethod
    def indicator(cls, time, states, n):
        v = np.zeros(n)
        v[list(states)] = 1.0
        return cls([time], [v])

    @property
    def last_time(self):
        return self.times[-1] if self.times else 0.0

    def then(self, t, factor):
        """Append a coordinate at time ``t`` (strictly after the grid)."""
        factor = np.asarray(factor, dtype=float)
        if self.table is not None:
            return CylinderFunctional([*self.times, t], table=self.table[..., None] * factor)
        return CylinderFunctional([*self.times, t], [*(self.factors or []), factor])

    def times_last(self, factor):
        """Multiply the last coordinate by ``factor``."""
        factor = np.asarray(factor, dtype=float)
        if self.table is not None:
            return CylinderFunctional(self.times, table=self.table * factor)
        return CylinderFunctional(self.times, [*self.factors[:-1], self.factors[-1] * factor])

    def evaluate(self, batch, offset=0.0):
        """Per-path values at times ``offset + t_i``; 0 where a coordinate is Delta."""
        n = len(batch)
        offset = np.broadcast_to(np.asarray(offset, dtype=float), (n,))
        if not self.times:
            return np.where(np.isfinite(offset), 1.0, 0.0)
        xs = [batch.state_at(np.where(np.isfinite(offset), offset + t, np.inf)) for t in self.times]
        dead = np.zeros(n, dtype=bool)
        for x in xs:
            dead |= x == DELTA
        safe = [np.where(x == DELTA, 0, x) for x in xs]
        if self.table is not None:
            vals = self.table[tuple(safe)]
        else:
            vals = np.ones(n)
            for f, x in zip(self.factors, safe):
                vals = vals * f[x]
        return np.where(dead, 0.0, vals)

    def __call__(self, batch, start, stop):
        return self.evaluate(batch, start)


@dataclass(frozen=True)
class FlowQuery:
    initial: object
    functional: CylinderFunctional

    def __post_init__(self):
        if not self.functional.times:
            raise ValueError("a flow query needs at least one time")
        if np.ndim(self.initial) == 1:
            mu = np.asarray(self.initial, dtype=float)
            if np.any(mu < 0) or mu.sum() > 1 + 1e-12:
                raise ValueError("initial distribution must be a sub-probability vector")

    @property
    def t(self):
        return self.functional.times[-1]


def flow_vector(bundle, cyl: CylinderFunctional, kernel=None):
    """x -> flow of ``cyl`` started at x, by nested kernel contraction.

    ``kernel(dt)`` defaults to the model's T_dt; passing ``q_kernel`` of an
    h-transform gives the h-route of the same quantity.
    """
    eng = engine_for(bundle)
    K = kernel or eng.transition
    if not cyl.times:
        return np.ones(eng.n)
    dts = np.diff((0.0,) + cyl.times)
    if cyl.table is not None:
        F = cyl.table
        for i in range(len(cyl.times) - 1, 0, -1):
            F = np.einsum("...ab,ab->...a", F, K(dts[i]))
        return K(dts[0]) @ F
    vec = cyl.factors[-1]
    for i in range(len(cyl.times) - 1, 0, -1):
        vec = cyl.factors[i - 1] * (K(dts[i]) @ vec)
    return K(dts[0]) @ vec


def flow_exact(bundle, query: FlowQuery):
    vec = flow_vector(bundle, query.functional)
    if np.ndim(query.initial) == 0:
        return float(vec[int(query.initial)])
    return float(np.dot(query.initial, vec))


def _start_weight(query):
    if np.ndim(query.initial) == 0:
        return int(query.initial), 1.0
    mu = np.asarray(query.initial, dtype=float)
    return mu, float(mu.sum())


def flow_values(ht, batch, stop, y):
    """Per-path integrand of an expanded flow: weight(stop) * y."""
    return weights_at(ht, batch, stop) * y


def flow_mc(ht, query: FlowQuery, n_paths, seed, stream=0, horizon=None, workers=1) -> McEstimate:
    """Importance-weighted estimator of the flow; unbiased for :func:`flow_exact`."""
    t = query.t
    horizon = 2.0 * t if horizon is None else max(horizon, t)
    if horizon <= 0:
        horizon = 1.0
    x0, mass = _start_weight(query)
    cyl = query.functional

    def fn(batch):
        return flow_values(ht, batch, np.full(len(batch), t), cyl.evaluate(batch))

    est = run_mc(ht, x0, horizon, fn, n_paths, seed, stream, workers)
    if mass != 1.0:
        est = McEstimate(est.mean * mass, est.std_error * mass, est.n_paths, est.seed, est.stream)
    return est


def total_mass(bundle, x, t):
    """Q_{x,t}(Omega) = (T_t 1)(x); above 1 means mass is being created."""
    eng = engine_for(bundle)
    return float(eng.transition(t)[x] @ np.ones(eng.n))


def markov_check(bundle, s, u, gamma: CylinderFunctional, f):
    """max_x |Q_{x,s+u}[Gamma f(X_{s+u})] - Q_{x,s}[Gamma (T_u f)(X_s)]|.

    The left side contracts straight from Gamma's last time to ``s + u``;
    the right side goes through ``s``.
    """
    if gamma.times and gamma.last_time > s:
        raise ValueError("Gamma must be measurable up to time s")
    eng = engine_for(bundle)
    f = np.asarray(f, dtype=float)
    ends_at_s = bool(gamma.times) and gamma.last_time == s
    if u == 0 and ends_at_s:
        lhs = flow_vector(bundle, gamma.times_last(f))
    else:
        lhs = flow_vector(bundle, gamma.then(s + u, f))
    Quf = eng.transition(u) @ f
    if ends_at_s:
        rhs = flow_vector(bundle, gamma.times_last(Quf))
    else:
        rhs = flow_vector(bundle, gamma.then(s, Quf))
    return float(np.max(np.abs(lhs - rhs)))


@dataclass(frozen=True)
class ConsistencyWitness:
    x: int
    s: float
    t: float
    A: tuple
    lhs: float
    rhs: float

    @property
    def gap(self):
        return self.lhs - self.rhs


@dataclass(frozen=True)
class NoViolation:
    x: int
    pairs_checked: int
    sub_markov: bool


def _pair_values(bundle, x, s, t, tol):
    eng = engine_for(bundle)
    mass = eng.transition(t - s) @ np.ones(eng.n)
    A = np.flatnonzero(mass > 1.0 + tol)
    if A.size == 0:
        return None
    ind = np.zeros(eng.n)
    ind[A] = 1.0
    rhs = flow_vector(bundle, CylinderFunctional([s], [ind]))[x]
    lhs = flow_vector(bundle, CylinderFunctional([s, t], [ind, np.ones(eng.n)]))[x]
    return tuple(int(a) for a in A), float(lhs), float(rhs)


def consistency_certificate(bundle, x, candidates=None, grid=None, tol=1e-6):
    """Look for Q_{x,t}(Gamma; s < zeta) != Q_{x,s}(Gamma), Gamma = {X_s in A}.

    ``A`` is where ``T_{t-s} 1`` exceeds 1.  Candidate ``(s, t)`` pairs are
    tried first, in order; otherwise the grid pair with the largest gap is
    returned.  Sub-Markov models return :class:`NoViolation` (after the same
    grid scan confirms it).
    """
    grid = np.round(np.arange(0.0, 2.0 + 1e-9, 0.1), 10) if grid is None else np.asarray(grid)
    for s, t in candidates or ():
        got = _pair_values(bundle, x, float(s), float(t), tol)
        if got and got[1] > got[2] + tol:
            return ConsistencyWitness(x, float(s), float(t), *got)
    best = None
    checked = 0
    for s, t in itertools.combinations(grid, 2):
        checked += 1
        got = _pair_values(bundle, x, float(s), float(t), tol)
        if got and got[1] > got[2] + tol:
            w = ConsistencyWitness(x, float(s), float(t), *got)
            if best is None or w.gap > best.gap:
                best = w
    if best is not None:
        return best
    return NoViolation(x, checked, check_semi_dirichlet(bundle).sub_markov)


@dataclass
class HIndependenceReport:
    kernel_residual: float
    estimates: dict = field(default_factory=dict)
    z_scores: dict = field(default_factory=dict)
    tol_exact: float = 1e-10
    tol_z: float = 4.0

    @property
    def max_abs_z(self):
        return max((abs(z) for z in self.z_scores.values()), default=0.0)

    @property
    def passed(self):
        return self.kernel_residual <= self.tol_exact and self.max_abs_z <= self.tol_z


def h_independence_check(bundle, h_list, queries, n_paths, seed, tol_exact=1e-10, tol_z=4.0,
                         workers=1):
    """Exact: Q_t from every h agrees; MC: pairwise z-scores of flow estimates.

    Each h uses its own stream index, so the estimates are independent.
    """
    times = sorted({t for q in queries for t in q.functional.times} | {1.0})
    resid = 0.0
    for a, b in itertools.combinations(h_list, 2):
        for t in times:
            resid = max(resid, float(np.max(np.abs(q_kernel(a, t) - q_kernel(b, t)))))
    rep = HIndependenceReport(resid, tol_exact=tol_exact, tol_z=tol_z)
    for qi, q in enumerate(queries):
        ests = [flow_mc(ht, q, n_paths, seed, stream=j, workers=workers) for j, ht in enumerate(h_list)]
        rep.estimates[qi] = ests
        for (i, a), (j, b) in itertools.combinations(enumerate(ests), 2):
            rep.z_scores[(qi, i, j)] = z_score(a, b)
    return rep


def sub_markov_restriction_gap(bundle, x, s, t, gamma: CylinderFunctional):
    """Q_{x,t}(Gamma; s < zeta) - Q_{x,s}(Gamma) for a cylinder over [0, s]."""
    eng = engine_for(bundle)
    one = np.ones(eng.n)
    base = gamma if gamma.times and gamma.last_time == s else gamma.then(s, one)
    lhs = flow_vector(bundle, base.then(t, one))[x]
    rhs = flow_vector(bundle, base)[x]
    return float(lhs - rhs)


def restriction_identity_residual(bundle, x, s, t, gamma: CylinderFunctional):
    """|Q_{x,t}(Gamma; s < zeta) - Q_{x,s}[Gamma (T_{t-s} 1)(X_s)]|."""
    eng = engine_for(bundle)
    one = np.ones(eng.n)
    base = gamma if gamma.times and gamma.last_time == s else gamma.then(s, one)
    lhs = flow_vector(bundle, base.then(t, one))[x]
    rhs = flow_vector(bundle, base.times_last(eng.transition(t - s) @ one))[x]
    return float(abs(lhs - rhs))

