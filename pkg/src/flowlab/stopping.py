"""Stopping times on simulated paths, expanded flows and first-passage oracles.

Stopping times are small expression trees:

    Constant(t) | Hitting(B) | Entrance(B) | Min(a, b) | ShiftedSum(a, b)

``ShiftedSum(a, b)`` is ``a + b o theta_a``.  Evaluation with lifetime
truncation maps every value ``>= zeta`` to ``+inf``.  A value that cannot be
resolved within the simulated horizon is *censored*.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import Censored, NotSolvable
from .flows import CylinderFunctional, flow_values, flow_vector
from .model import STRUCT_TOL, spectral_bound
from .pathsim import DELTA, McEstimate, PathSample, run_mc, z_score
from .semigroup import engine_for


@dataclass(frozen=True)
class Constant:
    t: float


@dataclass(frozen=True)
class Hitting:
    """inf{t > 0 : X_t in B}; on step paths this equals the entrance time."""
    B: frozenset

    def __init__(self, B):
        object.__setattr__(self, "B", frozenset(int(b) for b in B))


@dataclass(frozen=True)
class Entrance:
    B: frozenset

    def __init__(self, B):
        object.__setattr__(self, "B", frozenset(int(b) for b in B))


@dataclass(frozen=True)
class Min:
    a: object
    b: object


@dataclass(frozen=True)
class ShiftedSum:
    first: object
    then: object


def _after(spec, batch, s):
    H = batch.horizon
    if isinstance(spec, Constant):
        return s + spec.t, np.zeros(len(batch), dtype=bool)
    if isinstance(spec, (Hitting, Entrance)):
        return batch.entrance_time(spec.B, after=s)
    if isinstance(spec, Min):
        va, ca = _after(spec.a, batch, s)
        vb, cb = _after(spec.b, batch, s)
        c = (ca & cb) | (ca & (vb > H)) | (cb & (va > H))
        return np.where(c, np.inf, np.minimum(va, vb)), c
    if isinstance(spec, ShiftedSum):
        va, ca = _after(spec.first, batch, s)
        vb, cb = _after(spec.then, batch, np.where(ca, np.inf, va))
        c = ca | cb
        return np.where(c, np.inf, vb), c
    raise TypeError(f"unknown stopping time {spec!r}")


def evaluate_batch(spec, batch, truncate=True):
    """Values and censoring mask of ``spec`` on every path.

    With ``truncate`` the value is ``+inf`` on ``{value >= zeta}``.
    """
    v, c = _after(spec, batch, np.zeros(len(batch)))
    if truncate:
        live = ~batch.killed
        c = c | (np.isfinite(v) & (v > batch.horizon) & live)
        v = np.where(c, np.inf, v)
        v = np.where(batch.killed & (v >= batch.lifetime), np.inf, v)
    return v, c


def evaluate(spec, path, truncate=True):
    """Stopping time on one path or a batch; a censored single path raises."""
    if isinstance(path, PathSample):
        v, c = evaluate_batch(spec, path.to_batch(), truncate)
        if c[0]:
            raise Censored(path.horizon)
        return float(v[0])
    return evaluate_batch(spec, path, truncate)


# -- path functionals measurable up to a stopping time ------------------------

class ConstantFunctional:
    def __init__(self, c=1.0):
        self.c = float(c)

    def __call__(self, batch, start, stop):
        return np.full(len(batch), self.c)


class TerminalValue:
    """f(X_stop), vanishing at Delta and at infinite stops."""

    def __init__(self, f):
        self.f = np.asarray(f, dtype=float)

    def __call__(self, batch, start, stop):
        stop = np.asarray(stop, dtype=float)
        ok = np.isfinite(stop) & (stop <= batch.horizon)
        x = batch.state_at(np.where(ok, stop, np.inf))
        return np.where(x == DELTA, 0.0, self.f[np.where(x == DELTA, 0, x)])


# -- exact first-passage oracle -------------------------------------------------

def _split(n, B):
    B = sorted(int(b) for b in B)
    Bc = [x for x in range(n) if x not in set(B)]
    return B, Bc


def first_passage_exact(bundle, B, f, tol=STRUCT_TOL):
    """w with (L w) = 0 off B and w = f on B.

    ``w(x)`` is the expanded flow of ``f(X_sigma_B)`` from ``x``; it involves
    only ``L`` and hence no ``h``.  Raises :class:`NotSolvable` when the
    restriction of ``L`` to the complement of B has spectral bound >= -tol.
    """
    eng = engine_for(bundle)
    f = np.asarray(f, dtype=float)
    B, Bc = _split(eng.n, B)
    w = np.zeros(eng.n)
    w[B] = f[B]
    if not Bc:
        return w
    L = eng.L
    inner = L[np.ix_(Bc, Bc)]
    sb = spectral_bound(inner)
    if sb >= -tol:
        raise NotSolvable(f"spectral bound of L off B is {sb:.6g} >= 0; expanded mass may be infinite")
    w[Bc] = -np.linalg.solve(inner, L[np.ix_(Bc, B)] @ f[B])
    return w


def first_passage_h_route(ht, B, f):
    """Same quantity via the h-process: h * w^h with ((L^h + alpha) w^h) = 0 off B."""
    n = len(ht.h)
    f = np.asarray(f, dtype=float)
    B, Bc = _split(n, B)
    wh = np.zeros(n)
    wh[B] = f[B] / ht.h[B]
    if Bc:
        A = ht.Lh + ht.alpha * np.eye(n)
        wh[Bc] = -np.linalg.solve(A[np.ix_(Bc, Bc)], A[np.ix_(Bc, B)] @ wh[B])
    return ht.h * wh


def dirichlet_residual(bundle, B, w):
    eng = engine_for(bundle)
    _, Bc = _split(eng.n, B)
    if not Bc:
        return 0.0
    return float(np.max(np.abs((eng.L @ w)[Bc])))


def is_solvable(bundle, B, tol=STRUCT_TOL):
    eng = engine_for(bundle)
    _, Bc = _split(eng.n, B)
    return not Bc or spectral_bound(eng.L[np.ix_(Bc, Bc)]) < -tol


def finite_second_moment(bundle, B):
    """Whether e^{alpha sigma_B}-weights have finite variance (s(L off B) < -alpha)."""
    eng = engine_for(bundle)
    _, Bc = _split(eng.n, B)
    return not Bc or spectral_bound(eng.L[np.ix_(Bc, Bc)]) < -eng.bundle.alpha


def _hitting_sets(spec):
    if isinstance(spec, (Hitting, Entrance)):
        yield spec.B
    elif isinstance(spec, Min):
        yield from _hitting_sets(spec.a)
        yield from _hitting_sets(spec.b)
    elif isinstance(spec, ShiftedSum):
        yield from _hitting_sets(spec.first)
        yield from _hitting_sets(spec.then)


# -- expanded flows --------------------------------------------------------------

class HeavyTailWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ExpandedEstimate:
    estimate: McEstimate
    censored_fraction: float
    heavy_tail: bool

    @property
    def mean(self):
        return self.estimate.mean

    @property
    def std_error(self):
        return self.estimate.std_error


def default_horizon(spec, floor=10.0):
    if isinstance(spec, Constant):
        return 2.0 * spec.t if spec.t > 0 else 1.0
    return floor


def expanded_flow_mc(ht, x, spec, Y=None, n_paths=100_000, seed=0, stream=0, horizon=None,
                     workers=1) -> ExpandedEstimate:
    """Estimate Q_{x,sigma}[Y; sigma < zeta] = h(x) E^h[e^{alpha sigma} Y / h(X_sigma); sigma < zeta].

    ``Y(batch, start, stop)`` is evaluated on the path stopped at sigma
    (``start = 0``).  Censored paths contribute 0 and are counted.
    """
    Y = Y or ConstantFunctional(1.0)
    horizon = default_horizon(spec) if horizon is None else horizon
    heavy = not all(is_solvable(ht.bundle, B) for B in _hitting_sets(spec))
    if heavy:
        warnings.warn("first-passage problem not solvable: expanded mass may be infinite",
                      HeavyTailWarning, stacklevel=2)

    def fn(batch):
        stop, cens = evaluate_batch(spec, batch)
        y = Y(batch, np.zeros(len(batch)), stop)
        return np.column_stack([flow_values(ht, batch, stop, y), cens.astype(float)])

    est, cens = run_mc(ht, x, horizon, fn, n_paths, seed, stream, workers)
    return ExpandedEstimate(est, cens.mean, heavy)


def inner_flow_exact(bundle, tau, Y=None):
    """y -> Q_{y,tau}[Y; tau < zeta] for constant or hitting tau and terminal Y."""
    eng = engine_for(bundle)
    if Y is None:
        f = np.ones(eng.n)
    elif isinstance(Y, TerminalValue):
        f = Y.f
    elif isinstance(Y, ConstantFunctional):
        f = np.full(eng.n, Y.c)
    else:
        raise ValueError("inner flow is exact only for terminal or constant Y")
    if isinstance(tau, Constant):
        return eng.transition(tau.t) @ f
    if isinstance(tau, (Hitting, Entrance)):
        return first_passage_exact(bundle, tau.B, f)
    raise ValueError("inner flow is exact only for constant or hitting tau")


@dataclass
class StrongMarkovReport:
    lhs: ExpandedEstimate
    rhs: ExpandedEstimate
    z: float
    exact: float | None
    inner: np.ndarray
    tol_z: float = 4.0
    max_censoring: float = 1e-3

    @property
    def passed(self):
        return (abs(self.z) <= self.tol_z and self.lhs.censored_fraction < self.max_censoring
                and self.rhs.censored_fraction < self.max_censoring)


def strong_markov_check(ht, x, sigma, tau, gamma=None, Y=None, n_paths=100_000, seed=0,
                        horizon=None, tol_z=4.0, workers=1) -> StrongMarkovReport:
    """Compare Q_{x,gamma}[Gamma (Y o theta_sigma)] with Q_{x,sigma}[Gamma Q_{X_sigma,tau}[Y]].

    ``gamma = (sigma + tau o theta_sigma)`` truncated at the lifetime.  The
    left side is simulated directly; the right side uses exact inner values.
    Independent streams (0 and 1) are used for the two sides.
    """
    Gam = gamma or ConstantFunctional(1.0)
    Yf = Y or ConstantFunctional(1.0)
    if isinstance(tau, int | float):
        tau = Constant(float(tau))
    inner = inner_flow_exact(ht.bundle, tau, Yf)
    composite = ShiftedSum(sigma, tau)
    if horizon is None:
        horizon = default_horizon(sigma) + default_horizon(tau)

    def lhs_fn(batch):
        s, _ = evaluate_batch(sigma, batch)
        g, cens = evaluate_batch(composite, batch)
        zero = np.zeros(len(batch))
        vals = Gam(batch, zero, s) * Yf(batch, s, g)
        return np.column_stack([flow_values(ht, batch, g, vals), cens.astype(float)])

    def rhs_fn(batch):
        s, cens = evaluate_batch(sigma, batch)
        Xs = batch.state_at(np.where(np.isfinite(s), s, np.inf))
        inner_at = np.where(Xs == DELTA, 0.0, inner[np.where(Xs == DELTA, 0, Xs)])
        vals = Gam(batch, np.zeros(len(batch)), s) * inner_at
        return np.column_stack([flow_values(ht, batch, s, vals), cens.astype(float)])

    l_est, l_c = run_mc(ht, x, horizon, lhs_fn, n_paths, seed, 0, workers)
    r_est, r_c = run_mc(ht, x, horizon, rhs_fn, n_paths, seed, 1, workers)
    heavy = not all(is_solvable(ht.bundle, B) for B in _hitting_sets(composite))
    lhs = ExpandedEstimate(l_est, l_c.mean, heavy)
    rhs = ExpandedEstimate(r_est, r_c.mean, heavy)

    exact = None
    if gamma is None:
        if isinstance(sigma, (Hitting, Entrance)):
            exact = float(first_passage_exact(ht.bundle, sigma.B, inner)[x])
        elif isinstance(sigma, Constant):
            exact = float(flow_vector(ht.bundle, CylinderFunctional([sigma.t], [inner]))[x]) \
                if sigma.t > 0 else float(inner[x])
    return StrongMarkovReport(lhs, rhs, z_score(lhs.estimate, rhs.estimate), exact, inner, tol_z)

