"""Semigroup, resolvent and (co-)excessive functions of a finite model.

``T_t = exp(tL)`` is computed by uniformization: with ``c = max(0, -min L_xx)``
the matrix ``M = L + cI`` is entrywise nonnegative and

    exp(tL) = exp(-ct) * sum_k (t^k / k!) M^k,

a sum of nonnegative terms, so truncation never produces negative entries.
"""

from __future__ import annotations

import math
import threading
import weakref
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad_vec

from .errors import BetaTooSmall, HorizonOverflow
from .model import STRUCT_TOL, as_vector

TRUNCATION_TOL = 1e-13
SERIES_CAP = 500.0


def _log_tail_bound(r, ct, K):
    # exp(-ct) * sum_{k>K} r^k/k!  <=  exp(-ct) r^{K+1}/(K+1)! / (1 - r/(K+2))
    if K + 2 <= r:
        return math.inf
    return -ct + (K + 1) * math.log(r) - math.lgamma(K + 2) - math.log1p(-r / (K + 2))


def uniformized_expm(A, t, tol=TRUNCATION_TOL, cap=SERIES_CAP):
    """exp(tA) for a Metzler matrix ``A`` by a truncated Poisson series."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if t < 0:
        raise ValueError("t must be nonnegative")
    c = max(0.0, float(-np.min(np.diag(A))))
    M = A + c * np.eye(n)
    norm = float(np.max(np.sum(M, axis=1)))
    r = t * norm
    if r > cap:
        raise HorizonOverflow(f"t*||L+cI|| = {r:.4g} exceeds series cap {cap}")
    ct = c * t
    term = math.exp(-ct) * np.eye(n)
    out = term.copy()
    if r == 0.0:
        return out
    log_tol = math.log(tol)
    k = 0
    while _log_tail_bound(r, ct, k) >= log_tol:
        k += 1
        term = (term @ M) * (t / k)
        out += term
    return out


@dataclass(frozen=True)
class ExcessiveFunction:
    h: np.ndarray
    alpha: float
    slack: np.ndarray


@dataclass(frozen=True)
class CoexcessiveFunction:
    g: np.ndarray
    gamma: float
    slack: np.ndarray


@dataclass(frozen=True)
class ExcessivityReport:
    excessive: bool
    slack: np.ndarray
    grid_ok: bool
    grid_checked: tuple

    def __bool__(self):
        return self.excessive


class SemigroupEngine:
    """Dense T_t, G_beta and their m-adjoints for one model.

    Results are memoised by ``t`` / ``beta``; cached arrays are read-only and
    the same bits are returned no matter which thread computed them first.
    """

    def __init__(self, bundle, truncation_tol=TRUNCATION_TOL, series_cap=SERIES_CAP):
        self.bundle = bundle
        self.L = bundle.generator
        self.m = bundle.weights
        self.n = bundle.n
        self.truncation_tol = truncation_tol
        self.series_cap = series_cap
        self.uniformization_rate = max(0.0, float(-np.min(np.diag(self.L))))
        self.spectral_bound = bundle.L.spectral_bound
        self._lock = threading.Lock()
        self._T = {}
        self._G = {}

    @property
    def co_generator(self):
        """L-hat = D_m^{-1} L^T D_m, the adjoint of L in L^2(m)."""
        return (self.L.T * self.m) / self.m[:, None]

    def transition(self, t):
        t = float(t)
        with self._lock:
            hit = self._T.get(t)
        if hit is not None:
            return hit
        T = uniformized_expm(self.L, t, self.truncation_tol, self.series_cap)
        T.setflags(write=False)
        with self._lock:
            return self._T.setdefault(t, T)

    def co_transition(self, t):
        T = self.transition(t)
        return (T.T * self.m) / self.m[:, None]

    def resolvent(self, beta):
        beta = float(beta)
        if not beta > self.spectral_bound + STRUCT_TOL:
            raise BetaTooSmall(f"beta={beta} must exceed spectral bound {self.spectral_bound:.6g}")
        with self._lock:
            hit = self._G.get(beta)
        if hit is not None:
            return hit
        G = np.linalg.solve(beta * np.eye(self.n) - self.L, np.eye(self.n))
        G.setflags(write=False)
        with self._lock:
            return self._G.setdefault(beta, G)

    def co_resolvent(self, beta):
        G = self.resolvent(beta)
        return (G.T * self.m) / self.m[:, None]

    def laplace_residual(self, beta, f, upper=None):
        """max |G_beta f - int_0^upper e^{-beta t} T_t f dt| by adaptive quadrature."""
        f = as_vector(f, self.n, "f")
        upper = 40.0 / beta if upper is None else upper
        integral, _ = quad_vec(lambda t: math.exp(-beta * t) * (self.transition(t) @ f),
                               0.0, upper, epsabs=1e-13, epsrel=1e-12)
        return float(np.max(np.abs(self.resolvent(beta) @ f - integral)))

    def make_excessive(self, g, alpha) -> ExcessiveFunction:
        """h = G_alpha g for strictly positive g; then (alpha I - L) h = g."""
        g = as_vector(g, self.n, "g")
        if np.any(g <= 0):
            raise ValueError("g must be strictly positive")
        h = self.resolvent(alpha) @ g
        return ExcessiveFunction(h, float(alpha), (alpha * np.eye(self.n) - self.L) @ h)

    def is_excessive(self, h, alpha, tol=STRUCT_TOL, strict=True, grid=(0.1, 1.0, 10.0)):
        """Certify e^{-alpha t} T_t h <= h through (alpha I - L) h >= 0.

        The time grid is a redundant spot check; grid points whose series
        would overflow are skipped.
        """
        h = as_vector(h, self.n, "h")
        slack = alpha * h - self.L @ h
        positive = bool(np.all(h > 0)) if strict else bool(np.all(h >= -tol))
        ok = positive and bool(np.all(slack >= -tol))
        checked = []
        grid_ok = positive
        for t in grid:
            try:
                Th = self.transition(t) @ h
            except HorizonOverflow:
                continue
            checked.append(t)
            scale = max(1.0, float(np.max(np.abs(h))))
            grid_ok &= bool(np.all(math.exp(-alpha * t) * Th <= h + tol * scale))
        return ExcessivityReport(ok, slack, grid_ok, tuple(checked))

    def make_coexcessive(self, g0, gamma) -> CoexcessiveFunction:
        g0 = as_vector(g0, self.n, "g0")
        if np.any(g0 <= 0):
            raise ValueError("g0 must be strictly positive")
        g = self.co_resolvent(gamma) @ g0
        return CoexcessiveFunction(g, float(gamma), gamma * g - self.co_generator @ g)

    def is_coexcessive(self, g, gamma, tol=STRUCT_TOL):
        g = as_vector(g, self.n, "g")
        slack = gamma * g - self.co_generator @ g
        return bool(np.all(g >= -tol) and np.all(slack >= -tol))

    def h_excessive_equivalence(self, g, gamma, h: ExcessiveFunction, tol=STRUCT_TOL):
        """g is gamma-excessive for L  <=>  g/h is (gamma - alpha)-excessive for L^h.

        Returns ``(lhs, rhs)``; they must agree.
        """
        from .htransform import build_h_transform

        if gamma < h.alpha:
            raise ValueError("needs gamma >= alpha")
        g = as_vector(g, self.n, "g")
        lhs = self.is_excessive(g, gamma, tol, strict=False).excessive
        ht = build_h_transform(self, h)
        q = g / ht.h
        slack_h = (gamma - h.alpha) * q - ht.Lh @ q
        rhs = bool(np.all(q >= -tol) and np.all(slack_h >= -tol))
        return lhs, rhs


_engines = weakref.WeakKeyDictionary()
_engines_lock = threading.Lock()


def engine_for(bundle) -> SemigroupEngine:
    """Shared engine (and its memo) for a model bundle."""
    if isinstance(bundle, SemigroupEngine):
        return bundle
    with _engines_lock:
        eng = _engines.get(bundle)
        if eng is None:
            eng = _engines[bundle] = SemigroupEngine(bundle)
        return eng
