"""Finite-state coercive forms built from Metzler generators.

A model is a state space ``E = {1..n}``, a strictly positive reference
measure ``m`` and a generator ``L`` with nonnegative off-diagonal entries.
The bilinear form is

    E_beta(u, v) = ((beta I - L) u, v)_m = v^T D_m (beta I - L) u

where ``D_m = diag(m)``.  Every Metzler ``L`` yields a positivity preserving
form once shifted by ``alpha0``; growth (positive row sums) is allowed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidModel, NonMetzler, WitnessFound

STRUCT_TOL = 1e-10
EIG_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def as_vector(v, n=None, name="vector"):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-d, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise DimensionMismatch(f"{name} has length {v.shape[0]}, expected {n}")
    if not np.all(np.isfinite(v)):
        raise InvalidModel(f"{name} has non-finite entries")
    return v


def as_square(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidModel(f"{name} has non-finite entries")
    return a


def spectral_bound(a):
    """Largest real part of the eigenvalues of ``a``."""
    return float(np.max(np.linalg.eigvals(a).real))


@dataclass(frozen=True)
class StateSpace:
    n: int
    labels: tuple

    def __post_init__(self):
        if self.n < 1:
            raise InvalidModel("state space needs at least one state")
        if len(self.labels) != self.n or len(set(self.labels)) != self.n:
            raise InvalidModel("state labels must be n distinct identifiers")

    @classmethod
    def of_size(cls, n):
        return cls(n, tuple(str(i + 1) for i in range(n)))

    def index(self, label):
        """Position of a state given by label, or by 0-based int position."""
        if label in self.labels:
            return self.labels.index(label)
        if isinstance(label, (int, np.integer)) and 0 <= label < self.n:
            return int(label)
        raise KeyError(f"unknown state {label!r}")


@dataclass(frozen=True)
class ReferenceMeasure:
    m: np.ndarray

    def __post_init__(self):
        m = as_vector(self.m, name="m")
        if np.any(m <= 0):
            raise InvalidModel("reference measure must be strictly positive")
        object.__setattr__(self, "m", _frozen(m))


@dataclass(frozen=True)
class Generator:
    L: np.ndarray
    row_sums: np.ndarray
    spectral_bound: float


@dataclass(frozen=True)
class CoerciveForm:
    alpha0: float
    K: float
    sym_part: np.ndarray
    antisym_part: np.ndarray
    m: np.ndarray
    L: np.ndarray

    def energy(self, u, v, shift=None):
        """E_shift(u, v); ``shift`` defaults to ``alpha0 + 1``.

        Works row-wise when ``u`` and ``v`` are 2-d (one sample per row).
        """
        beta = self.alpha0 + 1.0 if shift is None else shift
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        Au = beta * u - u @ self.L.T
        return np.sum(Au * v * self.m, axis=-1)


def validate_generator(L, m) -> Generator:
    L = as_square(L, "L")
    m = as_vector(m, name="m")
    if m.shape[0] != L.shape[0]:
        raise DimensionMismatch(f"m has length {m.shape[0]} but L is {L.shape[0]}x{L.shape[0]}")
    if np.any(m <= 0):
        raise InvalidModel("reference measure must be strictly positive")
    off = L - np.diag(np.diag(L))
    bad = np.argwhere(off < 0)
    if bad.size:
        x, y = bad[0]
        raise NonMetzler(int(x) + 1, int(y) + 1, float(L[x, y]))
    return Generator(_frozen(L), _frozen(L.sum(axis=1)), spectral_bound(L))


def _sym(a):
    return 0.5 * (a + a.T)


def _min_sym_eig(t, Dm, SL):
    return float(np.linalg.eigvalsh(t * Dm - SL)[0])


def compute_alpha0(L, m, tol=EIG_TOL):
    """Smallest t >= 0 with sym(D_m (t I - L)) positive semidefinite.

    Found by bisection on the smallest symmetric eigenvalue, which is
    nondecreasing in t because D_m is positive definite.
    """
    Dm = np.diag(m)
    SL = _sym(Dm @ L)
    if _min_sym_eig(0.0, Dm, SL) >= -tol:
        return 0.0
    lo = 0.0
    hi = max(float(np.linalg.eigvalsh(SL)[-1]) / float(m.min()), 0.0) + 1.0
    while _min_sym_eig(hi, Dm, SL) < 0:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if _min_sym_eig(mid, Dm, SL) >= 0:
            hi = mid
        else:
            lo = mid
    return hi


def build_form(L, m) -> CoerciveForm:
    """Sector data of the form generated by ``L`` on ``L^2(m)``.

    ``K = 1 + ||S^{-1/2} A S^{-1/2}||_2`` with ``S``/``A`` the symmetric and
    antisymmetric parts of ``D_m((1 + alpha0) I - L)``.
    """
    L = np.asarray(L, dtype=float)
    m = np.asarray(m, dtype=float)
    alpha0 = compute_alpha0(L, m)
    B = np.diag(m) @ ((1.0 + alpha0) * np.eye(len(m)) - L)
    S = _sym(B)
    A = 0.5 * (B - B.T)
    w, V = np.linalg.eigh(S)
    S_inv_half = (V / np.sqrt(w)) @ V.T
    K = 1.0 + float(np.linalg.norm(S_inv_half @ A @ S_inv_half, 2))
    return CoerciveForm(alpha0, K, _frozen(S), _frozen(A), _frozen(m), _frozen(L))


@dataclass(frozen=True, eq=False)
class ModelBundle:
    space: StateSpace
    m: ReferenceMeasure
    L: Generator
    alpha: float
    form: CoerciveForm = field(repr=False)

    @property
    def n(self):
        return self.space.n

    @property
    def weights(self):
        return self.m.m

    @property
    def generator(self):
        return self.L.L

    def inner(self, u, v):
        """(u, v)_m"""
        return float(np.sum(np.asarray(u) * np.asarray(v) * self.m.m))


def make_bundle(L, m=None, alpha=1.0, labels=None) -> ModelBundle:
    """Validate ``L`` and ``m`` and assemble a model with shift ``alpha``."""
    L = as_square(L, "L")
    if m is None:
        m = np.ones(L.shape[0])
    gen = validate_generator(L, m)
    n = gen.L.shape[0]
    space = StateSpace(n, tuple(labels)) if labels is not None else StateSpace.of_size(n)
    form = build_form(gen.L, m)
    alpha = float(alpha)
    floor = max(gen.spectral_bound, form.alpha0)
    if not alpha > floor:
        raise InvalidModel(
            f"alpha={alpha} must exceed max(spectral bound, alpha0)={floor:.6g}"
        )
    return ModelBundle(space, ReferenceMeasure(m), gen, alpha, form)


@dataclass(frozen=True)
class PositivityReport:
    passed: bool
    samples: int
    worst_value: float
    worst_u: np.ndarray


def check_positivity_preserving_form(bundle, samples=10_000, seed=0, tol=STRUCT_TOL,
                                     raise_on_violation=True) -> PositivityReport:
    """Sample u ~ N(0, I) and check E_{alpha0+1}(u, u+) >= -tol."""
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((samples, bundle.n))
    vals = bundle.form.energy(U, np.maximum(U, 0.0))
    i = int(np.argmin(vals))
    rep = PositivityReport(bool(vals[i] >= -tol), samples, float(vals[i]), U[i].copy())
    if not rep.passed and raise_on_violation:
        raise WitnessFound(rep.worst_u, rep.worst_value)
    return rep


@dataclass(frozen=True)
class SubMarkovVerdict:
    sub_markov: bool
    witness: int | None = None
    row_sum: float | None = None


def check_semi_dirichlet(bundle, tol=STRUCT_TOL) -> SubMarkovVerdict:
    """Sub-Markov iff every generator row sum is <= tol.

    On violation the witness is the (0-based) state with the largest row sum.
    """
    rs = bundle.L.row_sums
    if np.all(rs <= tol):
        return SubMarkovVerdict(True)
    x = int(np.argmax(rs))
    return SubMarkovVerdict(False, x, float(rs[x]))
