"""Doob-type h-transforms of a finite positivity preserving semigroup.

For a strictly positive alpha-excessive ``h`` the conjugated generator

    L^h = H^{-1} (L - alpha I) H,      H = diag(h),

is Metzler with nonpositive row sums, i.e. it generates a killed Markov
chain.  Its killing rate at ``x`` is ``((alpha I - L) h)_x / h_x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotExcessive, NotStrictlyPositive
from .model import STRUCT_TOL, Generator, as_vector, spectral_bound
from .semigroup import ExcessiveFunction, engine_for, uniformized_expm

H_FLOOR = 1e-30


@dataclass(frozen=True, eq=False)
class HTransform:
    bundle: object
    excessive: ExcessiveFunction
    Lh: np.ndarray
    killing_rates: np.ndarray

    @property
    def h(self):
        return self.excessive.h

    @property
    def alpha(self):
        return self.excessive.alpha

    @property
    def jump_rates(self):
        """Off-diagonal part of L^h."""
        return self.Lh - np.diag(np.diag(self.Lh))

    @property
    def exit_rates(self):
        return -np.diag(self.Lh)

    def semigroup(self, t):
        """exp(t L^h), the sub-Markov transition matrix of the killed chain."""
        return uniformized_expm(self.Lh, t)


def build_h_transform(bundle, h, tol=STRUCT_TOL) -> HTransform:
    """Conjugate the model's generator by ``h``.

    ``h`` may be an :class:`ExcessiveFunction` or a raw vector; raw vectors are
    checked for strict positivity and alpha-excessivity at the model's alpha.
    """
    eng = engine_for(bundle)
    if isinstance(h, ExcessiveFunction):
        vec, alpha = np.asarray(h.h, dtype=float), h.alpha
    else:
        vec, alpha = as_vector(h, eng.n, "h"), eng.bundle.alpha
    if np.any(vec < H_FLOOR):
        raise NotStrictlyPositive(f"h has entries below {H_FLOOR}: {vec}")
    slack = alpha * vec - eng.L @ vec
    if np.any(slack < -tol * max(1.0, float(np.max(vec)))):
        raise NotExcessive(f"(alpha I - L) h has negative entries: {slack}")
    exc = ExcessiveFunction(vec, float(alpha), slack)
    Lh = (eng.L - alpha * np.eye(eng.n)) * vec[None, :] / vec[:, None]
    Lh.setflags(write=False)
    kill = -Lh.sum(axis=1)
    kill = np.where(np.abs(kill) <= tol, 0.0, kill)
    if np.any(kill < 0):
        raise NotExcessive(f"negative killing rates {kill}")
    return HTransform(eng.bundle, exc, Lh, kill)


def h_from_recipe(bundle, recipe):
    """Build an :class:`HTransform` from a scenario recipe.

    ``{"direct": [...]}`` takes the vector as given; ``{"resolvent": g}``
    uses ``h = G_alpha g``.
    """
    eng = engine_for(bundle)
    if "direct" in recipe:
        return build_h_transform(bundle, recipe["direct"])
    if "resolvent" in recipe:
        g = recipe["resolvent"]
        if np.isscalar(g):
            g = np.full(eng.n, float(g))
        return build_h_transform(bundle, eng.make_excessive(g, eng.bundle.alpha))
    raise ValueError(f"h recipe needs 'direct' or 'resolvent': {recipe}")


def q_kernel(ht: HTransform, t):
    """Q_t = H e^{alpha t} exp(t L^h) H^{-1}.

    Agreement with ``transition(t)`` is the proper-association certificate.
    """
    h = ht.h
    return math.exp(ht.alpha * t) * h[:, None] * ht.semigroup(t) / h[None, :]


def association_residual(ht: HTransform, times=(0.1, 0.5, 1.0, 2.0, 5.0)):
    """max_t ||Q_t - T_t||_inf over ``times``."""
    eng = engine_for(ht.bundle)
    return max(float(np.max(np.abs(q_kernel(ht, t) - eng.transition(t)))) for t in times)


def inverse_transform(ht: HTransform) -> Generator:
    """Recover L = H L^h H^{-1} + alpha I."""
    h = ht.h
    L = ht.Lh * h[:, None] / h[None, :] + ht.alpha * np.eye(len(h))
    return Generator(L, L.sum(axis=1), spectral_bound(L))
