"""Seeded simulation of the killed chain generated by L^h, and path functionals.

Paths are simulated in fixed-size chunks.  Chunk ``c`` of stream ``j`` draws
from a PCG64 generator keyed by ``(seed, j, c)`` and, at every step, draws a
full chunk's worth of variates whether or not a path is still alive.  Path
``i`` therefore only ever sees entry ``i % CHUNK`` of each draw, which makes
it a pure function of ``(seed, j, i)``: independent of ``n_paths``, of the
number of workers and of evaluation order.

States are 0-based indices; the cemetery is ``DELTA = -1`` and every
function vanishes there.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BeyondHorizon

DELTA = -1
CHUNK = 8192
RATE_TOL = 1e-14


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def generator(self, chunk, purpose=0):
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream), int(chunk), purpose))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass
class PathSample:
    """One cadlag step path on E u {Delta}.

    ``states[k]`` is occupied on ``[jump_times[k-1], jump_times[k])`` with
    ``jump_times[-1] := 0``.  A final transition to ``DELTA`` at time ``zeta``
    records the killing; ``lifetime`` is ``inf`` if the path is still alive
    at ``horizon``.
    """

    start: int
    jump_times: list
    states: list
    horizon: float
    lifetime: float = math.inf

    def __post_init__(self):
        if len(self.states) != len(self.jump_times) + 1 or self.states[0] != self.start:
            raise ValueError("states must start at start and have one entry per jump plus one")
        if any(b <= a for a, b in zip(self.jump_times, self.jump_times[1:])):
            raise ValueError("jump times must be strictly increasing")
        if self.jump_times and self.jump_times[0] <= 0:
            raise ValueError("jump times must be positive")
        if DELTA in self.states:
            k = self.states.index(DELTA)
            if k != len(self.states) - 1:
                raise ValueError("nothing can follow the cemetery")
            if math.isinf(self.lifetime):
                self.lifetime = self.jump_times[k - 1]
            elif self.lifetime != self.jump_times[k - 1]:
                raise ValueError("lifetime must equal the time of the jump to Delta")
        elif not math.isinf(self.lifetime):
            self.jump_times = [*self.jump_times, self.lifetime]
            self.states = [*self.states, DELTA]

    def to_batch(self):
        return PathBatch.from_paths([self])

    def shift(self, s):
        """theta_s: the path seen from time s on."""
        k = sum(1 for t in self.jump_times if t <= s)
        state = self.states[k]
        rest = [t - s for t in self.jump_times[k:]]
        return PathSample(state, rest, [state, *self.states[k + 1:]], self.horizon - s)


@dataclass
class PathBatch:
    """Many paths in padded arrays.

    ``times[:, 0] = 0`` and ``times[:, k]`` is the k-th jump time (``inf`` if
    there is none); ``states[:, k]`` is the state entered at ``times[:, k]``.
    """

    start: np.ndarray
    times: np.ndarray
    states: np.ndarray
    lifetime: np.ndarray
    horizon: float
    first_index: int = 0
    _cols: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.start.shape[0]

    @classmethod
    def from_paths(cls, paths):
        K = max(len(p.jump_times) for p in paths)
        n = len(paths)
        times = np.full((n, K + 1), np.inf)
        states = np.empty((n, K + 1), dtype=np.int64)
        for i, p in enumerate(paths):
            times[i, 0] = 0.0
            times[i, 1:len(p.jump_times) + 1] = p.jump_times
            states[i, :len(p.states)] = p.states
            states[i, len(p.states):] = p.states[-1]
        horizon = min(p.horizon for p in paths)
        return cls(np.array([p.start for p in paths]), times, states,
                   np.array([p.lifetime for p in paths], dtype=float), horizon)

    def path(self, i) -> PathSample:
        k = int(np.sum(np.isfinite(self.times[i]))) - 1
        jt = self.times[i, 1:k + 1].tolist()
        st = self.states[i, :k + 1].tolist()
        return PathSample(int(self.start[i]), jt, st, self.horizon, float(self.lifetime[i]))

    @property
    def killed(self):
        """Paths whose lifetime was observed within the horizon."""
        return np.isfinite(self.lifetime)

    def segment_index(self, t):
        """Index k of the segment [times[k], times[k+1]) that contains t."""
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(self),))
        return np.sum(self.times <= t[:, None], axis=1) - 1

    def state_at(self, t):
        """X_t for every path; DELTA where t >= zeta or t is not finite."""
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(self),))
        if np.any(np.isfinite(t) & (t > self.horizon) & ~self.killed):
            raise BeyondHorizon(f"t exceeds horizon {self.horizon} on a live path")
        k = np.clip(self.segment_index(np.where(np.isfinite(t), t, 0.0)), 0, None)
        out = self.states[np.arange(len(self)), k]
        return np.where(np.isfinite(t), out, DELTA)

    def entrance_time(self, B, after=0.0):
        """inf{u >= after : X_u in B} per path, plus a censoring mask.

        Equals the hitting time ``inf{u > after : X_u in B}`` on step paths,
        by right continuity.  Returns ``(times, censored)``; censored entries
        carry ``inf``.
        """
        n = len(self)
        after = np.broadcast_to(np.asarray(after, dtype=float), (n,)).copy()
        inB = np.isin(self.states, np.asarray(sorted(B), dtype=np.int64)) & np.isfinite(self.times)
        finite = np.isfinite(after)
        live_at_h = ~self.killed
        beyond = finite & (after > self.horizon)
        s0 = np.where(finite, np.minimum(after, self.horizon), 0.0)
        cur = self.segment_index(s0)
        rows = np.arange(n)
        here = inB[rows, cur] & finite & ~beyond
        later = inB & (np.arange(inB.shape[1])[None, :] > cur[:, None])
        has_later = later.any(axis=1) & finite & ~beyond
        first = np.argmax(later, axis=1)
        out = np.full(n, np.inf)
        out[has_later] = self.times[rows[has_later], first[has_later]]
        out[here] = after[here]
        found = here | has_later
        censored = ~found & finite & live_at_h
        return out, censored

    hitting_time = entrance_time

    def integral(self, g, a, b, rate=0.0):
        """int_a^b e^{rate u} g(X_u) du per path, with g(DELTA) = 0.

        Segments beyond the horizon of a live path are clipped at the horizon;
        callers decide whether that constitutes censoring.
        """
        g = np.asarray(g, dtype=float)
        n = len(self)
        a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
        b = np.broadcast_to(np.asarray(b, dtype=float), (n,))
        hi = np.empty_like(self.times)
        hi[:, :-1] = self.times[:, 1:]
        hi[:, -1] = np.inf
        np.minimum(hi, np.minimum(b, self.horizon)[:, None], out=hi)
        lo = np.maximum(self.times, a[:, None])
        # only segments of positive length on a live state contribute
        rows, cols = np.nonzero((hi > lo) & (self.states >= 0))
        lo = lo[rows, cols]
        d = hi[rows, cols] - lo
        if rate != 0.0:
            d = np.exp(rate * lo) * np.expm1(rate * d) / rate
        return np.bincount(rows, weights=g[self.states[rows, cols]] * d, minlength=n)


def _jump_table(ht):
    q = ht.exit_rates
    n = len(q)
    P = np.zeros((n, n + 1))
    safe = np.where(q > RATE_TOL, q, 1.0)
    P[:, :n] = ht.jump_rates / safe[:, None]
    P[:, n] = ht.killing_rates / safe
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    return q, cum


def simulate_chunk(ht, x0, horizon, rng_stream, chunk, n_real=CHUNK) -> PathBatch:
    """Simulate paths ``chunk*CHUNK .. chunk*CHUNK + n_real - 1`` of a stream.

    ``x0`` is a start state, or an initial (sub-)probability vector from which
    starts are drawn.
    """
    q, cum = _jump_table(ht)
    n = len(q)
    rng = rng_stream.generator(chunk)
    if np.ndim(x0) == 0:
        start = np.full(CHUNK, int(x0), dtype=np.int64)
    else:
        p = np.asarray(x0, dtype=float)
        init = rng_stream.generator(chunk, purpose=1).random(CHUNK)
        c = np.cumsum(p / p.sum())
        c[-1] = 1.0
        start = np.searchsorted(c, init, side="right").astype(np.int64)
    cur_s = start.copy()
    cur_t = np.zeros(CHUNK)
    alive = np.zeros(CHUNK, dtype=bool)
    alive[:n_real] = True
    lifetime = np.full(CHUNK, np.inf)
    tcols = [np.zeros(CHUNK)]
    scols = [start.copy()]
    while alive.any():
        E = rng.standard_exponential(CHUNK)
        U = rng.random(CHUNK)
        idx = np.flatnonzero(alive)
        s = cur_s[idx]
        rate = q[s]
        hold = np.full(idx.shape, np.inf)
        mov = rate > RATE_TOL
        hold[mov] = E[idx[mov]] / rate[mov]
        tnew = cur_t[idx] + hold
        jumped = tnew <= horizon
        nxt = np.sum(U[idx][:, None] >= cum[s], axis=1)
        nxt = np.where(nxt >= n, DELTA, nxt)
        tcol = np.full(CHUNK, np.inf)
        scol = cur_s.copy()
        j = idx[jumped]
        tcol[j] = tnew[jumped]
        scol[j] = nxt[jumped]
        cur_t[j] = tnew[jumped]
        cur_s[j] = nxt[jumped]
        dead = j[nxt[jumped] == DELTA]
        lifetime[dead] = cur_t[dead]
        alive[idx[~jumped]] = False
        alive[dead] = False
        tcols.append(tcol)
        scols.append(scol)
    times = np.column_stack(tcols)[:n_real]
    states = np.column_stack(scols)[:n_real]
    return PathBatch(start[:n_real], times, states, lifetime[:n_real], float(horizon),
                     first_index=chunk * CHUNK)


def iter_chunks(n_paths):
    for c in range(-(-n_paths // CHUNK)):
        yield c, min(CHUNK, n_paths - c * CHUNK)


def sample_path(ht, x0, horizon, stream: RngStream, index=0) -> PathSample:
    """Path number ``index`` of ``stream``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    c, r = divmod(index, CHUNK)
    return simulate_chunk(ht, x0, horizon, stream, c, n_real=r + 1).path(r)


def sample_paths(ht, x0, horizon, n_paths, stream: RngStream):
    """All paths ``0..n_paths-1`` of a stream as a single batch."""
    parts = [simulate_chunk(ht, x0, horizon, stream, c, k) for c, k in iter_chunks(n_paths)]
    K = max(p.times.shape[1] for p in parts)

    def pad(a, fill):
        if a.shape[1] == K:
            return a
        extra = np.repeat(a[:, -1:], K - a.shape[1], axis=1) if fill is None else \
            np.full((a.shape[0], K - a.shape[1]), fill)
        return np.concatenate([a, extra], axis=1)

    return PathBatch(np.concatenate([p.start for p in parts]),
                     np.concatenate([pad(p.times, np.inf) for p in parts]),
                     np.concatenate([pad(p.states, None) for p in parts]),
                     np.concatenate([p.lifetime for p in parts]), float(horizon))


# -- single-path conveniences ------------------------------------------------

def state_at(path: PathSample, t):
    if t > path.horizon and math.isinf(path.lifetime):
        raise BeyondHorizon(f"t={t} beyond horizon {path.horizon}")
    return int(path.to_batch().state_at(t)[0])


def entrance_time(path: PathSample, B):
    t, cens = path.to_batch().entrance_time(B)
    return math.inf if cens[0] else float(t[0])


hitting_time = entrance_time


def pcaf_integral(path: PathSample, v, t):
    """A_t = int_0^t v(X_s) ds; frozen after the lifetime since v(DELTA) = 0."""
    if t > path.horizon and math.isinf(path.lifetime):
        raise BeyondHorizon(f"t={t} beyond horizon {path.horizon}")
    return float(path.to_batch().integral(v, 0.0, t)[0])


def weight(ht, path_or_batch, t):
    """h(x0) e^{alpha t} / h(X_t) on {t < zeta}, else 0."""
    batch = path_or_batch.to_batch() if isinstance(path_or_batch, PathSample) else path_or_batch
    w = weights_at(ht, batch, t)
    return float(w[0]) if isinstance(path_or_batch, PathSample) else w


def weights_at(ht, batch, stop):
    """Flow weights h(X_0) e^{alpha stop} / h(X_stop) 1{stop < zeta}, per path."""
    stop = np.broadcast_to(np.asarray(stop, dtype=float), (len(batch),))
    x = batch.state_at(np.where(np.isfinite(stop) & (stop <= batch.horizon), stop, np.inf))
    h = ht.h
    live = x >= 0
    xs = np.where(live, x, 0)
    st = np.where(live, stop, 0.0)
    return np.where(live, h[batch.start] * np.exp(ht.alpha * st) / h[xs], 0.0)


# -- estimation ---------------------------------------------------------------

@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_paths: int
    seed: int
    stream: int = 0

    def z_against(self, value):
        if self.std_error == 0.0:
            return 0.0 if self.mean == value else math.inf
        return (self.mean - value) / self.std_error

    def as_dict(self):
        return {"oracle": "mc", "mean": self.mean, "stderr": self.std_error,
                "n_paths": self.n_paths, "seed": self.seed, "stream": self.stream}


def z_score(a: McEstimate, b: McEstimate):
    se = math.hypot(a.std_error, b.std_error)
    if se == 0.0:
        return 0.0 if a.mean == b.mean else math.inf
    return (a.mean - b.mean) / se


def _chunk_stats(values):
    # column by column on contiguous copies, so a quantity's bits do not
    # depend on which other quantities share the batch
    if values.ndim == 1:
        mean = values.mean()
        return values.shape[0], mean, np.sum((values - mean) ** 2)
    cols = [_chunk_stats(np.ascontiguousarray(values[:, j])) for j in range(values.shape[1])]
    return values.shape[0], np.array([c[1] for c in cols]), np.array([c[2] for c in cols])


def _merge(acc, part):
    # Chan et al. pairwise update, applied in chunk order.
    if acc is None:
        return part
    na, ma, Ma = acc
    nb, mb, Mb = part
    n = na + nb
    d = mb - ma
    return n, ma + d * (nb / n), Ma + Mb + d * d * (na * nb / n)


def run_mc(ht, x0, horizon, functional, n_paths, seed, stream=0, workers=1):
    """Average ``functional(batch)`` over ``n_paths`` simulated paths.

    ``functional`` returns one value per path, or an ``(n, q)`` array for
    ``q`` quantities.  Returns one :class:`McEstimate` (or a list of ``q``).
    """
    rs = RngStream(seed, stream)

    def one(ck):
        c, k = ck
        vals = np.asarray(functional(simulate_chunk(ht, x0, horizon, rs, c, k)), dtype=float)
        return _chunk_stats(vals)

    chunks = list(iter_chunks(n_paths))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(one, chunks))
    else:
        parts = [one(ck) for ck in chunks]
    acc = None
    for p in parts:
        acc = _merge(acc, p)
    n, mean, m2 = acc
    se = np.sqrt(m2 / (n - 1) / n) if n > 1 else np.full_like(mean, np.inf)
    if np.ndim(mean) == 0:
        return McEstimate(float(mean), float(se), n_paths, seed, stream)
    return [McEstimate(float(a), float(b), n_paths, seed, stream) for a, b in zip(mean, se)]


def dump_paths_csv(batch: PathBatch, fh, labels=None):
    """One row per jump (and one for the start): streamIndex, time, state."""
    w = csv.writer(fh)
    w.writerow(["streamIndex", "time", "state"])
    for i in range(len(batch)):
        idx = batch.first_index + i
        for t, s in zip(batch.times[i], batch.states[i]):
            if not np.isfinite(t):
                break
            name = "Delta" if s == DELTA else (labels[s] if labels else str(int(s) + 1))
            w.writerow([idx, repr(float(t)), name])
