"""Marked point processes with continuous compensators.

A model is given by the conditional law of the next jump time given the
history so far (a continuous cdf ``F_D`` on ``(D^max, inf]``) together with a
mark kernel.  The compensator of the counting measure is recovered from the
hazard identity ``A_t = A_{S_n} - log(1 - F_{D_n}(t))`` on ``(S_n, S_{n+1}]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

SENTINEL = "Δ"
DEFAULT_JUMP_CAP = 10**6


class ModelError(ValueError):
    """Invalid model description."""


class ExplosionError(RuntimeError):
    """Too many jumps before the horizon."""


@dataclass(frozen=True)
class MarkSpace:
    marks: tuple[str, ...]
    sentinel: str = SENTINEL

    def __post_init__(self):
        marks = tuple(str(m) for m in self.marks)
        object.__setattr__(self, "marks", marks)
        if not marks:
            raise ModelError("mark space is empty")
        if len(set(marks)) != len(marks):
            raise ModelError(f"duplicate mark identifiers in {marks}")
        if self.sentinel in marks:
            raise ModelError(f"sentinel {self.sentinel!r} is also a mark")
        object.__setattr__(self, "_index", {m: i for i, m in enumerate(marks)})

    def __len__(self):
        return len(self.marks)

    def index(self, mark: str) -> int:
        """Position of ``mark``; the sentinel maps to ``-1``."""
        if mark == self.sentinel:
            return -1
        try:
            return self._index[mark]
        except KeyError:
            raise KeyError(f"unknown mark {mark!r}") from None

    def name(self, idx: int) -> str:
        return self.sentinel if idx < 0 else self.marks[idx]


@dataclass(frozen=True)
class History:
    """Jump record ``D_n`` without the fixed origin entry ``(0, Δ)``.

    Only jumps at or before the horizon are stored: an entry with time beyond
    the horizon is ``(inf, Δ)`` and carries no information.
    """

    times: tuple[float, ...] = ()
    marks: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.times) != len(self.marks):
            raise ValueError("times and marks differ in length")
        prev = 0.0
        for t in self.times:
            if not t > prev:
                raise ValueError(f"jump times must be strictly increasing and positive: {self.times}")
            prev = t

    @property
    def depth(self) -> int:
        return len(self.times)

    @property
    def last_time(self) -> float:
        return self.times[-1] if self.times else 0.0

    def last_mark(self, sentinel: str = SENTINEL) -> str:
        return self.marks[-1] if self.marks else sentinel

    def entries(self, sentinel: str = SENTINEL) -> list[tuple[float, str]]:
        return [(0.0, sentinel)] + list(zip(self.times, self.marks))

    def prefix(self, n: int) -> "History":
        return History(self.times[:n], self.marks[:n])

    def extend(self, t: float, mark: str) -> "History":
        return History(self.times + (float(t),), self.marks + (mark,))

    def count(self, t: float) -> int:
        """``N_t``: number of jumps in ``[0, t]``."""
        return int(np.searchsorted(np.asarray(self.times), t, side="right"))

    def before(self, t: float) -> "History":
        """History strictly before ``t`` (the predictable one at ``t``)."""
        n = int(np.searchsorted(np.asarray(self.times), t, side="left"))
        return self.prefix(n)


@dataclass(frozen=True)
class Trajectory:
    history: History
    horizon: float
    seed: int

    def to_csv(self, path, markspace: MarkSpace | None = None):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "time", "mark"])
            sentinel = markspace.sentinel if markspace else SENTINEL
            w.writerow([0, repr(0.0), sentinel])
            for i, (t, x) in enumerate(zip(self.history.times, self.history.marks), start=1):
                w.writerow([i, repr(float(t)), x])


class HazardModel:
    """Base class.  Subclasses provide ``cdf`` and ``kernel``.

    ``cdf(history, t)`` is ``F_D(t)`` for the next jump after ``D = history``;
    it vanishes for ``t <= D^max`` and is continuous and nondecreasing.
    """

    horizon: float
    markspace: MarkSpace
    markov: bool = False
    # set when the kernel does not move between jumps (it may still depend on the history)
    static_kernel = False

    def cdf(self, history: History, t):
        raise NotImplementedError

    def kernel(self, history: History, t: float) -> np.ndarray:
        raise NotImplementedError

    def kernels(self, history: History, times) -> np.ndarray:
        """``kernel`` stacked over ``times``; shape ``(len(times), K)``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if self.static_kernel:
            row = np.asarray(self.kernel(history, float(times[0]) if len(times) else 0.0), dtype=float)
            return np.tile(row, (len(times), 1))
        return np.array([self.kernel(history, float(t)) for t in times], dtype=float).reshape(len(times), -1)

    def quantile(self, history: History, u: float) -> float:
        """Smallest ``t`` with ``F_D(t) = u``; requires ``u <= F_D(T)``."""
        lo, hi = history.last_time, self.horizon
        return optimize.brentq(lambda s: float(self.cdf(history, s)) - u, lo, hi, xtol=1e-14, rtol=4e-16)

    def survival_at_horizon(self, history: History) -> float:
        return 1.0 - float(self.cdf(history, self.horizon))

    def collapse_key(self, history: History):
        """Node identity used when building history trees."""
        if self.markov:
            return (history.depth, history.last_time, history.last_mark(self.markspace.sentinel))
        return (history.times, history.marks)

    @property
    def n_marks(self) -> int:
        return len(self.markspace)


def _check_probs(probs, k: int, what: str) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.shape != (k,):
        raise ModelError(f"{what}: expected {k} probabilities, got shape {p.shape}")
    if np.any(p < 0):
        raise ModelError(f"{what}: negative probability")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ModelError(f"{what}: probabilities sum to {p.sum()!r}, not 1")
    return p


@dataclass(frozen=True, eq=False)
class PoissonModel(HazardModel):
    """Constant intensity ``rate`` with i.i.d. marks."""

    horizon: float
    markspace: MarkSpace
    rate: float
    probs: np.ndarray
    markov: bool = True
    static_kernel = True

    def __post_init__(self):
        if self.rate < 0:
            raise ModelError(f"negative intensity {self.rate}")
        object.__setattr__(self, "probs", _check_probs(self.probs, len(self.markspace), "mark_probs"))

    def cdf(self, history, t):
        s = np.maximum(np.asarray(t, dtype=float) - history.last_time, 0.0)
        return -np.expm1(-self.rate * s)

    def quantile(self, history, u):
        return history.last_time - math.log1p(-u) / self.rate

    def kernel(self, history, t):
        return self.probs


@dataclass(frozen=True, eq=False)
class SingleJumpModel(HazardModel):
    """At most one jump, with law ``G`` given by a tabulated continuous cdf.

    ``cdf_values[-1]`` is ``G((0, T])``; the rest of the mass sits at ``inf``.
    """

    horizon: float
    markspace: MarkSpace
    cdf_times: np.ndarray
    cdf_values: np.ndarray
    probs: np.ndarray
    markov: bool = True
    static_kernel = True

    def __post_init__(self):
        ts = np.asarray(self.cdf_times, dtype=float)
        vs = np.asarray(self.cdf_values, dtype=float)
        if ts.ndim != 1 or ts.shape != vs.shape or len(ts) < 2:
            raise ModelError("single-jump cdf table needs matching time/value arrays of length >= 2")
        if ts[0] != 0.0 or abs(ts[-1] - self.horizon) > 1e-12:
            raise ModelError("single-jump cdf table must span [0, horizon]")
        if vs[0] != 0.0:
            raise ModelError("G has an atom at 0 (cdf(0) != 0)")
        if np.any(np.diff(ts) < 0):
            raise ModelError("cdf table times must be sorted")
        if np.any(np.diff(vs) < 0) or np.any(vs > 1.0 + 1e-15):
            raise ModelError("cdf table must be nondecreasing with values in [0, 1]")
        dup = np.diff(ts) == 0
        if np.any(dup & (np.diff(vs) != 0)):
            raise ModelError(f"G has an atom at t={ts[1:][dup & (np.diff(vs) != 0)][0]}")
        object.__setattr__(self, "cdf_times", ts)
        object.__setattr__(self, "cdf_values", np.minimum(vs, 1.0))
        object.__setattr__(self, "probs", _check_probs(self.probs, len(self.markspace), "mark_probs"))

    def cdf(self, history, t):
        t = np.asarray(t, dtype=float)
        if history.depth > 0:
            return np.zeros_like(t)
        return np.interp(t, self.cdf_times, self.cdf_values)

    def quantile(self, history, u):
        ts, vs = self.cdf_times, self.cdf_values
        i = int(np.searchsorted(vs, u, side="left"))
        i = min(max(i, 1), len(ts) - 1)
        if vs[i] == vs[i - 1]:
            return float(ts[i - 1])
        return float(ts[i - 1] + (u - vs[i - 1]) / (vs[i] - vs[i - 1]) * (ts[i] - ts[i - 1]))

    def kernel(self, history, t):
        return self.probs


@dataclass(frozen=True, eq=False)
class MarkovHazardModel(HazardModel):
    """Intensity ``rates[s, i]`` on grid cell ``i`` given last mark ``s``.

    Row ``K`` (the last one) is used before the first jump.  The cumulative
    hazard is piecewise linear, so ``-log(1 - F_D)`` is exact on the grid.
    """

    horizon: float
    markspace: MarkSpace
    grid: np.ndarray
    rates: np.ndarray
    transition: np.ndarray
    markov: bool = True
    static_kernel = True

    def __post_init__(self):
        k = len(self.markspace)
        g = np.asarray(self.grid, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        P = np.asarray(self.transition, dtype=float)
        if g.ndim != 1 or len(g) < 2 or g[0] != 0.0 or abs(g[-1] - self.horizon) > 1e-12 or np.any(np.diff(g) <= 0):
            raise ModelError("hazard grid must be strictly increasing from 0 to the horizon")
        if r.shape != (k + 1, len(g) - 1):
            raise ModelError(f"rates table must have shape {(k + 1, len(g) - 1)}, got {r.shape}")
        if np.any(r < 0):
            raise ModelError("negative intensities in hazard table")
        if P.shape != (k + 1, k):
            raise ModelError(f"transition matrix must have shape {(k + 1, k)}, got {P.shape}")
        for s in range(k + 1):
            _check_probs(P[s], k, f"transition row {s}")
        cum = np.zeros((k + 1, len(g)))
        cum[:, 1:] = np.cumsum(r * np.diff(g), axis=1)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "_cum", cum)

    def _state(self, history):
        return self.markspace.index(history.last_mark(self.markspace.sentinel))

    def _Lambda(self, s, t):
        return np.interp(t, self.grid, self._cum[s])

    def cdf(self, history, t):
        s = self._state(history)
        t0 = history.last_time
        t = np.asarray(t, dtype=float)
        tt = np.clip(np.maximum(t, t0), 0.0, self.horizon)
        return -np.expm1(-(self._Lambda(s, tt) - self._Lambda(s, t0)))

    def quantile(self, history, u):
        s = self._state(history)
        target = self._Lambda(s, history.last_time) - math.log1p(-u)
        cum = self._cum[s]
        i = int(np.searchsorted(cum, target, side="left"))
        i = min(max(i, 1), len(cum) - 1)
        lo, hi = cum[i - 1], cum[i]
        if hi == lo:
            return float(self.grid[i])
        return float(self.grid[i - 1] + (target - lo) / (hi - lo) * (self.grid[i] - self.grid[i - 1]))

    def kernel(self, history, t):
        return self.transition[self._state(history)]


def build_model(spec: dict, markov: bool | None = None) -> HazardModel:
    """Model from a JSON-style description (see README for the keys)."""
    try:
        kind = spec["kind"]
        T = float(spec["horizon"])
        marks = spec["marks"]
    except KeyError as e:
        raise ModelError(f"model spec missing key {e.args[0]!r}") from None
    if not T > 0:
        raise ModelError("horizon must be positive")
    ms = MarkSpace(tuple(marks), spec.get("sentinel", SENTINEL))
    k = len(ms)
    probs = spec.get("mark_probs", [1.0 / k] * k)
    extra = {} if markov is None else {"markov": markov}

    if kind == "poisson":
        return PoissonModel(T, ms, float(spec["rate"]), probs, **extra)

    if kind == "single_jump":
        atoms = spec.get("atoms", {})
        bad = {t: w for t, w in atoms.items() if float(w) > 0}
        if bad:
            raise ModelError(f"G has atoms {bad}; jump times must be totally inaccessible")
        if "uniform" in spec:
            u = spec["uniform"]
            v = float(u.get("upper", T))
            mass = float(u.get("mass", 1.0))
            if not 0 < v <= T or not 0 <= mass <= 1:
                raise ModelError("uniform law needs 0 < upper <= horizon and mass in [0, 1]")
            times = [0.0, v] if v == T else [0.0, v, T]
            values = [0.0, mass] if v == T else [0.0, mass, mass]
        else:
            tab = spec["cdf"]
            times, values = tab["times"], tab["values"]
        return SingleJumpModel(T, ms, np.asarray(times), np.asarray(values), probs, **extra)

    if kind == "markov_hazard":
        names = list(ms.marks) + [ms.sentinel]
        rates = spec["rates"]
        trans = spec["transition"]
        missing = [n for n in names if n not in rates or n not in trans]
        if missing:
            raise ModelError(f"markov_hazard tables missing rows for {missing}")
        grid = np.asarray(spec["grid"], dtype=float)
        R = np.array([np.broadcast_to(np.asarray(rates[n], dtype=float), (len(grid) - 1,)) for n in names])
        P = np.array([trans[n] for n in names], dtype=float)
        return MarkovHazardModel(T, ms, grid, R, P, **extra)

    raise ModelError(f"unknown model kind {kind!r}")


def cumulative_A(model: HazardModel, history: History, t: float) -> float:
    """Compensator ``A_t`` of ``N`` along ``history``; ``inf`` once ``F_D = 1``."""
    if t < 0 or t > model.horizon + 1e-12:
        raise ValueError(f"t={t} outside [0, {model.horizon}]")
    A = 0.0
    for n in range(history.depth + 1):
        D = history.prefix(n)
        nxt = history.times[n] if n < history.depth else math.inf
        stop = t <= nxt
        F = float(model.cdf(D, t if stop else nxt))
        if F >= 1.0:
            return math.inf
        A -= math.log1p(-F)
        if stop:
            return A
    return A


def compensator_at(model: HazardModel, history: History, times) -> np.ndarray:
    """Vectorised ``A_t`` on sorted ``times`` along a fixed history."""
    times = np.asarray(times, dtype=float)
    out = np.empty_like(times)
    A0 = 0.0
    lo = 0
    for n in range(history.depth + 1):
        D = history.prefix(n)
        nxt = history.times[n] if n < history.depth else math.inf
        hi = int(np.searchsorted(times, nxt, side="right"))
        with np.errstate(divide="ignore"):
            out[lo:hi] = A0 - np.log1p(-model.cdf(D, times[lo:hi]))
            if n < history.depth:
                A0 -= float(np.log1p(-model.cdf(D, nxt)))
        lo = hi
    return out


def conditional_kernel(model: HazardModel, history: History, t: float) -> np.ndarray:
    if not t > history.last_time:
        raise ValueError(f"kernel needs t > D^max = {history.last_time}, got {t}")
    return np.asarray(model.kernel(history, t), dtype=float)


def kernel_rows(model: HazardModel, history: History, times) -> np.ndarray:
    """Kernel ``φ_{D,t}`` stacked over ``times``; shape ``(len(times), K)``."""
    return model.kernels(history, times)


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based stream for one seed; independent across seeds."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _draw_mark(probs: np.ndarray, u: float) -> int:
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(probs) - 1))


def simulate_history(model: HazardModel, rng: np.random.Generator, cap: int = DEFAULT_JUMP_CAP) -> History:
    T = model.horizon
    ms = model.markspace
    h = History()
    times, marks = [], []
    while True:
        FT = float(model.cdf(h, T))
        u = rng.random()
        if u >= FT:
            break
        s = model.quantile(h, u)
        if not s > h.last_time:
            # numerical floor of the inverse; the jump is a.s. strictly later
            s = math.nextafter(h.last_time, math.inf)
        x = ms.marks[_draw_mark(np.asarray(model.kernel(h, s)), rng.random())]
        times.append(s)
        marks.append(x)
        if len(times) > cap:
            raise ExplosionError(f"more than {cap} jumps before the horizon")
        h = History(tuple(times), tuple(marks))
    return h


def simulate_trajectory(model: HazardModel, seed: int, cap: int = DEFAULT_JUMP_CAP) -> Trajectory:
    return Trajectory(simulate_history(model, rng_for(seed), cap), model.horizon, int(seed))


@dataclass
class A2Level:
    n: int
    verdict: str  # "pass" | "fail" | "boundary"
    min_survival: float
    witness: tuple | None = None


@dataclass
class A2Report:
    levels: list[A2Level]
    exact: bool

    @property
    def passed(self) -> bool:
        return all(lv.verdict == "pass" for lv in self.levels)

    @property
    def boundary(self) -> bool:
        return any(lv.verdict == "boundary" for lv in self.levels)

    @property
    def failed(self) -> bool:
        return any(lv.verdict == "fail" for lv in self.levels)


def _representative(n: int, t: float, mark: str, T: float) -> History | None:
    """Some history of depth ``n`` whose last entry is ``(t, mark)``."""
    if n == 0:
        return History()
    if t <= 0:
        return None
    earlier = tuple(t * (i + 1) / n for i in range(n - 1))
    return History(earlier + (t,), (mark,) * n)


def _a2_verdict(model: HazardModel, h: History) -> tuple[str, float]:
    T = model.horizon
    surv = model.survival_at_horizon(h)
    if surv > 0:
        return "pass", surv
    # F_D(T) = 1: degenerate only at the endpoint, or reached strictly before T
    eps = 1e-9 * T
    if T - eps > h.last_time and float(model.cdf(h, T - eps)) < 1.0:
        return "boundary", surv
    return "fail", surv


def check_a2(model: HazardModel, m: int, grid_points: int = 101, n_samples: int = 1000, seed: int = 0) -> A2Report:
    """Positivity of ``P(S_{n+1} > T | F_{S_n})`` for ``n < m``.

    Markov models are checked over a grid of last entries; other models on
    histories sampled with a fixed seed.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    T = model.horizon
    ms = model.markspace
    order = {"pass": 0, "boundary": 1, "fail": 2}
    levels = []
    if model.markov:
        ts = np.linspace(0.0, T, grid_points)[1:]
        for n in range(m):
            cands = [History()] if n == 0 else [
                _representative(n, float(t), x, T) for t in ts[n - 1:] for x in ms.marks
            ]
            worst = ("pass", math.inf, None)
            for h in cands:
                v, s = _a2_verdict(model, h)
                if order[v] > order[worst[0]] or (v == worst[0] and s < worst[1]):
                    worst = (v, s, tuple(h.entries(ms.sentinel)))
            levels.append(A2Level(n, worst[0], worst[1], worst[2]))
        return A2Report(levels, exact=True)
    rng = rng_for(seed)
    samples = [simulate_history(model, rng) for _ in range(n_samples)]
    for n in range(m):
        worst = ("pass", math.inf, None)
        for full in samples:
            if full.depth < n:
                continue
            h = full.prefix(n)
            v, s = _a2_verdict(model, h)
            if order[v] > order[worst[0]] or (v == worst[0] and s < worst[1]):
                worst = (v, s, tuple(h.entries(ms.sentinel)))
        levels.append(A2Level(n, worst[0], worst[1], worst[2]))
    return A2Report(levels, exact=False)


def integrate_dA(model: HazardModel, history: History, a: float, b: float, h: Callable, n: int = 64):
    """``∫_a^b h(s) dA_s`` on an interval with no jumps of ``history``.

    Midpoint rule in the compensator clock: ``h`` at interval midpoints
    times exact increments of ``A``.  ``h`` takes an array of times and may
    return any trailing shape.
    """
    if b <= a:
        return 0.0 * np.asarray(h(np.array([a])))[0]
    s = np.linspace(a, b, n + 1)
    with np.errstate(divide="ignore"):
        Ls = -np.log1p(-model.cdf(history, s))
    dA = np.diff(Ls)
    mid = 0.5 * (s[1:] + s[:-1])
    vals = np.asarray(h(mid))
    return np.tensordot(dA, vals, axes=(0, 0))


@dataclass
class DualityStats:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    diff_se: float

    @property
    def z(self) -> float:
        d = self.lhs - self.rhs
        if self.diff_se == 0:
            return 0.0 if abs(d) < 1e-12 else math.inf
        return d / self.diff_se

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 4.0


def mu_nu_duality_check(model: HazardModel, H: Callable, n_samples: int, seed: int = 0, n_quad: int = 64) -> DualityStats:
    """Monte Carlo of both sides of ``E ∫H dμ = E ∫∫H φ dA``.

    ``H(t, x, history)`` is vectorised: ``t`` has shape ``(n, 1)``, ``x`` is
    the array of mark indices with shape ``(1, K)``; ``history`` is the
    (predictable) history before ``t``.
    """
    T = model.horizon
    K = model.n_marks
    xs = np.arange(K)[None, :]
    lhs = np.empty(n_samples)
    rhs = np.empty(n_samples)
    for i in range(n_samples):
        full = simulate_history(model, rng_for(seed + i))
        L = 0.0
        R = 0.0
        for n in range(full.depth + 1):
            D = full.prefix(n)
            end = full.times[n] if n < full.depth else T
            if n < full.depth:
                x = model.markspace.index(full.marks[n])
                L += float(np.asarray(H(np.array([[end]]), np.array([[x]]), D)).reshape(-1)[0])
            def integrand(s, D=D):
                return (np.asarray(H(s[:, None], xs, D)) * kernel_rows(model, D, s)).sum(axis=1)

            R += float(integrate_dA(model, D, D.last_time, end, integrand, n_quad))
        lhs[i] = L
        rhs[i] = R
    d = lhs - rhs
    se = lambda v: float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return DualityStats(float(lhs.mean()), float(rhs.mean()), se(lhs), se(rhs), se(d))


def ks_uniformity(model: HazardModel, n_samples: int, seed: int = 0):
    """KS test that ``F_{D_n}(S_{n+1}) / F_{D_n}(T)`` is uniform given a jump."""
    u = []
    for i in range(n_samples):
        full = simulate_history(model, rng_for(seed + i))
        for n in range(full.depth):
            D = full.prefix(n)
            u.append(float(model.cdf(D, full.times[n])) / float(model.cdf(D, model.horizon)))
    return stats.kstest(np.asarray(u), "uniform")
