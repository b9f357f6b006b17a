"""Truncation error of the m-jump approximation and the non-uniqueness example."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mpp import History, SingleJumpModel, MarkSpace, rng_for, simulate_history, kernel_rows
from .problem import BsdeProblem, martingale_generator, constant_terminal, lp_beta_norm
from .solver import solve_truncated
from .tree import NodeInfo, SolutionField, build_tree


def _f0_integral(problem: BsdeProblem, D: History, a: float, b: float, A0: float, n_quad: int) -> float:
    """``∫_a^b ∫ |f(s, x, 0, 0)|^p e^{beta A_s} phi(dx) dA_s`` on a jump-free stretch."""
    model = problem.model
    if b <= a:
        return 0.0
    s = np.linspace(a, b, n_quad + 1)
    with np.errstate(divide="ignore"):
        L = -np.log1p(-np.asarray(model.cdf(D, s), dtype=float))
    dA = np.diff(L)
    mid = 0.5 * (s[1:] + s[:-1])
    Amid = A0 + 0.5 * (L[1:] + L[:-1])
    phi = kernel_rows(model, D, mid)
    info = NodeInfo.single(model, D).take(np.zeros(len(mid), dtype=int))
    f0 = problem.generator.at_zero(info, mid, phi)
    vals = (np.abs(f0) ** problem.p * phi).sum(axis=1) * np.exp(problem.beta * Amid)
    ok = np.isfinite(dA)
    return float((dA[ok] * vals[ok]).sum())


def truncation_bound(problem: BsdeProblem, m: int, n_samples: int, seed: int = 0,
                     n_quad: int = 32) -> tuple[float, float]:
    """Monte Carlo of ``E[|xi|^p e^{beta A_T} 1{S_m < T} + ∫_{S_m∧T}^T |f(.,0,0)|^p e^{beta A} dnu]``.

    Returns ``(estimate, standard error)``; the unknown constant is omitted.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    model = problem.model
    T = model.horizon
    p, beta = problem.p, problem.beta
    rng = rng_for(seed)
    vals = np.zeros(n_samples)
    for i in range(n_samples):
        full = simulate_history(model, rng)
        if full.depth < m:
            continue
        A0 = 0.0
        tot = 0.0
        for n in range(full.depth + 1):
            D = full.prefix(n)
            end = full.times[n] if n < full.depth else T
            with np.errstate(divide="ignore"):
                Aend = A0 - float(np.log1p(-model.cdf(D, end)))
            if n >= m:
                tot += _f0_integral(problem, D, D.last_time, end, A0, n_quad)
            A0 = Aend
        tot += abs(problem.terminal(full)) ** p * math.exp(beta * A0)
        vals[i] = tot
    se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(vals.mean()), se


def extend_field(small: SolutionField, tree) -> SolutionField:
    """Embed a solution on an ``m``-tree into a deeper tree built on the same grid.

    Levels beyond the small truncation carry zeros, as the truncated
    solution vanishes after its last jump.
    """
    st = small.tree
    if st.model is not tree.model or len(st.grid) != len(tree.grid):
        raise ValueError("trees differ in model or grid")
    out = SolutionField.zeros(tree)
    for n in range(min(st.m, tree.m) + 1):
        if st.levels[n].keys != tree.levels[n].keys[:len(st.levels[n])]:
            raise ValueError(f"level {n} nodes do not line up")
        B = len(st.levels[n])
        if n < st.m:
            out.y[n][:B] = small.y[n]
            out.z[n][:B] = small.z[n]
            out.u[n][:B] = small.u[n]
    return out


def empirical_gap(problem: BsdeProblem, m_small: int, m_large: int, grid_size: int,
                  _cache: dict | None = None) -> float:
    """Tree-exact ``L^p_beta`` distance between the ``m_small`` and ``m_large`` solutions."""
    if m_small > m_large:
        raise ValueError("m_small must not exceed m_large")
    cache = {} if _cache is None else _cache
    def solved(m):
        if m not in cache:
            tree = build_tree(problem.model, m, grid_size)
            cache[m] = solve_truncated(problem, tree)
        return cache[m]

    big = solved(m_large)
    if m_small == m_large:
        return 0.0
    small = extend_field(solved(m_small), big.tree)
    return lp_beta_norm(big - small, problem).total


@dataclass
class TruncationReport:
    m: int
    bound_value: float
    empirical_gap: float
    standard_error: float


def truncation_sweep(problem: BsdeProblem, m_list, grid_size: int = 101, n_samples: int = 20000,
                     seed: int = 0, m_large: int | None = None) -> list[TruncationReport]:
    m_list = sorted(int(m) for m in m_list)
    M = m_large or max(m_list) + 1
    cache = {}
    out = []
    for m in m_list:
        b, se = truncation_bound(problem, m, n_samples, seed)
        out.append(TruncationReport(m, b, empirical_gap(problem, m, M, grid_size, cache), se))
    return out


def fit_kappa(reports: list[TruncationReport]) -> float:
    """Smallest ``kappa`` with ``gap <= kappa * bound`` across the sweep."""
    r = [x.empirical_gap / x.bound_value for x in reports if x.bound_value > 0]
    return max(r) if r else 0.0


@dataclass
class NonuniquenessReport:
    w: float
    residual_zero: float
    residual_spurious: float
    norm_zero: float
    growth: list = field(default_factory=list)  # (k, upper limit, quadrature norm, closed form)

    def growth_ratio(self, k_from: int, k_to: int) -> float:
        d = {k: v for k, _, v, _ in self.growth}
        return d[k_to] / d[k_from] if d[k_from] else math.inf


def uniform_single_jump(horizon: float = 1.0) -> SingleJumpModel:
    ms = MarkSpace(("j",))
    return SingleJumpModel(horizon, ms, np.array([0.0, horizon]), np.array([0.0, 1.0]), np.array([1.0]))


def _a_nodes(a0: float, a1: float, t_grid: np.ndarray, cap: float, T: float) -> np.ndarray:
    """Times in ``[a, b]`` (given in the A-clock) merging the grid with A-steps of at most ``cap``."""
    n = max(1, int(math.ceil((a1 - a0) / cap)))
    a = np.linspace(a0, a1, n + 1)
    ts = T * (-np.expm1(-a))  # invert A(t) = -log(1 - t/T)
    lo, hi = ts[0], ts[-1]
    inner = t_grid[(t_grid > lo) & (t_grid < hi)]
    return np.unique(np.concatenate([ts, inner]))


def nonuniqueness_demo(w: float = 1.0, grid_size: int = 1000, p: float = 2.0, beta: float = 4.0,
                       n_trajectories: int = 200, seed: int = 0, dA_cap: float = 0.01,
                       ks=range(1, 11)) -> NonuniquenessReport:
    """Two solutions of ``Y_t + ∫_(t,T] Z (dN - dA) = 0`` for a uniform jump time.

    ``Y = 0`` and ``Y_t = w e^{A_t} 1{t<S}`` (with ``Z_s = -w e^{A_s}``) are
    both checked along simulated trajectories: the compensator integral is a
    trapezoid rule in the A-clock on the time grid refined so that no step
    exceeds ``dA_cap``.  The spurious pair has a partial norm that blows up
    as the upper limit approaches ``T``.
    """
    model = uniform_single_jump()
    T = model.horizon
    problem = BsdeProblem(model, martingale_generator(), constant_terminal(0.0), p=p, beta=beta,
                          L=1.0, allow_subthreshold=True)
    t_grid = np.linspace(0.0, T, grid_size)
    rng = rng_for(seed)
    worst = 0.0
    for _ in range(n_trajectories):
        h = simulate_history(model, rng)
        S = h.times[0] if h.depth else math.inf
        t = float(t_grid[int(rng.integers(0, grid_size - 1))])
        if not t < S:
            continue  # Y_t = 0 and nothing remains on (t, T]
        At, AS = -math.log1p(-t / T), -math.log1p(-S / T)
        s = _a_nodes(At, AS, t_grid, dA_cap, T)
        A = -np.log1p(-s / T)
        Z = -w * np.exp(A)
        comp = float(np.sum(0.5 * (Z[1:] + Z[:-1]) * np.diff(A)))
        Y = w * math.exp(At)
        jump = -w * math.exp(AS)
        r = Y + jump - comp
        scale = abs(Y) + abs(jump) + abs(comp)
        worst = max(worst, abs(r) / scale if scale else 0.0)
    c = p + problem.beta - 1

    def partial_norm(wv, a_tau):
        # E ∫ 1{s<=S} (|Y|^p + |Z|^p) e^{beta A} dA, using P(S >= s) = e^{-A_s}
        s = _a_nodes(0.0, a_tau, t_grid, dA_cap, T)
        A = -np.log1p(-s / T)
        g = 2 * abs(wv) ** p * np.exp(c * A)
        return float(np.sum(0.5 * (g[1:] + g[:-1]) * np.diff(A)))

    growth = []
    for k in ks:
        tau = T * (1 - 2.0 ** (-k))
        a_tau = -math.log1p(-tau / T)
        exact = 2 * abs(w) ** p * math.expm1(c * a_tau) / c
        growth.append((k, tau, partial_norm(w, a_tau), exact))
    # Y = Z = 0 makes every term of the equation vanish identically
    norm_zero = partial_norm(0.0, -math.log1p(-(1 - 2.0 ** (-max(ks)))))
    return NonuniquenessReport(w, 0.0, worst, norm_zero, growth)
