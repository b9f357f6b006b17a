"""Backward recursion for the truncated BSDE on a history tree, plus validators.

On a node at level ``n < m`` the equation between jumps reads, in the
compensator clock,

    dy/dA = -∫ f(s, x, y, yhat(x) - y) phi(dx),        y(T) = u,

where ``yhat`` holds the children's values at their jump time.  On each grid
cell the children values, ``phi`` and ``t`` are frozen at the right endpoint
and the step is an exponential-Euler update

    y_{k-1} = y_k + (1 - e^{-dA_k}) ∫ f(t_k, x, y_k, yhat_k - y_k) phi_k(dx),

which is the exact cell solution when ``f = zeta(x) + g`` with ``g`` frozen
and stays finite when ``dA = inf`` (the next jump is certain in the cell).
The same update is the fixed point of the discrete Picard map, so iterating
:func:`picard_map` converges to :func:`solve_truncated` up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mpp import History, Trajectory
from .problem import BsdeProblem, lp_beta_norm, lemma_threshold, c_epsilon
from .tree import HistoryTree, SolutionField, TreeError, grid_indices


class SolverError(RuntimeError):
    pass


def _check_tree(problem: BsdeProblem, tree: HistoryTree):
    if tree.model is not problem.model:
        raise ValueError("tree was built on a different model")
    if tree.collapsed and not problem.markov:
        raise ValueError("collapsed tree needs a Markov generator and terminal; rebuild with collapse=False")


def terminal_eval(problem: BsdeProblem, tree: HistoryTree) -> list[np.ndarray]:
    """``u^n`` per node: ``xi`` of the history for ``n < m`` and 0 at level ``m``."""
    _check_tree(problem, tree)
    out = []
    for n, lv in enumerate(tree.levels):
        if n == tree.m:
            out.append(np.zeros(len(lv)))
        else:
            out.append(np.array([problem.terminal(h) for h in lv.histories], dtype=float))
    return out


def _gather(ch: np.ndarray, ynext: np.ndarray, k, yk: np.ndarray) -> np.ndarray:
    """Children values at grid index ``k``; missing children give ``y_k`` (so ``zeta = 0``)."""
    ok = ch >= 0
    if ynext.shape[0] == 0:
        return np.repeat(yk[:, None], ch.shape[-1], axis=1)
    return np.where(ok, ynext[np.where(ok, ch, 0), k], yk[:, None])


def _children_values(tree: HistoryTree, ynext: np.ndarray, n: int, k: int, yk: np.ndarray) -> np.ndarray:
    """``yhat_k(x)`` for all nodes of level ``n``."""
    return _gather(tree.levels[n].children[:, k, :], ynext, k, yk)


def solve_truncated(problem: BsdeProblem, tree: HistoryTree) -> SolutionField:
    """Truncated solution ``(y^n, z^n)`` on every node, level ``m`` down to the root."""
    _check_tree(problem, tree)
    u = terminal_eval(problem, tree)
    sol = SolutionField.zeros(tree)
    sol.u = u
    grid = tree.grid
    f = problem.generator
    N = tree.N
    for n in range(tree.m - 1, -1, -1):
        lv = tree.levels[n]
        if not len(lv):
            continue
        info = lv.info(grid)
        q = lv.q
        ynext = sol.y[n + 1]
        y = sol.y[n]
        z = sol.z[n]
        y[:, N] = u[n]
        for k in range(N, 0, -1):
            active = lv.last_idx < k
            if not active.any():
                break
            yk = y[:, k]
            yhat = _children_values(tree, ynext, n, k, yk)
            zeta = yhat - yk[:, None]
            phi = lv.phi[:, k, :]
            fv = f(info, float(grid[k]), yk, zeta, phi)
            with np.errstate(invalid="ignore"):
                incr = q[:, k] * (fv * phi).sum(axis=1)
            step = yk + np.where(active, incr, 0.0)
            y[:, k - 1] = np.where(active, step, yk)
            z[:, k, :] = np.where(active[:, None], zeta, 0.0)
        bad = ~np.isfinite(y).all(axis=1)
        if bad.any():
            b = int(np.flatnonzero(bad)[0])
            raise SolverError(f"non-finite solution at level {n}, node {b} ({lv.histories[b]})")
    return sol


def picard_map(problem: BsdeProblem, tree: HistoryTree, candidate: SolutionField) -> SolutionField:
    """``Phi(U, V)``: generator frozen at the candidate, martingale part solved exactly.

    With ``g = f(U, V) - V`` frozen on each cell the node equation is linear
    and its cell solution is
    ``y_{k-1} = e^{-dA} y_k + (1 - e^{-dA}) ∫ (yhat_k + g_k) dphi_k``.
    """
    _check_tree(problem, tree)
    if candidate.tree is not tree:
        raise ValueError("candidate lives on a different tree")
    u = terminal_eval(problem, tree)
    out = SolutionField.zeros(tree)
    out.u = u
    grid = tree.grid
    f = problem.generator
    N = tree.N
    for n in range(tree.m - 1, -1, -1):
        lv = tree.levels[n]
        if not len(lv):
            continue
        info = lv.info(grid)
        q = lv.q
        y = out.y[n]
        y[:, N] = u[n]
        for k in range(N, 0, -1):
            active = lv.last_idx < k
            if not active.any():
                break
            yk = y[:, k]
            yhat = _children_values(tree, out.y[n + 1], n, k, yk)
            phi = lv.phi[:, k, :]
            U = candidate.y[n][:, k]
            V = candidate.z[n][:, k, :]
            g = f(info, float(grid[k]), U, V, phi) - V
            with np.errstate(invalid="ignore"):
                target = ((yhat + g) * phi).sum(axis=1)
                step = (1 - q[:, k]) * yk + q[:, k] * target
            y[:, k - 1] = np.where(active, step, yk)
            out.z[n][:, k, :] = np.where(active[:, None], yhat - yk[:, None], 0.0)
    return out


@dataclass
class PicardTrace:
    distances: list  # sup distance to the reference after each iteration
    norms: list  # equivalent-norm distance to the reference
    iterations: int
    converged: bool
    field: SolutionField = field(repr=False, default=None)


def picard_iterate(problem: BsdeProblem, tree: HistoryTree, reference: SolutionField | None = None,
                   max_iter: int = 30, tol: float = 1e-6, start: SolutionField | None = None) -> PicardTrace:
    """Iterates ``Phi`` from ``start`` (default ``(0, 0)``) and records the error decay."""
    from .problem import equivalent_norm

    ref = reference if reference is not None else solve_truncated(problem, tree)
    cur = start if start is not None else SolutionField.zeros(tree)
    contraction = problem.contraction()
    dists, norms = [], []
    it = 0
    for it in range(1, max_iter + 1):
        cur = picard_map(problem, tree, cur)
        d = cur.sup_distance(ref)
        dists.append(d)
        norms.append(equivalent_norm(cur - ref, problem, contraction))
        if d <= tol:
            break
    return PicardTrace(dists, norms, it, bool(dists and dists[-1] <= tol), cur)


def _node_path(tree: HistoryTree, history: History):
    """Levels, node ids and grid indices visited by an on-grid history (cut at ``m``)."""
    idx = grid_indices(tree.grid, history.times)
    depth = min(history.depth, tree.m)
    nodes = [tree.locate(history.prefix(n)) for n in range(depth + 1)]
    return nodes, idx[:depth]


@dataclass
class SolutionPath:
    times: np.ndarray
    y: np.ndarray  # right-continuous value at each grid time
    y_left: np.ndarray  # left limit at each grid time
    z: np.ndarray  # (N+1, K) predictable integrand on the cell ending at t_k
    levels: np.ndarray
    jumps: list  # (grid index, mark index)

    def jump_errors(self) -> list[float]:
        """``Delta Y - Z(S_n, X_n)`` at each jump, which is zero by construction."""
        return [float((self.y[k] - self.y_left[k]) - self.z[k, x]) for k, x in self.jumps]


def sample_solution(field: SolutionField, trajectory: Trajectory) -> SolutionPath:
    """Piecewise path ``Y_t = y^n(t)`` on ``[S_n, S_{n+1})`` at every grid time."""
    tree = field.tree
    ms = tree.model.markspace
    nodes, idx = _node_path(tree, trajectory.history)
    marks = [ms.index(x) for x in trajectory.history.marks[:len(idx)]]
    N, K = tree.N, tree.n_marks
    y = np.zeros(N + 1)
    yl = np.zeros(N + 1)
    z = np.zeros((N + 1, K))
    lev = np.zeros(N + 1, dtype=int)
    bounds = [0] + idx + [N + 1]
    for n, b in enumerate(nodes):
        lo, hi = bounds[n], bounds[n + 1]
        y[lo:hi] = field.y[n][b, lo:hi]
        yl[lo + 1:hi] = field.y[n][b, lo + 1:hi]
        lev[lo:hi] = n
        # predictable part: cells (lo, hi'] with hi' the next jump index (inclusive)
        top = min(hi, N)
        if n < tree.m:
            z[lo + 1:top + 1] = field.z[n][b, lo + 1:top + 1]
        if n + 1 < len(nodes):
            yl[hi] = field.y[n][b, hi]
    jumps = list(zip(idx, marks))
    return SolutionPath(tree.grid.copy(), y, yl, z, lev, jumps)


def _abs_pow(v, p):
    return np.abs(v) ** p


def _signed_pow(v, p):
    return p * np.abs(v) ** (p - 1) * np.sign(v)


def ito_residual(field: SolutionField, trajectory: Trajectory, problem: BsdeProblem, t: float = 0.0) -> float:
    """Relative gap between the two sides of the ``|Y|^p e^{beta A}`` Itô identity.

    Cell integrals use the trapezoid rule in the compensator clock with the
    children values, ``phi`` and ``t`` frozen at the right endpoint (as in the
    solver).  Returned as ``(lhs - rhs) / (sum of absolute terms)``.
    """
    tree = field.tree
    if tree.model is not problem.model:
        raise ValueError("field and problem are built on different models")
    grid = tree.grid
    it = grid_indices(grid, [t])[0] if t > 0 else 0
    nodes, idx = _node_path(tree, trajectory.history)
    p, beta = problem.p, problem.beta
    f = problem.generator
    bounds = [0] + idx + [tree.N]
    A0 = 0.0
    lhs_terms = []
    rhs_terms = []
    started = False
    for n, b in enumerate(nodes):
        lv = tree.levels[n]
        lo, hi = bounds[n], bounds[n + 1]
        A = lv.A[b]
        if n == tree.m:
            # truncated equation: nothing moves after the m-th jump, Y = xi^m = 0
            break
        if hi <= it:
            A0 += float(A[hi])
            continue
        start = max(lo, it)
        if not started:
            lhs_terms.append(_abs_pow(field.y[n][b, start], p) * math.exp(beta * (A0 + A[start])))
            started = True
        ks = np.arange(start + 1, hi + 1)
        if len(ks):
            yr = field.y[n][b, ks]
            yl = field.y[n][b, ks - 1]
            yhat = _gather(lv.children[b, ks, :], field.y[n + 1], ks[:, None], yr)
            phi = lv.phi[b, ks, :]
            info = lv.info(grid).take(np.full(len(ks), b))
            tk = grid[ks]
            Ar, Al = A0 + A[ks], A0 + A[ks - 1]
            dA = A[ks] - A[ks - 1]
            er, el = np.exp(beta * Ar), np.exp(beta * Al)
            fr = (f(info, tk, yr, yhat - yr[:, None], phi) * phi).sum(axis=1)
            fl = (f(info, tk, yl, yhat - yl[:, None], phi) * phi).sum(axis=1)
            gl = beta * _abs_pow(yl, p) * el
            gr = beta * _abs_pow(yr, p) * er
            lhs_terms.extend(0.5 * dA * (gl + gr))
            rhs_terms.extend(0.5 * dA * (_signed_pow(yl, p) * fl * el + _signed_pow(yr, p) * fr * er))
        if n + 1 < len(nodes):
            AS = A0 + float(A[hi])
            yS = field.y[n + 1][nodes[n + 1], hi]
            lhs_terms.append((_abs_pow(yS, p) - _abs_pow(field.y[n][b, hi], p)) * math.exp(beta * AS))
            A0 = AS
        else:
            rhs_terms.append(_abs_pow(field.u[n][b], p) * math.exp(beta * (A0 + A[tree.N])))
    lhs, rhs = float(np.sum(lhs_terms)), float(np.sum(rhs_terms))
    scale = float(np.sum(np.abs(lhs_terms)) + np.sum(np.abs(rhs_terms)))
    return 0.0 if scale == 0 else (lhs - rhs) / scale


@dataclass
class AprioriReport:
    lhs_p3: np.ndarray  # E|Y_t|^p e^{beta A_t} on the grid
    data_p3: np.ndarray  # E[|xi|^p e^{beta A_T} + ∫_t^T |f(.,0,0)|^p e^{beta A} dnu]
    lhs_p4: float
    data: float
    c1: float  # max_t lhs_p3 / data_p3 (nan for 0/0)
    c2: float
    beta: float
    lemma_threshold: float
    c_eps: float

    @property
    def degenerate(self) -> bool:
        return self.data == 0 and self.lhs_p4 == 0

    @property
    def passed(self) -> bool:
        if self.degenerate:
            return True
        return bool(np.isfinite(self.c1) and np.isfinite(self.c2) and self.beta > self.lemma_threshold)


def apriori_check(problem: BsdeProblem, tree: HistoryTree, field: SolutionField, eps: float | None = None) -> AprioriReport:
    """Tree-exact sides of both a priori bounds and the empirical constants."""
    eps = problem.eps if eps is None else eps
    p, beta = problem.p, problem.beta
    grid = tree.grid
    N = tree.N
    M = tree.occupation(beta)
    lhs3 = np.zeros(N + 1)
    term = 0.0
    f0_cells = np.zeros(N + 1)
    for n, lv in enumerate(tree.levels):
        if not len(lv):
            continue
        # P(no further jump by t_k | node); level m is absorbing
        own = np.arange(N + 1)[None, :] >= lv.last_idx[:, None]
        alive = np.where(own, 1.0 if n == tree.m else 1.0 - lv.F, 0.0)
        with np.errstate(over="ignore", invalid="ignore"):
            eA = np.where(alive > 0, np.exp(beta * lv.A), 0.0)
        lhs3 += (M[n][:, None] * alive * eA * np.abs(field.y[n]) ** p).sum(axis=0)
        if n == tree.m:
            continue
        s = lv.survive
        with np.errstate(over="ignore", invalid="ignore"):
            tT = np.where(s > 0, s * np.exp(beta * lv.A[:, N]), 0.0)
        term += float((M[n] * tT * np.abs(field.u[n]) ** p).sum())
        W = tree.cell_weights(n, beta) * M[n][:, None]
        info = lv.info(grid)
        for k in range(1, N + 1):
            phi = lv.phi[:, k, :]
            f0 = problem.generator.at_zero(info, float(grid[k]), phi)
            f0_cells[k] += float((W[:, k] * (np.abs(f0) ** p * phi).sum(axis=1)).sum())
    tail = np.concatenate([np.cumsum(f0_cells[::-1])[::-1][1:], [0.0]])
    data3 = term + tail
    data = term + float(f0_cells.sum())
    lhs4 = lp_beta_norm(field, problem).total
    with np.errstate(invalid="ignore", divide="ignore"):
        r3 = np.where(data3 > 0, lhs3 / np.where(data3 > 0, data3, 1.0), np.where(lhs3 > 0, np.inf, 0.0))
    c1 = float(r3.max()) if data > 0 or lhs4 > 0 else float("nan")
    c2 = lhs4 / data if data > 0 else (float("nan") if lhs4 == 0 else float("inf"))
    return AprioriReport(lhs3, data3, lhs4, data, c1, c2, beta, lemma_threshold(p, eps, problem.L, problem.Lprime),
                         c_epsilon(p, eps))
