"""Finite history trees: jump times restricted to a uniform time grid.

The mass of ``F_D`` over each grid cell ``(t_{k-1}, t_k]`` is assigned to
the right endpoint ``t_k``; marks are drawn from the kernel at the cell
midpoint.  For Markov models a node is identified by ``(level, last grid
index, last mark)``, otherwise by its full discrete history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mpp import HazardModel, History, Trajectory, check_a2, rng_for

DEFAULT_NODE_BUDGET = 10**7


class TreeError(ValueError):
    pass


@dataclass
class NodeInfo:
    """What a generator may look at for a batch of nodes of one level."""

    level: int
    last_idx: np.ndarray
    last_mark: np.ndarray  # -1 before the first jump
    grid: np.ndarray
    histories: list

    @property
    def last_time(self) -> np.ndarray:
        return self.grid[self.last_idx]

    def take(self, idx) -> "NodeInfo":
        idx = np.asarray(idx)
        return NodeInfo(self.level, self.last_idx[idx], self.last_mark[idx], self.grid,
                        [self.histories[i] for i in idx])

    @classmethod
    def single(cls, model: HazardModel, history: History) -> "NodeInfo":
        """Info for one arbitrary (off-grid) history."""
        g = np.array([history.last_time])
        x = model.markspace.index(history.last_mark(model.markspace.sentinel))
        return cls(history.depth, np.array([0]), np.array([x]), g, [history])


@dataclass
class Level:
    n: int
    keys: list
    last_idx: np.ndarray
    last_mark: np.ndarray
    histories: list
    # per node rows over grid indices 0..N; meaningful for k > last_idx
    F: np.ndarray | None = None
    phi: np.ndarray | None = None
    children: np.ndarray | None = None

    def __len__(self):
        return len(self.keys)

    @property
    def A(self) -> np.ndarray:
        """Compensator increase since the node's jump, ``-log(1 - F)``."""
        with np.errstate(divide="ignore"):
            return -np.log1p(-self.F)

    @property
    def weights(self) -> np.ndarray:
        """Cell masses ``F(t_k) - F(t_{k-1})`` (zero for ``k <= D^max``)."""
        w = np.zeros_like(self.F)
        w[:, 1:] = np.diff(self.F, axis=1)
        w[self.mask == 0] = 0.0
        return w

    @property
    def survive(self) -> np.ndarray:
        return 1.0 - self.F[:, -1]

    @property
    def mask(self) -> np.ndarray:
        """1 on cells ``k > D^max`` belonging to the node, else 0."""
        N1 = self.F.shape[1]
        return (np.arange(N1)[None, :] > self.last_idx[:, None]).astype(float)

    @property
    def q(self) -> np.ndarray:
        """Conditional jump probability of cell ``k`` given survival to ``t_{k-1}``."""
        w = self.weights
        s = np.ones_like(self.F)
        s[:, 1:] = 1.0 - self.F[:, :-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.where(s > 0, w / np.where(s > 0, s, 1.0), 1.0)
        return np.clip(q, 0.0, 1.0) * self.mask

    def info(self, grid) -> NodeInfo:
        return NodeInfo(self.n, self.last_idx, self.last_mark, grid, self.histories)


@dataclass
class HistoryTree:
    model: HazardModel
    m: int
    grid: np.ndarray
    levels: list[Level]
    collapsed: bool
    boundary: bool = False
    _index: list = field(default_factory=list, repr=False)

    @property
    def N(self) -> int:
        return len(self.grid) - 1

    @property
    def n_marks(self) -> int:
        return self.model.n_marks

    def node_count(self) -> int:
        return sum(len(lv) for lv in self.levels)

    def key_of(self, history: History):
        """Tree key of an on-grid history; raises if a time is off-grid."""
        idx = grid_indices(self.grid, history.times)
        ms = self.model.markspace
        marks = tuple(ms.index(x) for x in history.marks)
        if self.collapsed:
            return (idx[-1], marks[-1]) if idx else (0, -1)
        return tuple(zip(idx, marks))

    def locate(self, history: History) -> int:
        n = history.depth
        if n > self.m:
            raise TreeError(f"history of depth {n} beyond truncation level {self.m}")
        try:
            return self._index[n][self.key_of(history)]
        except KeyError:
            raise TreeError(f"history {history} is not a node of the tree") from None

    def occupation(self, beta: float) -> list[np.ndarray]:
        """``E[e^{beta A_{S_n}}; D_n = node]`` for every node."""
        out = [np.ones(1)]
        for n in range(self.m):
            lv = self.levels[n]
            nxt = np.zeros(len(self.levels[n + 1]))
            M = out[n]
            w = lv.weights
            with np.errstate(over="ignore", invalid="ignore"):
                e = np.exp(beta * lv.A) if beta else np.ones_like(lv.F)
            mass = (M[:, None] * w * np.where(w > 0, e, 0.0))[:, :, None] * lv.phi
            ch = lv.children
            ok = ch >= 0
            np.add.at(nxt, ch[ok], mass[ok])
            out.append(nxt)
        return out

    def cell_weights(self, n: int, beta: float) -> np.ndarray:
        """``E[∫_cell e^{beta(A_s - A_{S_n})} dA_s; alive at t_{k-1} | node]``.

        Exact for integrands constant on the cell.  Level ``m`` is absorbing:
        past the ``m``-th jump the clock runs on that node's law up to ``T``.
        """
        lv = self.levels[n]
        A = lv.A
        s = np.ones_like(A)
        if n < self.m:
            s[:, 1:] = 1.0 - lv.F[:, :-1]
        Aprev = np.zeros_like(A)
        Aprev[:, 1:] = A[:, :-1]
        with np.errstate(over="ignore", invalid="ignore"):
            if beta == 0:
                c = A - Aprev
            else:
                c = (np.exp(beta * A) - np.exp(beta * Aprev)) / beta
            W = np.where(s > 0, s * c, 0.0)
        return np.nan_to_num(W, nan=0.0) * lv.mask


def grid_indices(grid: np.ndarray, times, tol: float = 1e-9) -> list[int]:
    idx = []
    step = grid[1] - grid[0]
    for t in times:
        j = int(round(t / step))
        if j < 1 or j >= len(grid) or abs(grid[j] - t) > tol * max(1.0, grid[-1]):
            raise TreeError(f"jump time {t!r} is not on the grid")
        idx.append(j)
    return idx


def _budget_bound(collapsed: bool, N: int, K: int, m: int) -> int:
    if collapsed:
        return 1 + sum((N - n + 1) * K for n in range(1, m + 1))
    return sum(math.comb(N, n) * K**n for n in range(m + 1))


def _node_rows(model, history, j, grid):
    N1 = len(grid)
    K = model.n_marks
    F = np.zeros(N1)
    if j < N1 - 1:
        F[j + 1:] = np.clip(model.cdf(history, grid[j + 1:]), 0.0, 1.0)
    phi = np.zeros((N1, K))
    mids = 0.5 * (grid[1:] + grid[:-1])
    if j < N1 - 1:
        phi[j + 1:] = model.kernels(history, mids[j:])
    return F, phi


def build_tree(model: HazardModel, m: int, grid_size: int, node_budget: int = DEFAULT_NODE_BUDGET,
               collapse: bool | None = None) -> HistoryTree:
    """History tree up to ``m`` jumps on ``grid_size`` uniform time points.

    Rejects models violating positivity of survival to the horizon; the
    boundary case ``F_D(T) = 1`` only at ``T`` is accepted and flagged.
    """
    if m < 1:
        raise TreeError("m must be >= 1")
    if grid_size < 2:
        raise TreeError("grid_size must be >= 2")
    report = check_a2(model, m)
    if report.failed:
        bad = next(lv for lv in report.levels if lv.verdict == "fail")
        raise TreeError(f"survival to the horizon is zero at level {bad.n} (history {bad.witness})")
    collapsed = model.markov if collapse is None else (collapse and model.markov)
    grid = np.linspace(0.0, model.horizon, grid_size)
    N = grid_size - 1
    K = model.n_marks
    bound = _budget_bound(collapsed, N, K, m)
    if bound > node_budget:
        raise TreeError(
            f"tree would have up to {bound} nodes (budget {node_budget}); "
            "use a Markov model (collapsed tree) or a smaller m / grid_size"
        )

    root = Level(0, [(0, -1)] if collapsed else [()], np.array([0]), np.array([-1]), [History()])
    levels = [root]
    index = [{root.keys[0]: 0}]
    cache = {}
    ms = model.markspace
    for n in range(m + 1):
        lv = levels[n]
        B = len(lv)
        F = np.zeros((B, N + 1))
        phi = np.zeros((B, N + 1, K))
        for b in range(B):
            ck = (lv.last_idx[b], lv.last_mark[b]) if collapsed else None
            if ck is not None and ck in cache:
                F[b], phi[b] = cache[ck]
            else:
                F[b], phi[b] = _node_rows(model, lv.histories[b], int(lv.last_idx[b]), grid)
                if ck is not None:
                    cache[ck] = (F[b], phi[b])
        lv.F, lv.phi = F, phi
        if n == m:
            break
        w = lv.weights
        children = -np.ones((B, N + 1, K), dtype=np.int64)
        keys, lidx, lmark, hists = [], [], [], []
        idx = {}
        for b in range(B):
            for k in range(int(lv.last_idx[b]) + 1, N + 1):
                if w[b, k] <= 0:
                    continue
                for x in range(K):
                    if phi[b, k, x] <= 0:
                        continue
                    key = (k, x) if collapsed else lv.keys[b] + ((k, x),)
                    c = idx.get(key)
                    if c is None:
                        c = len(keys)
                        idx[key] = c
                        keys.append(key)
                        lidx.append(k)
                        lmark.append(x)
                        hists.append(lv.histories[b].extend(grid[k], ms.marks[x]))
                    children[b, k, x] = c
        lv.children = children
        levels.append(Level(n + 1, keys, np.array(lidx, dtype=np.int64), np.array(lmark, dtype=np.int64), hists))
        index.append(idx)
        if sum(len(v) for v in levels) > node_budget:
            raise TreeError(f"node budget {node_budget} exceeded at level {n + 1}")
    return HistoryTree(model, m, grid, levels, collapsed, report.boundary, index)


def snap_history(grid: np.ndarray, history: History) -> History:
    """Move jump times up to the next grid point, pushing collisions later.

    Jumps pushed past the horizon are dropped.
    """
    step = grid[1] - grid[0]
    N = len(grid) - 1
    times, marks = [], []
    prev = 0
    for t, x in zip(history.times, history.marks):
        j = max(int(math.ceil(t / step - 1e-12)), prev + 1, 1)
        if j > N:
            break
        times.append(float(grid[j]))
        marks.append(x)
        prev = j
    return History(tuple(times), tuple(marks))


def simulate_on_tree(tree: HistoryTree, seed: int) -> tuple[Trajectory, list[int]]:
    """Path of the discrete chain defined by the tree weights.

    Returns the trajectory and the node id visited at each level.  Paths are
    cut at level ``m``.
    """
    rng = rng_for(seed)
    ms = tree.model.markspace
    h = History()
    path = [0]
    b = 0
    for n in range(tree.m):
        lv = tree.levels[n]
        w = lv.weights[b]
        u = rng.random()
        c = np.cumsum(w)
        if u >= c[-1]:
            break
        k = int(np.searchsorted(c, u, side="right"))
        p = lv.phi[b, k]
        cp = np.cumsum(p)
        x = int(min(np.searchsorted(cp, rng.random() * cp[-1], side="right"), len(p) - 1))
        h = h.extend(tree.grid[k], ms.marks[x])
        b = int(lv.children[b, k, x])
        path.append(b)
    return Trajectory(h, tree.model.horizon, int(seed)), path


@dataclass
class SolutionField:
    """``y^n_D(t_k)``, ``z^n_D(t_k, x)`` and terminal values ``u^n_D`` on a tree.

    ``y[n]`` has shape ``(B_n, N+1)`` and is meaningful from the node's own
    grid index on; ``z[n]`` has shape ``(B_n, N+1, K)`` and is meaningful for
    cells after it (it is the predictable integrand on that cell).
    """

    tree: HistoryTree
    y: list
    z: list
    u: list

    @classmethod
    def zeros(cls, tree: HistoryTree) -> "SolutionField":
        K, N1 = tree.n_marks, tree.N + 1
        return cls(tree, [np.zeros((len(lv), N1)) for lv in tree.levels],
                   [np.zeros((len(lv), N1, K)) for lv in tree.levels],
                   [np.zeros(len(lv)) for lv in tree.levels])

    @classmethod
    def constant(cls, tree: HistoryTree, y: float = 0.0, z: float = 0.0) -> "SolutionField":
        f = cls.zeros(tree)
        for n in range(len(tree.levels)):
            f.y[n][:] = y
            f.z[n][:] = z
        return f

    @classmethod
    def random(cls, tree: HistoryTree, seed: int, scale: float = 1.0) -> "SolutionField":
        """Gaussian entries below level ``m``; truncated fields vanish past the m-th jump."""
        rng = rng_for(seed)
        f = cls.zeros(tree)
        for n in range(tree.m):
            f.y[n] = scale * rng.standard_normal(f.y[n].shape)
            f.z[n] = scale * rng.standard_normal(f.z[n].shape)
        return f

    def _check(self, other):
        if other.tree is not self.tree:
            raise ValueError("fields live on different trees")

    def __sub__(self, other):
        self._check(other)
        return SolutionField(self.tree, [a - b for a, b in zip(self.y, other.y)],
                             [a - b for a, b in zip(self.z, other.z)],
                             [a - b for a, b in zip(self.u, other.u)])

    def scaled(self, c: float) -> "SolutionField":
        return SolutionField(self.tree, [c * a for a in self.y], [c * a for a in self.z], [c * a for a in self.u])

    @property
    def Y0(self) -> float:
        return float(self.y[0][0, 0])

    def sup_distance(self, other) -> float:
        """Max ``|y - y'|`` over all node/grid entries the nodes own."""
        self._check(other)
        d = 0.0
        for n, lv in enumerate(self.tree.levels):
            own = np.arange(self.tree.N + 1)[None, :] >= lv.last_idx[:, None]
            if len(lv):
                d = max(d, float(np.max(np.abs(self.y[n] - other.y[n])[own], initial=0.0)))
        return d

    def to_csv(self, path):
        import csv

        tree = self.tree
        ms = tree.model.markspace
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "node_id", "last_time", "last_mark", "grid_time", "y"]
                       + [f"z[{x}]" for x in ms.marks])
            for n, lv in enumerate(tree.levels):
                for b in range(len(lv)):
                    j = int(lv.last_idx[b])
                    for k in range(j, tree.N + 1):
                        zs = self.z[n][b, k] if k > j and n < tree.m else np.zeros(tree.n_marks)
                        w.writerow([n, b, repr(float(tree.grid[j])), ms.name(int(lv.last_mark[b])),
                                    repr(float(tree.grid[k])), repr(float(self.y[n][b, k]))]
                                   + [repr(float(v)) for v in zs])
