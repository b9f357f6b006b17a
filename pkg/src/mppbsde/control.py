"""Optimal control of the jump intensity through the BSDE with Hamiltonian generator.

Under a control ``u`` the compensator becomes ``r(t, y, u) phi_t(dy) dA_t``;
the cost is ``J(u) = E_u[∫ l(t, X_t, u_t) dA_t + g(X_T)]`` and is evaluated
under the reference measure with the density ``L_T``.  Tables:

* ``r[u, y]`` or ``r[u, y, i]``: intensity factor for a jump with mark ``y``;
* ``l[u, s]`` or ``l[u, s, i]``: running cost in state ``s`` (the last mark,
  index ``K`` before the first jump);
* ``g[s]``: terminal cost by the state at ``T``.

The optional last axis ``i`` is a time cell of ``time_grid``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mpp import HazardModel, History, Trajectory, compensator_at, rng_for, simulate_history
from .problem import BsdeProblem, Generator, Terminal, adapt_form2, beta_threshold
from .solver import solve_truncated
from .tree import HistoryTree, SolutionField, TreeError, build_tree, snap_history


class FeasibilityError(ValueError):
    pass


@dataclass
class ControlProblem:
    model: HazardModel
    actions: list
    r: np.ndarray
    l: np.ndarray
    g: np.ndarray
    C_r: float
    C_l: float
    p: float = 2.0
    time_grid: np.ndarray | None = None

    def __post_init__(self):
        K = self.model.n_marks
        U = len(self.actions)
        if U == 0:
            raise ValueError("action set is empty")
        self.r = np.asarray(self.r, dtype=float)
        self.l = np.asarray(self.l, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        timed = self.r.ndim == 3 or self.l.ndim == 3
        if timed:
            if self.time_grid is None:
                raise ValueError("time-dependent tables need time_grid")
            self.time_grid = np.asarray(self.time_grid, dtype=float)
            M = len(self.time_grid) - 1
            if self.r.ndim == 2:
                self.r = np.repeat(self.r[:, :, None], M, axis=2)
            if self.l.ndim == 2:
                self.l = np.repeat(self.l[:, :, None], M, axis=2)
        else:
            self.time_grid = np.array([0.0, self.model.horizon])
            self.r = self.r[:, :, None]
            self.l = self.l[:, :, None]
        M = len(self.time_grid) - 1
        if self.r.shape != (U, K, M):
            raise ValueError(f"r table must have shape {(U, K)} (+ time), got {self.r.shape[:2]}")
        if self.l.shape != (U, K + 1, M):
            raise ValueError(f"l table must have shape {(U, K + 1)} (+ time), got {self.l.shape[:2]}")
        if self.g.shape != (K + 1,):
            raise ValueError(f"g table must have shape {(K + 1,)}, got {self.g.shape}")
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        self.audit()

    def audit(self):
        """Bounds ``0 <= r <= C_r`` and ``|l| <= C_l`` (exact on the tables)."""
        if np.any(self.r < 0) or np.any(self.r > self.C_r):
            raise ValueError(f"r outside [0, C_r={self.C_r}]")
        if np.any(np.abs(self.l) > self.C_l):
            raise ValueError(f"|l| exceeds C_l={self.C_l}")

    @property
    def U(self) -> int:
        return len(self.actions)

    def cell(self, t) -> np.ndarray:
        M = len(self.time_grid) - 1
        return np.clip(np.searchsorted(self.time_grid, t, side="right") - 1, 0, M - 1)

    def total_rates(self, t, phi) -> np.ndarray:
        """``∫ r(t, y, u) phi(dy)`` per action; shape ``(B, U)``."""
        i = self.cell(t)
        r = self.r[:, :, i]  # (U, K, B)
        return np.einsum("ukb,bk->bu", r, phi)


def hamiltonian(z_row, l_row, r_rows, phi):
    """Exhaustive ``min_u (l(u) + Σ_y z(y) r(y, u) phi(y))``.

    Returns ``(value, argmin, margin)``; ties go to the first action and the
    margin is the gap to the runner-up (``inf`` with a single action).
    """
    z = np.asarray(z_row, dtype=float)
    vals = np.asarray(l_row, dtype=float) + np.asarray(r_rows, dtype=float) @ (z * np.asarray(phi, dtype=float))
    a = int(np.argmin(vals))
    rest = np.delete(vals, a)
    margin = float(rest.min() - vals[a]) if len(rest) else math.inf
    return float(vals[a]), a, margin


def _state_index(info, K):
    s = np.asarray(info.last_mark)
    return np.where(s < 0, K, s)


def hamiltonian_values(cp: ControlProblem, info, t, zeta, phi) -> np.ndarray:
    """All action values, shape ``(B, U)``."""
    B, K = zeta.shape
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    i = cp.cell(t)
    st = _state_index(info, K)
    l = cp.l[:, st, i].T  # (B, U)
    r = cp.r[:, :, i]  # (U, K, B)
    return l + np.einsum("ukb,bk->bu", r, zeta * phi)


def hamiltonian_generator(cp: ControlProblem) -> Generator:
    def fn(info, t, y, zeta, phi):
        v = hamiltonian_values(cp, info, t, zeta, phi).min(axis=1)
        return np.repeat(v[:, None], zeta.shape[1], axis=1)

    return Generator(fn, markov=True, name="hamiltonian")


def hamiltonian_form2(cp: ControlProblem) -> Generator:
    """The same generator written as ``fbar(t, y, eta zeta)`` with ``eta = H / C_r``."""

    def eta(info, t, zeta, phi):
        return hamiltonian_values(cp, info, t, zeta, phi).min(axis=1) / cp.C_r

    return adapt_form2(lambda info, t, y, z: cp.C_r * z, eta)


def terminal_cost(cp: ControlProblem) -> Terminal:
    ms = cp.model.markspace
    K = cp.model.n_marks

    def xi(h: History) -> float:
        s = ms.index(h.last_mark(ms.sentinel)) if h.depth else -1
        return float(cp.g[K if s < 0 else s])

    return Terminal(xi, markov=True, name="g(X_T)")


@dataclass
class FeasibilityReport:
    exponent: float  # integrability exponent for A_T
    lemma_beta: float  # gamma + 1 + C_r^{q^2}/(q - 1) with gamma = q = p/(p-1)
    threshold: float
    beta: float
    moment_exponent: float  # estimate of E exp(exponent A_T)
    moment_beta: float
    moment_g: float  # estimate of E |g(X_T)|^p exp(beta A_T)
    status: str  # "pass" | "unverifiable" | "fail"
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def feasibility_exponent(p: float, C_r: float) -> float:
    return (2 * p - 1) / (p - 1) + (p - 1) * C_r ** ((p / (p - 1)) ** 2)


def lemma_beta(p: float, C_r: float) -> float:
    q = gamma = p / (p - 1)
    return gamma + 1 + C_r ** (q * q) / (q - 1)


def _mc_moment(cp: ControlProblem, beta: float, n: int, seed: int, with_g: bool):
    """Two half-sample estimates of ``E[w exp(beta A_T)]``; ``w = |g|^p`` or 1."""
    model = cp.model
    T = model.horizon
    rng = rng_for(seed)
    logs = np.empty(n)
    weights = np.ones(n)
    K = model.n_marks
    for i in range(n):
        h = simulate_history(model, rng)
        logs[i] = beta * compensator_at(model, h, [T])[0]
        if with_g:
            s = model.markspace.index(h.last_mark(model.markspace.sentinel)) if h.depth else -1
            weights[i] = abs(cp.g[K if s < 0 else s]) ** cp.p
    with np.errstate(over="ignore"):
        v = weights * np.exp(logs)
    half = n // 2
    return float(v.mean()), float(v[:half].mean()), float(v[half:].mean())


def feasibility_beta(cp: ControlProblem, beta: float | None = None, eps: float = 0.5,
                     n_samples: int = 2000, seed: int = 0, rel_tol: float = 0.25) -> FeasibilityReport:
    """Integrability exponent, the density-moment beta and the beta window for the control BSDE."""
    p = cp.p
    expo = feasibility_exponent(p, cp.C_r)
    lb = lemma_beta(p, cp.C_r)
    thr = beta_threshold(p, eps, cp.C_r, 0.0)
    b = 1.05 * thr if beta is None else float(beta)
    viol = []
    status = "pass"
    if not b > thr:
        viol.append(f"beta={b} does not exceed the threshold {thr:.6g}")
        status = "fail"
    moments = []
    for label, bb, wg in (("E exp(exponent A_T)", expo, False), ("E exp(beta A_T)", b, False),
                          ("E |g|^p exp(beta A_T)", b, True)):
        mean, h1, h2 = _mc_moment(cp, bb, n_samples, seed, wg)
        moments.append(mean)
        if not np.isfinite(mean):
            viol.append(f"{label} is not finite")
            status = "fail"
        elif mean > 0 and abs(h1 - h2) > rel_tol * mean and status == "pass":
            viol.append(f"{label} estimate unstable ({h1:.4g} vs {h2:.4g})")
            status = "unverifiable"
    return FeasibilityReport(expo, lb, thr, b, moments[0], moments[1], moments[2], status, viol)


def build_control_bsde(cp: ControlProblem, beta: float | str = "auto", eps: float = 0.5,
                       check: bool = True) -> BsdeProblem:
    b = None if beta == "auto" else float(beta)
    if check:
        rep = feasibility_beta(cp, b, eps, n_samples=400)
        if rep.status == "fail":
            raise FeasibilityError("; ".join(rep.violations))
        b = rep.beta
    return BsdeProblem(cp.model, hamiltonian_generator(cp), terminal_cost(cp), p=cp.p,
                       beta="auto" if b is None else b, L=cp.C_r, Lprime=0.0, eps=eps)


# ---------------------------------------------------------------- controls

@dataclass
class ControlField:
    """Action index per tree node and grid cell, with a per-state fallback.

    ``actions[n][b, k]`` is used on cell ``(t_{k-1}, t_k]`` when the
    (snapped) history up to ``t_{k-1}`` is node ``b`` of level ``n``.
    """

    tree: HistoryTree
    actions: list
    fallback: np.ndarray
    margins: list | None = None
    ties: list | None = None
    label: str = "feedback"

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.actions] + [self.fallback])

    def perturbed(self, fraction: float, seed: int, n_actions: int) -> "ControlField":
        """Switch a random ``fraction`` of the (node, cell) entries to another action."""
        rng = rng_for(seed)
        acts = []
        for a in self.actions:
            a = a.copy()
            hit = rng.random(a.shape) < fraction
            shift = rng.integers(1, max(n_actions, 2), size=a.shape)
            a[hit] = (a[hit] + shift[hit]) % n_actions
            acts.append(a)
        return ControlField(self.tree, acts, self.fallback.copy(), label=f"perturbed {fraction:g} #{seed}")


def _lowest_cost_fallback(cp: ControlProblem) -> np.ndarray:
    return np.argmin(cp.l[:, :, 0], axis=0)


def constant_control(cp: ControlProblem, tree: HistoryTree, action: int) -> ControlField:
    acts = [np.full((len(lv), tree.N + 1), action, dtype=np.int64) for lv in tree.levels]
    return ControlField(tree, acts, np.full(cp.model.n_marks + 1, action, dtype=np.int64),
                        label=f"constant {cp.actions[action]}")


def random_control(cp: ControlProblem, tree: HistoryTree, seed: int) -> ControlField:
    """A predictable control drawn once per (node, cell) from a seeded stream."""
    rng = rng_for(seed)
    acts = [rng.integers(0, cp.U, size=(len(lv), tree.N + 1)) for lv in tree.levels]
    return ControlField(tree, acts, rng.integers(0, cp.U, size=cp.model.n_marks + 1), label=f"random {seed}")


def extract_control(cp: ControlProblem, tree: HistoryTree, sol: SolutionField) -> ControlField:
    """Hamiltonian argmin at the solved ``zeta`` on every node and cell."""
    grid = tree.grid
    acts, margins, ties = [], [], []
    fb = _lowest_cost_fallback(cp)
    K = tree.n_marks
    for n, lv in enumerate(tree.levels):
        B = len(lv)
        a = np.zeros((B, tree.N + 1), dtype=np.int64)
        mg = np.full((B, tree.N + 1), np.inf)
        if n == tree.m or B == 0:
            st = np.where(lv.last_mark < 0, K, lv.last_mark)
            a[:] = fb[st][:, None]
        else:
            info = lv.info(grid)
            for k in range(1, tree.N + 1):
                vals = hamiltonian_values(cp, info, float(grid[k]), sol.z[n][:, k, :], lv.phi[:, k, :])
                a[:, k] = np.argmin(vals, axis=1)
                if cp.U > 1:
                    srt = np.sort(vals, axis=1)
                    mg[:, k] = srt[:, 1] - srt[:, 0]
        acts.append(a)
        margins.append(mg)
        ties.append(mg == 0)
    return ControlField(tree, acts, fb, margins, ties, label="u*")


# ---------------------------------------------------------------- path bank

@dataclass
class PathBank:
    """Reference-measure paths cut at grid points and jump times.

    Every piece lies in one grid cell and between two jumps, so action,
    state and kernel are constant on it.
    """

    n_paths: int
    traj: np.ndarray
    cell: np.ndarray
    ctrl_level: np.ndarray
    ctrl_node: np.ndarray  # -1 outside the tree
    state: np.ndarray
    mid: np.ndarray
    dA: np.ndarray
    phi: np.ndarray  # (P, K)
    jump_traj: np.ndarray
    jump_piece: np.ndarray
    jump_mark: np.ndarray
    jump_time: np.ndarray
    final_state: np.ndarray
    grid: np.ndarray
    offsets: np.ndarray  # start of each level in ControlField.flat()

    @classmethod
    def build(cls, model: HazardModel, tree: HistoryTree, n_paths: int, seed: int = 0,
              histories: list | None = None) -> "PathBank":
        grid = tree.grid
        N = tree.N
        K = model.n_marks
        ms = model.markspace
        cols = {k: [] for k in ("traj", "cell", "lev", "node", "state", "mid", "dA", "phi")}
        jt, jp, jm, js = [], [], [], []
        final = np.empty(n_paths, dtype=np.int64)
        npcs = 0
        if histories is None:
            rng = rng_for(seed)
            histories = [simulate_history(model, rng) for _ in range(n_paths)]
        for i, h in enumerate(histories):
            S = np.asarray(h.times, dtype=float)
            marks = np.array([ms.index(x) for x in h.marks], dtype=np.int64)
            pts = np.unique(np.concatenate([grid, S]))
            a, b = pts[:-1], pts[1:]
            mid = 0.5 * (a + b)
            cell = np.clip(np.searchsorted(grid, mid), 1, N)
            nst = np.searchsorted(S, a, side="right")  # jumps at or before the piece start
            state = np.concatenate([[K], marks])[nst]
            A = compensator_at(model, h, pts)
            dA = np.diff(A)
            phi = np.empty((len(mid), K))
            for n in np.unique(nst):
                sel = nst == n
                phi[sel] = model.kernels(h.prefix(int(n)), mid[sel])
            # node deciding the action on cell k: history up to t_{k-1}, snapped
            nlev = np.searchsorted(S, grid[cell - 1], side="right")
            node = np.full(len(mid), -1, dtype=np.int64)
            for n in np.unique(nlev):
                if n > tree.m:
                    continue
                snapped = snap_history(grid, h.prefix(int(n)))
                if snapped.depth != n:
                    continue
                try:
                    b_id = tree.locate(snapped)
                except TreeError:
                    continue
                sel = nlev == n
                j = int(tree.levels[n].last_idx[b_id])
                node[sel] = np.where(cell[sel] > j, b_id, -1)
            cols["traj"].append(np.full(len(mid), i))
            cols["cell"].append(cell)
            cols["lev"].append(np.minimum(nlev, tree.m))
            cols["node"].append(node)
            cols["state"].append(state)
            cols["mid"].append(mid)
            cols["dA"].append(dA)
            cols["phi"].append(phi)
            for t, x in zip(S, marks):
                jt.append(i)
                jp.append(npcs + int(np.searchsorted(b, t)))
                jm.append(x)
                js.append(t)
            npcs += len(mid)
            final[i] = K if h.depth == 0 else marks[-1]
        sizes = [len(lv) * (N + 1) for lv in tree.levels]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        cat = lambda k: np.concatenate(cols[k])
        return cls(n_paths, cat("traj"), cat("cell"), cat("lev"), cat("node"), cat("state"), cat("mid"),
                   cat("dA"), np.concatenate(cols["phi"]), np.array(jt, dtype=np.int64),
                   np.array(jp, dtype=np.int64), np.array(jm, dtype=np.int64), np.array(js, dtype=float),
                   final, grid, offsets)

    def piece_actions(self, control: ControlField) -> np.ndarray:
        flat = control.flat()
        N1 = len(self.grid)
        fb_off = self.offsets[-1]
        inside = self.ctrl_node >= 0
        idx = np.where(inside, self.offsets[self.ctrl_level] + np.maximum(self.ctrl_node, 0) * N1 + self.cell,
                       fb_off + self.state)
        return flat[idx]

    def log_density(self, cp: ControlProblem, acts: np.ndarray) -> np.ndarray:
        """``log L_T`` per path."""
        i = cp.cell(self.mid)
        rbar = np.einsum("pk,pk->p", cp.r[acts, :, i], self.phi)
        comp = np.bincount(self.traj, weights=(1 - rbar) * self.dA, minlength=self.n_paths)
        if len(self.jump_piece):
            ja = acts[self.jump_piece]
            with np.errstate(divide="ignore"):
                lr = np.log(cp.r[ja, self.jump_mark, cp.cell(self.jump_time)])
            comp += np.bincount(self.jump_traj, weights=lr, minlength=self.n_paths)
        return comp

    def running_cost(self, cp: ControlProblem, acts: np.ndarray) -> np.ndarray:
        i = cp.cell(self.mid)
        return np.bincount(self.traj, weights=cp.l[acts, self.state, i] * self.dA, minlength=self.n_paths)


@dataclass
class CostEstimate:
    J: float
    stderr: float
    mean_LT: float
    LT_stderr: float
    label: str = ""
    samples: np.ndarray | None = field(default=None, repr=False)


def cost(cp: ControlProblem, control: ControlField, n_samples: int = 10000, seed: int = 0,
         bank: PathBank | None = None) -> CostEstimate:
    """``J(u) = E[L_T (∫ l dA + g(X_T))]`` under the reference measure."""
    bank = bank or PathBank.build(cp.model, control.tree, n_samples, seed)
    acts = bank.piece_actions(control)
    LT = np.exp(bank.log_density(cp, acts))
    v = LT * (bank.running_cost(cp, acts) + cp.g[bank.final_state])
    n = bank.n_paths
    se = lambda x: float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return CostEstimate(float(v.mean()), se(v), float(LT.mean()), se(LT), control.label, v)


def girsanov_weight(cp: ControlProblem, trajectory: Trajectory, control: ControlField | int,
                    tree: HistoryTree | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(times, L_t)`` at the grid points and jump times of one trajectory."""
    if isinstance(control, (int, np.integer)):
        tree = tree or build_tree(cp.model, 1, 2)
        control = constant_control(cp, tree, int(control))
    bank = PathBank.build(cp.model, control.tree, 1, histories=[trajectory.history])
    acts = bank.piece_actions(control)
    i = cp.cell(bank.mid)
    rbar = np.einsum("pk,pk->p", cp.r[acts, :, i], bank.phi)
    logL = np.concatenate([[0.0], np.cumsum((1 - rbar) * bank.dA)])
    times = np.unique(np.concatenate([bank.grid, np.asarray(trajectory.history.times, dtype=float)]))
    for piece, x, t in zip(bank.jump_piece, bank.jump_mark, bank.jump_time):
        # piece ends at the jump, so the factor applies from that time on
        with np.errstate(divide="ignore"):
            logL[piece + 1:] += np.log(cp.r[acts[piece], x, cp.cell(t)])
    return times, np.exp(logL)


# ---------------------------------------------------------------- solve and verify

@dataclass
class ControlSolution:
    Y0: float
    field: SolutionField
    ustar: ControlField
    problem: BsdeProblem
    feasibility: FeasibilityReport | None = None


def solve_control(cp: ControlProblem, m: int, grid_size: int, beta: float | str = "auto",
                  eps: float = 0.5) -> ControlSolution:
    b = None if beta == "auto" else float(beta)
    feas = feasibility_beta(cp, b, eps, n_samples=400)
    if feas.status == "fail":
        raise FeasibilityError("; ".join(feas.violations))
    problem = build_control_bsde(cp, feas.beta, eps, check=False)
    tree = build_tree(cp.model, m, grid_size)
    sol = solve_truncated(problem, tree)
    return ControlSolution(sol.Y0, sol, extract_control(cp, tree, sol), problem, feas)


@dataclass
class Comparison:
    label: str
    J: float
    stderr: float
    holds: bool


@dataclass
class VerificationReport:
    Y0: float
    J_star: float
    J_star_stderr: float
    comparisons: list
    perturbed: list
    allowance: float

    @property
    def optimal_gap(self) -> float:
        return abs(self.Y0 - self.J_star)

    @property
    def equality_holds(self) -> bool:
        return self.optimal_gap <= 3 * self.J_star_stderr + self.allowance

    @property
    def violations(self) -> list:
        return [c for c in self.comparisons + self.perturbed if not c.holds]

    @property
    def passed(self) -> bool:
        return self.equality_holds and all(c.holds for c in self.comparisons)


def verify_optimality(cp: ControlProblem, Y0: float, ustar: ControlField, n_random_controls: int = 20,
                      n_samples: int = 10000, seed: int = 0, allowance: float = 2e-2,
                      perturb_fraction: float = 0.1, n_perturbed: int = 3) -> VerificationReport:
    """``Y0 <= J(u) + 3 se`` over constant, random and perturbed controls; ``Y0 ≈ J(u*)``.

    All controls are priced on one shared path bank.
    """
    tree = ustar.tree
    bank = PathBank.build(cp.model, tree, n_samples, seed)
    star = cost(cp, ustar, bank=bank)
    comps = [Comparison("u*", star.J, star.stderr, Y0 <= star.J + 3 * star.stderr)]
    controls = [constant_control(cp, tree, a) for a in range(cp.U)]
    controls += [random_control(cp, tree, seed + 1000 + i) for i in range(n_random_controls)]
    for c in controls:
        e = cost(cp, c, bank=bank)
        comps.append(Comparison(c.label, e.J, e.stderr, Y0 <= e.J + 3 * e.stderr))
    pert = []
    for i in range(n_perturbed):
        c = ustar.perturbed(perturb_fraction, seed + 2000 + i, cp.U)
        e = cost(cp, c, bank=bank)
        d = e.samples - star.samples
        se = float(d.std(ddof=1) / math.sqrt(len(d)))
        pert.append(Comparison(c.label, e.J, se, e.J >= star.J - 3 * se))
    return VerificationReport(Y0, star.J, star.stderr, comps, pert, allowance)


def two_action_fixture() -> ControlProblem:
    """Poisson(1) on [0, 1] with marks a/b.

    'slow' damps all jumps and is free in state a; 'fast' favours mark a and
    is free in state b.  The optimal feedback switches with the state.
    """
    from .mpp import build_model

    model = build_model({"kind": "poisson", "horizon": 1.0, "marks": ["a", "b"], "rate": 1.0,
                         "mark_probs": [0.5, 0.5]})
    r = np.array([[0.4, 0.4], [1.6, 0.8]])
    l = np.array([[0.0, 0.4, 0.1], [0.2, 0.0, 0.1]])
    g = np.array([0.0, 1.0, 0.6])
    return ControlProblem(model, ["slow", "fast"], r, l, g, C_r=2.0, C_l=1.0, p=2.0)
