"""BSDE data, existence thresholds, Lipschitz audits and ``L^p_beta`` norms.

Generators are vectorised over a batch of tree nodes::

    f(info, t, y, zeta, phi) -> array (B, K)

with ``y`` of shape ``(B,)`` and ``zeta``, ``phi`` of shape ``(B, K)``.  The
returned column ``x`` is ``f(t, x, y, zeta)``; the equation integrates it
against ``phi(dx) dA``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .mpp import HazardModel, History, rng_for, simulate_history
from .tree import HistoryTree, NodeInfo, SolutionField, simulate_on_tree


def c_epsilon(p: float, eps: float) -> float:
    """``(1 - (1+eps)^{-1/(p-1)})^{1-p}``; tends to 1 as ``eps -> inf``."""
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if math.isinf(eps):
        return 1.0
    # (1+eps)^{-1/(p-1)} = exp(-log1p(eps)/(p-1)); -expm1 keeps precision for small eps
    return (-math.expm1(-math.log1p(eps) / (p - 1))) ** (1 - p)


def _check_lip(p, eps, L, Lprime):
    c = c_epsilon(p, eps)
    if L < 0 or Lprime < 0:
        raise ValueError("Lipschitz constants must be nonnegative")
    return c


def beta_threshold(p: float, eps: float, L: float, Lprime: float) -> float:
    """Lower bound on ``beta`` for existence/uniqueness in ``L^p_beta``."""
    c = _check_lip(p, eps, L, Lprime)
    return 1 + c / (1 + eps) + p * Lprime + (p - 1) * (((L + 1) ** p) * (1 + eps)) ** (1 / (p - 1))


def lemma_threshold(p: float, eps: float, L: float, Lprime: float) -> float:
    """Weaker bound of the a priori estimate (``L^p`` in place of ``(L+1)^p``)."""
    c = _check_lip(p, eps, L, Lprime)
    return 1 + c / (1 + eps) + p * Lprime + (p - 1) * ((L**p) * (1 + eps)) ** (1 / (p - 1))


def _contraction_rhs(alpha, p, eps, L, Lprime):
    c = c_epsilon(p, eps)
    return (1 + c / (1 + eps) + (p - 1) * (((L + 1) ** p) * (1 + eps) / alpha) ** (1 / (p - 1))
            + p * Lprime / alpha ** (1 / p))


@dataclass(frozen=True)
class Contraction:
    alpha: float
    alpha_min: float
    y_weight: float
    z_weight: float


def contraction_constant(beta: float, p: float, eps: float, L: float, Lprime: float) -> Contraction:
    """Contraction factor of the Picard map and the matching equivalent norm.

    ``alpha_min`` is where ``beta`` meets the ``alpha``-dependent bound; the
    factor used is ``1 - (beta - threshold) / (2 beta)`` when admissible,
    else the midpoint of ``(alpha_min, 1)``.
    """
    thr = beta_threshold(p, eps, L, Lprime)
    if not beta > thr:
        raise ValueError(f"beta={beta} does not exceed the threshold {thr}")
    def f(a):
        try:
            return _contraction_rhs(a, p, eps, L, Lprime) - beta
        except OverflowError:
            return math.inf

    # f(1) < 0 and f decreases in alpha; halve until the sign flips
    lo = 0.5
    while f(lo) < 0 and lo > 1e-300:
        lo *= 0.5
    alpha_min = optimize.brentq(f, lo, 2 * lo) if f(lo) >= 0 else 0.0
    alpha = 1 - (beta - thr) / (2 * beta)
    if not alpha > alpha_min:
        alpha = 0.5 * (alpha_min + 1)
    c = c_epsilon(p, eps)
    if Lprime == 0:
        wy = beta - 1 - c / (1 + eps) - (p - 1) * (((L + 1) ** p) * (1 + eps) / alpha) ** (1 / (p - 1))
    else:
        wy = Lprime / alpha ** (1 / p)
    return Contraction(alpha, alpha_min, wy, 1 / (1 + eps))


@dataclass
class Generator:
    fn: Callable
    markov: bool = True
    name: str = "custom"

    def __call__(self, info, t, y, zeta, phi):
        return np.asarray(self.fn(info, t, y, zeta, phi), dtype=float)

    def at_zero(self, info, t, phi):
        B, K = phi.shape
        return self(info, t, np.zeros(B), np.zeros((B, K)), phi)


def zero_generator() -> Generator:
    return Generator(lambda info, t, y, zeta, phi: np.zeros_like(zeta), name="zero")


def martingale_generator() -> Generator:
    """``f(t, x, y, zeta) = zeta(x)``: zero driver in compensated form.

    With it ``Y_t = E[xi | F_t]``; Lipschitz constants ``L = 1``, ``L' = 0``.
    """
    return Generator(lambda info, t, y, zeta, phi: np.array(zeta, dtype=float), name="martingale")


def linear_generator(c: float = 0.0, a_y: float = 0.0, a_z: float = 0.0, a_int: float = 0.0) -> Generator:
    """``c + a_y y + a_z zeta(x) + a_int ∫ zeta dphi``."""

    def fn(info, t, y, zeta, phi):
        integ = (zeta * phi).sum(axis=1, keepdims=True)
        return c + a_y * y[:, None] + a_z * zeta + a_int * integ + 0.0 * zeta

    return Generator(fn, name="linear")


def smooth_generator(c: float = 0.0, a_y: float = 0.0, b: float = 0.0) -> Generator:
    """``c + a_y sin(y) + zeta(x) + b tanh(zeta(x))``, so ``L' = |a_y|``, ``L = 1 + |b|``."""

    def fn(info, t, y, zeta, phi):
        return c + a_y * np.sin(y)[:, None] + zeta + b * np.tanh(zeta)

    return Generator(fn, name="smooth")


def adapt_form2(fbar: Callable, eta: Callable, markov: bool = True) -> Generator:
    """Generator ``f(t, x, y, zeta) = fbar(t, y, eta_t zeta)``, constant in ``x``.

    ``fbar(info, t, y, z) -> (B,)`` and ``eta(info, t, zeta, phi) -> (B,)``.
    """

    def fn(info, t, y, zeta, phi):
        v = np.asarray(fbar(info, t, y, np.asarray(eta(info, t, zeta, phi), dtype=float)), dtype=float)
        return np.repeat(v[:, None], zeta.shape[1], axis=1)

    return Generator(fn, markov=markov, name="form2")


def phi_integral(info, t, zeta, phi):
    """The map ``zeta -> ∫ zeta dphi`` (satisfies the ``eta`` contraction)."""
    return (zeta * phi).sum(axis=1)


@dataclass
class Terminal:
    fn: Callable[[History], float]
    markov: bool = True
    name: str = "custom"

    def __call__(self, history: History) -> float:
        return float(self.fn(history))


def constant_terminal(c: float) -> Terminal:
    return Terminal(lambda h: c, name=f"constant {c}")


def count_terminal() -> Terminal:
    return Terminal(lambda h: h.depth, name="count N_T")


def last_mark_terminal(mark: str) -> Terminal:
    return Terminal(lambda h: 1.0 if h.marks and h.marks[-1] == mark else 0.0, name=f"last-mark {mark}")


def depth_terminal(values) -> Terminal:
    vals = list(values)
    return Terminal(lambda h: vals[h.depth] if h.depth < len(vals) else vals[-1], name="by depth")


@dataclass
class BsdeProblem:
    model: HazardModel
    generator: Generator
    terminal: Terminal
    p: float = 2.0
    beta: float | str = "auto"
    L: float = 0.0
    Lprime: float = 0.0
    eps: float = 1.0
    allow_subthreshold: bool = False

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if self.L < 0 or self.Lprime < 0:
            raise ValueError("Lipschitz constants must be nonnegative")
        thr = self.threshold
        if self.beta == "auto":
            self.beta = 1.05 * thr
        self.beta = float(self.beta)
        if not self.beta > thr and not self.allow_subthreshold:
            raise ValueError(f"beta={self.beta} must exceed the threshold {thr:.6g}")

    @property
    def threshold(self) -> float:
        return beta_threshold(self.p, self.eps, self.L, self.Lprime)

    @property
    def markov(self) -> bool:
        return self.generator.markov and self.terminal.markov

    def contraction(self) -> Contraction:
        return contraction_constant(self.beta, self.p, self.eps, self.L, self.Lprime)


@dataclass
class LipschitzReport:
    y_ratio: float
    z_ratio: float
    L: float
    Lprime: float
    witnesses: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.y_ratio <= self.Lprime + 1e-9 and self.z_ratio <= self.L + 1e-9


def _sample_points(model, rng, n_samples):
    """Random (history, t) pairs with ``t`` after the history's last jump."""
    T = model.horizon
    for _ in range(n_samples):
        full = simulate_history(model, rng)
        h = full.prefix(int(rng.integers(0, full.depth + 1)))
        t = h.last_time + (T - h.last_time) * (1 - rng.random())
        yield h, t


def lipschitz_audit(problem: BsdeProblem, n_samples: int, seed: int = 0, scale: float = 3.0) -> LipschitzReport:
    """Largest observed ratios in both Lipschitz inequalities of the generator."""
    model = problem.model
    rng = rng_for(seed)
    K = model.n_marks
    p = problem.p
    ry = rz = 0.0
    witnesses = []
    for h, t in _sample_points(model, rng, n_samples):
        info = NodeInfo.single(model, h)
        phi = np.asarray(model.kernel(h, t), dtype=float)[None, :]
        y1, y2 = scale * rng.standard_normal(2)
        z1, z2 = scale * rng.standard_normal((2, 1, K))
        f = problem.generator
        a = np.abs(f(info, t, np.array([y2]), z1, phi) - f(info, t, np.array([y1]), z1, phi))[0]
        r1 = float(a.max() / abs(y2 - y1)) if y2 != y1 else 0.0
        num = float((np.abs(f(info, t, np.array([y1]), z1, phi) - f(info, t, np.array([y1]), z2, phi)) * phi).sum())
        den = float(((np.abs(z1 - z2) ** p) * phi).sum() ** (1 / p))
        r2 = num / den if den > 0 else 0.0
        if r1 > problem.Lprime + 1e-9 or r2 > problem.L + 1e-9:
            if len(witnesses) < 5:
                witnesses.append({"history": h, "t": t, "y": (y1, y2), "zeta": (z1[0], z2[0]),
                                  "y_ratio": r1, "z_ratio": r2})
        ry, rz = max(ry, r1), max(rz, r2)
    return LipschitzReport(ry, rz, problem.L, problem.Lprime, witnesses)


@dataclass
class EtaAudit:
    max_ratio: float
    witnesses: list

    @property
    def passed(self) -> bool:
        return self.max_ratio <= 1 + 1e-9


def audit_eta(eta: Callable, model: HazardModel, n_samples: int, seed: int = 0, scale: float = 3.0) -> EtaAudit:
    """Checks ``|eta z - eta z'| <= ∫ |z - z'| dphi`` on random samples."""
    rng = rng_for(seed)
    K = model.n_marks
    worst = 0.0
    wit = []
    for h, t in _sample_points(model, rng, n_samples):
        info = NodeInfo.single(model, h)
        phi = np.asarray(model.kernel(h, t), dtype=float)[None, :]
        z1, z2 = scale * rng.standard_normal((2, 1, K))
        lhs = abs(float(np.asarray(eta(info, t, z1, phi))[0] - np.asarray(eta(info, t, z2, phi))[0]))
        rhs = float((np.abs(z1 - z2) * phi).sum())
        r = lhs / rhs if rhs > 0 else 0.0
        if r > 1 + 1e-9 and len(wit) < 5:
            wit.append({"history": h, "t": t, "zeta": (z1[0], z2[0]), "ratio": r})
        worst = max(worst, r)
    return EtaAudit(worst, wit)


@dataclass
class NormReport:
    y_part: float
    z_part: float
    total: float
    standard_error: float = 0.0


def _path_increments(field: SolutionField, path_nodes, beta, p, wy, wz):
    """Per-path integral of ``(wy|Y|^p + wz ∫|Z|^p dphi) e^{beta A} dA``."""
    tree = field.tree
    A0 = 0.0
    ypart = zpart = 0.0
    for n, b in enumerate(path_nodes):
        lv = tree.levels[n]
        j = int(lv.last_idx[b])
        if n + 1 < len(path_nodes):
            end = int(tree.levels[n + 1].last_idx[path_nodes[n + 1]])
        else:
            end = tree.N
        A = lv.A[b]
        k = np.arange(j + 1, end + 1)
        with np.errstate(over="ignore", invalid="ignore"):
            if beta == 0:
                c = A[k] - A[k - 1]
            else:
                c = (np.exp(beta * A[k]) - np.exp(beta * A[k - 1])) / beta
            c = np.exp(beta * A0) * np.nan_to_num(c)
        ypart += float((c * np.abs(field.y[n][b, k]) ** p).sum())
        zpart += float((c * (np.abs(field.z[n][b, k]) ** p * lv.phi[b, k]).sum(axis=1)).sum())
        if n + 1 < len(path_nodes):
            A0 += float(A[end])
    return wy * ypart, wz * zpart


def lp_beta_norm(field: SolutionField, problem: BsdeProblem, mode: str = "tree", n_samples: int = 1000,
                 seed: int = 0, weights: tuple[float, float] = (1.0, 1.0)) -> NormReport:
    """``E ∫∫ (|Y|^p + |Z|^p) e^{beta A} dnu`` on the tree or by Monte Carlo.

    On each cell the integrand takes its right-endpoint value and the
    exponential weight is integrated exactly.  ``weights`` rescales the two
    parts (used for the equivalent norms of the Picard map).
    """
    tree = field.tree
    if tree.model is not problem.model:
        raise ValueError("field and problem are built on different models")
    beta, p = problem.beta, problem.p
    wy, wz = weights
    if mode == "tree":
        M = tree.occupation(beta)
        ypart = zpart = 0.0
        for n, lv in enumerate(tree.levels):
            if not len(lv):
                continue
            W = tree.cell_weights(n, beta) * M[n][:, None]
            ypart += float((W * np.abs(field.y[n]) ** p).sum())
            zpart += float((W * (np.abs(field.z[n]) ** p * lv.phi).sum(axis=2)).sum())
        ypart, zpart = wy * ypart, wz * zpart
        return NormReport(ypart, zpart, ypart + zpart, 0.0)
    if mode in ("mc", "monte-carlo"):
        ys = np.empty(n_samples)
        zs = np.empty(n_samples)
        for i in range(n_samples):
            _, nodes = simulate_on_tree(tree, seed + i)
            ys[i], zs[i] = _path_increments(field, nodes, beta, p, wy, wz)
        tot = ys + zs
        se = float(tot.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
        return NormReport(float(ys.mean()), float(zs.mean()), float(ys.mean() + zs.mean()), se)
    raise ValueError(f"unknown mode {mode!r}")


def equivalent_norm(field: SolutionField, problem: BsdeProblem, contraction: Contraction | None = None) -> float:
    c = contraction or problem.contraction()
    return lp_beta_norm(field, problem, weights=(c.y_weight, c.z_weight)).total
