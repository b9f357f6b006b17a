"""Acceptance battery: each criterion at its stated tolerance, one summary line each."""

import math
import time

import numpy as np
import pytest
from scipy.stats import poisson as poisson_law

from mppbsde.control import (ControlProblem, constant_control, cost, feasibility_exponent, girsanov_weight,
                             solve_control, two_action_fixture, verify_optimality)
from mppbsde.mpp import Trajectory, build_model, simulate_trajectory
from mppbsde.problem import (BsdeProblem, beta_threshold, constant_terminal, count_terminal, equivalent_norm,
                             last_mark_terminal, martingale_generator, smooth_generator, zero_generator)
from mppbsde.solver import ito_residual, picard_iterate, picard_map, solve_truncated
from mppbsde.tree import SolutionField, build_tree, simulate_on_tree, snap_history
from mppbsde.truncation import empirical_gap, nonuniqueness_demo, truncation_bound

POISSON = {"kind": "poisson", "horizon": 1.0, "marks": ["a"], "rate": 1.0}


def snapped(tree, seed):
    tj = simulate_trajectory(tree.model, seed)
    return Trajectory(snap_history(tree.grid, tj.history), tj.horizon, seed)


def test_c1_conditional_expectation_oracle(criterion):
    t0 = time.perf_counter()
    model = build_model(POISSON)
    pb = BsdeProblem(model, martingale_generator(), constant_terminal(1.0), L=1.0)
    y0 = solve_truncated(pb, build_tree(model, 2, 201)).Y0
    dt = time.perf_counter() - t0
    err = abs(y0 - 2 * math.exp(-1))
    ok = criterion("C1", err <= 5e-3 and dt < 5, f"Y0={y0:.6f} |err|={err:.2e} (tol 5e-3) time={dt:.2f}s (<5s)")
    assert ok


def test_c2_compensated_poisson_oracle(criterion):
    t0 = time.perf_counter()
    model = build_model(POISSON)
    pb = BsdeProblem(model, martingale_generator(), count_terminal(), L=1.0)
    tree = build_tree(model, 8, 201)
    sol = solve_truncated(pb, tree)
    dt = time.perf_counter() - t0
    # nodes a trajectory can visit: those with positive reach probability, on their own cells
    reach = tree.occupation(0.0)
    zdev = 0.0
    for n in range(tree.m):
        lv = tree.levels[n]
        own = lv.mask[reach[n] > 0] > 0
        zdev = max(zdev, float(np.max(np.abs(sol.z[n][reach[n] > 0][own] - 1.0), initial=0.0)))
    y_ok = abs(sol.Y0 - 1.0) <= 1e-2
    ok = criterion("C2", y_ok and zdev <= 1e-6 and dt < 30,
                   f"Y0={sol.Y0:.5f} (tol 1e-2) max|Z-1|={zdev:.3g} (tol 1e-6) time={dt:.2f}s (<30s)")
    assert ok


def test_c3_ito_identity(criterion):
    model = build_model({"kind": "poisson", "horizon": 1.0, "marks": ["a", "b"], "rate": 1.5,
                         "mark_probs": [0.3, 0.7]})
    pb = BsdeProblem(model, smooth_generator(0.2, 0.5, 0.5), last_mark_terminal("b"), L=1.5, Lprime=0.5)
    worst = []
    for g in (200, 400):
        tree = build_tree(model, 3, g)
        sol = solve_truncated(pb, tree)
        worst.append(max(abs(ito_residual(sol, snapped(tree, s), pb)) for s in range(100)))
    ratio = worst[0] / worst[1]
    ok = criterion("C3", worst[0] <= 5e-3 and ratio >= 1.3,
                   f"max residual {worst[0]:.3g} at grid 200 (tol 5e-3), {worst[1]:.3g} at 400, ratio {ratio:.2f} (>=1.3)")
    assert ok


def test_c4_picard_contraction(criterion):
    model = build_model({"kind": "poisson", "horizon": 1.0, "marks": ["a", "b"], "rate": 1.0})
    L, Lp = 1.5, 0.5
    thr = beta_threshold(2, 1.0, L, Lp)
    pb = BsdeProblem(model, smooth_generator(0.1, 0.5, 0.5), count_terminal(), L=L, Lprime=Lp, beta=1.5 * thr)
    tree = build_tree(model, 3, 101)
    ref = solve_truncated(pb, tree)
    c = pb.contraction()
    bound = 1 - (pb.beta - thr) / (2 * pb.beta)
    ratios = []
    for i in range(20):
        a, b = SolutionField.random(tree, 2 * i), SolutionField.random(tree, 2 * i + 1)
        ratios.append(equivalent_norm(picard_map(pb, tree, a) - picard_map(pb, tree, b), pb, c)
                      / equivalent_norm(a - b, pb, c))
    tr = picard_iterate(pb, tree, ref, max_iter=30, tol=1e-6)
    ok = criterion("C4", max(ratios) <= bound and tr.converged,
                   f"max ratio {max(ratios):.3g} <= {bound:.4f}; Picard sup error {tr.distances[-1]:.2e} "
                   f"after {tr.iterations} iterations (tol 1e-6, <=30)")
    assert ok


def test_c5_truncation_bound(criterion):
    model = build_model(POISSON)
    beta = 4.0
    pb = BsdeProblem(model, zero_generator(), constant_terminal(1.0), beta=beta, allow_subthreshold=True)
    zs = []
    for m in range(1, 6):
        b, se = truncation_bound(pb, m, 20_000, seed=m)
        closed = math.exp(beta) * poisson_law.sf(m - 1, 1.0)
        zs.append(abs(b - closed) / se)
    cache = {}
    gaps = [empirical_gap(pb, m, 6, 101, cache) for m in range(1, 6)]
    mono = all(b <= a for a, b in zip(gaps, gaps[1:]))
    ok = criterion("C5", max(zs) <= 3 and mono,
                   f"max |bound-closed|/se = {max(zs):.2f} (<=3); gaps {', '.join(f'{g:.3g}' for g in gaps)} "
                   f"nonincreasing={mono}")
    assert ok


def test_c6_girsanov(criterion):
    model = build_model(POISSON)
    tree = build_tree(model, 1, 11)
    zs = {}
    for r in (0.5, 1.0, 2.0):
        cp = ControlProblem(model, ["u"], np.array([[r]]), np.zeros((1, 2)), np.zeros(2), 2.0, 1.0)
        e = cost(cp, constant_control(cp, tree, 0), 100_000, seed=17)
        zs[r] = abs(e.mean_LT - 1.0) / e.LT_stderr if e.LT_stderr > 0 else (0.0 if e.mean_LT == 1.0 else math.inf)
    cp1 = ControlProblem(model, ["u"], np.ones((1, 1)), np.zeros((1, 2)), np.zeros(2), 2.0, 1.0)
    exact = all(np.all(girsanov_weight(cp1, simulate_trajectory(model, s), 0)[1] == 1.0) for s in range(200))
    ok = criterion("C6", max(zs.values()) <= 4 and exact,
                   "z-scores " + ", ".join(f"r={r}: {z:.2f}" for r, z in zs.items()) + f" (<=4); L==1 for r=1: {exact}")
    assert ok


def test_c7_verification(criterion):
    t0 = time.perf_counter()
    cp = two_action_fixture()
    sol = solve_control(cp, 4, 101)
    rep = verify_optimality(cp, sol.Y0, sol.ustar, 20, 20_000, seed=0, allowance=2e-2)
    dt = time.perf_counter() - t0
    ineq = all(c.holds for c in rep.comparisons)
    ok = criterion("C7", ineq and rep.equality_holds and dt < 60,
                   f"Y0={rep.Y0:.4f} J(u*)={rep.J_star:.4f}±{rep.J_star_stderr:.4f} "
                   f"min J(other)={min(c.J for c in rep.comparisons[1:]):.4f} inequalities={ineq} "
                   f"|Y0-J*|={rep.optimal_gap:.4f} (<= {3 * rep.J_star_stderr + 2e-2:.4f}) time={dt:.1f}s")
    assert ok


def test_c8_nonuniqueness(criterion):
    rep = nonuniqueness_demo(1.0, grid_size=1000, p=2, beta=4.0, n_trajectories=200)
    g = rep.growth_ratio(5, 8)
    ok = criterion("C8", rep.residual_zero <= 5e-3 and rep.residual_spurious <= 5e-3 and g >= 2
                   and rep.norm_zero == 0.0,
                   f"residuals {rep.residual_zero:.2e} / {rep.residual_spurious:.2e} (<=5e-3); "
                   f"norm growth k5->k8 x{g:.3g} (>=2); zero-solution norm {rep.norm_zero}")
    assert ok


def test_c9_threshold_arithmetic(criterion):
    a, b = beta_threshold(2, 1, 0, 0), feasibility_exponent(2, 2)
    ok = criterion("C9", a == 4 and b == 19, f"beta_threshold(2,1,0,0)={a!r}, exponent(2,2)={b!r}")
    assert ok
