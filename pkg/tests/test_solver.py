import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mppbsde.mpp import History, Trajectory, build_model, simulate_trajectory
from mppbsde.problem import (BsdeProblem, beta_threshold, Terminal, constant_terminal, count_terminal, equivalent_norm,
                             last_mark_terminal, martingale_generator, smooth_generator, zero_generator)
from mppbsde.solver import (apriori_check, ito_residual, picard_iterate, picard_map, sample_solution,
                            solve_truncated, terminal_eval)
from mppbsde.tree import SolutionField, build_tree, simulate_on_tree, snap_history

from conftest import POISSON


def mart(model, xi, **kw):
    return BsdeProblem(model, martingale_generator(), xi, L=1.0, **kw)


def snapped(tree, seed):
    tj = simulate_trajectory(tree.model, seed)
    return Trajectory(snap_history(tree.grid, tj.history), tj.horizon, seed)


@pytest.fixture(scope="module")
def smooth_case():
    model = build_model(dict(POISSON, marks=["a", "b"]))
    pb = BsdeProblem(model, smooth_generator(0.1, 0.5, 0.5), count_terminal(), L=1.5, Lprime=0.5,
                     beta=1.5 * beta_threshold(2, 1.0, 1.5, 0.5))
    tree = build_tree(model, 3, 51)
    return pb, tree, solve_truncated(pb, tree)


def test_terminal_eval(poisson):
    tree = build_tree(poisson, 2, 11)
    u = terminal_eval(mart(poisson, constant_terminal(2.5)), tree)
    assert np.all(u[1] == 2.5) and np.all(u[2] == 0.0)
    u = terminal_eval(mart(poisson, count_terminal()), tree)
    assert np.all(u[1] == 1.0)


def test_collapsed_tree_needs_markov_terminal(poisson):
    tree = build_tree(poisson, 2, 11)
    xi = Terminal(lambda h: sum(h.times), markov=False)
    with pytest.raises(ValueError, match="collapse"):
        solve_truncated(mart(poisson, xi), tree)
    flat = build_tree(poisson, 2, 11, collapse=False)
    assert np.isfinite(solve_truncated(mart(poisson, xi), flat).Y0)


def test_zero_data_gives_zero_solution(any_model):
    pb = BsdeProblem(any_model, zero_generator(), constant_terminal(0.0))
    sol = solve_truncated(pb, build_tree(any_model, 2, 21))
    assert all(np.all(y == 0) for y in sol.y) and all(np.all(z == 0) for z in sol.z)


def test_conditional_expectation_oracle(poisson):
    sol = solve_truncated(mart(poisson, constant_terminal(1.0)), build_tree(poisson, 2, 201))
    assert abs(sol.Y0 - 2 * math.exp(-1)) < 5e-3


def test_literal_zero_driver_returns_terminal(poisson):
    sol = solve_truncated(BsdeProblem(poisson, zero_generator(), constant_terminal(1.0)), build_tree(poisson, 2, 51))
    assert sol.Y0 == 1.0


def test_compensated_poisson_near_root(poisson):
    sol = solve_truncated(mart(poisson, count_terminal()), build_tree(poisson, 8, 201))
    assert abs(sol.Y0 - 1.0) < 1e-2
    assert np.max(np.abs(sol.z[0][0, 1:, 0] - 1.0)) < 1e-3


def test_level_m_is_terminal_constant(any_model):
    tree = build_tree(any_model, 3, 31)
    sol = solve_truncated(mart(any_model, last_mark_terminal(any_model.markspace.marks[0])), tree)
    assert np.all(sol.y[3] == sol.u[3][:, None])


@settings(max_examples=10, deadline=None)
@given(st.floats(-5, 5))
def test_linearity_in_terminal(c):
    model = build_model(dict(POISSON, marks=["a", "b"]))
    tree = build_tree(model, 3, 31)
    base = solve_truncated(mart(model, last_mark_terminal("a")), tree)
    scaled = solve_truncated(mart(model, Terminal(lambda h: c * (1.0 if h.marks and h.marks[-1] == "a" else 0.0))),
                             tree)
    for a, b in zip(base.y, scaled.y):
        np.testing.assert_allclose(b, c * a, atol=1e-12, rtol=0)


def test_picard_fixed_point(smooth_case):
    pb, tree, sol = smooth_case
    assert picard_map(pb, tree, sol).sup_distance(sol) < 1e-12


def test_picard_zero_data_zero_candidate(poisson):
    pb = BsdeProblem(poisson, zero_generator(), constant_terminal(0.0))
    tree = build_tree(poisson, 2, 21)
    out = picard_map(pb, tree, SolutionField.zeros(tree))
    assert all(np.all(y == 0) for y in out.y)


def test_picard_contraction_on_random_pairs(smooth_case):
    pb, tree, _ = smooth_case
    c = pb.contraction()
    bound = 1 - (pb.beta - pb.threshold) / (2 * pb.beta)
    for i in range(20):
        a, b = SolutionField.random(tree, 2 * i), SolutionField.random(tree, 2 * i + 1)
        r = equivalent_norm(picard_map(pb, tree, a) - picard_map(pb, tree, b), pb, c) / equivalent_norm(a - b, pb, c)
        assert r <= bound


def test_picard_iteration_converges(smooth_case):
    pb, tree, sol = smooth_case
    tr = picard_iterate(pb, tree, sol, max_iter=30, tol=1e-6)
    assert tr.converged and tr.iterations <= 30
    assert all(b <= a for a, b in zip(tr.norms, tr.norms[1:]))


def test_ito_residual_zero_case(poisson):
    pb = BsdeProblem(poisson, zero_generator(), constant_terminal(0.0))
    tree = build_tree(poisson, 2, 21)
    sol = solve_truncated(pb, tree)
    assert ito_residual(sol, snapped(tree, 0), pb) == 0.0


def test_ito_residual_shrinks_with_grid(poisson):
    pb = mart(poisson, constant_terminal(1.0))
    worst = []
    for g in [101, 201]:
        tree = build_tree(poisson, 3, g)
        sol = solve_truncated(pb, tree)
        worst.append(max(abs(ito_residual(sol, snapped(tree, s), pb)) for s in range(100)))
    assert worst[0] < 5e-3
    assert worst[1] / worst[0] <= 0.75


def test_sample_solution_paths(poisson):
    tree = build_tree(poisson, 8, 101)
    sol = solve_truncated(mart(poisson, count_terminal()), tree)
    p0 = sample_solution(sol, Trajectory(History(), 1.0, 0))
    assert np.array_equal(p0.y, sol.y[0][0])
    h = History((float(tree.grid[40]),), ("a",))
    p1 = sample_solution(sol, Trajectory(h, 1.0, 0))
    (k, x), = p1.jumps
    assert p1.y[k] - p1.y_left[k] == pytest.approx(1.0, abs=2e-3)
    assert p1.jump_errors() == [0.0]


def test_jump_identity_exact_for_solved_fields(markov):
    tree = build_tree(markov, 3, 41)
    pb = BsdeProblem(markov, smooth_generator(0.3, 0.4, -0.6), count_terminal(), L=1.6, Lprime=0.4)
    f = solve_truncated(pb, tree)
    for s in range(30):
        traj, _ = simulate_on_tree(tree, s)
        assert all(e == 0.0 for e in sample_solution(f, traj).jump_errors())


def test_sample_solution_rejects_off_grid(poisson):
    tree = build_tree(poisson, 2, 11)
    sol = SolutionField.zeros(tree)
    with pytest.raises(ValueError):
        sample_solution(sol, Trajectory(History((0.123,), ("a",)), 1.0, 0))


def test_apriori_degenerate(poisson):
    pb = BsdeProblem(poisson, zero_generator(), constant_terminal(0.0))
    tree = build_tree(poisson, 2, 21)
    rep = apriori_check(pb, tree, solve_truncated(pb, tree))
    assert rep.degenerate and rep.passed and math.isnan(rep.c1)


def test_apriori_homogeneous_in_terminal(poisson):
    tree = build_tree(poisson, 3, 51)
    reps = []
    for c in [1.0, 3.0]:
        pb = BsdeProblem(poisson, martingale_generator(), constant_terminal(c), p=3, L=1.0)
        reps.append(apriori_check(pb, tree, solve_truncated(pb, tree)))
    a, b = reps
    assert b.data == pytest.approx(27 * a.data, rel=1e-12)
    assert b.lhs_p4 == pytest.approx(27 * a.lhs_p4, rel=1e-12)
    assert b.c2 == pytest.approx(a.c2, rel=1e-12) and np.isfinite(a.c2)


def test_grid_refinement_order(poisson):
    pb = mart(poisson, constant_terminal(1.0))
    exact = 2 * math.exp(-1)
    e1, e2 = (abs(solve_truncated(pb, build_tree(poisson, 2, g)).Y0 - exact) for g in (101, 201))
    assert math.log2(e1 / e2) >= 0.9


def test_tree_expectation_matches_simulation(markov):
    tree = build_tree(markov, 3, 41)
    xi = last_mark_terminal("up")
    sol = solve_truncated(mart(markov, xi), tree)
    vals = []
    for s in range(4000):
        traj, _ = simulate_on_tree(tree, s)
        vals.append(xi(traj.history) if traj.history.depth < 3 else 0.0)
    vals = np.asarray(vals, dtype=float)
    assert abs(vals.mean() - sol.Y0) <= 4 * vals.std(ddof=1) / math.sqrt(len(vals))
