import math

import numpy as np
import pytest
from scipy.stats import poisson as poisson_law

from mppbsde.problem import BsdeProblem, constant_terminal, count_terminal, martingale_generator, zero_generator
from mppbsde.solver import solve_truncated
from mppbsde.tree import build_tree
from mppbsde.truncation import (empirical_gap, extend_field, fit_kappa, nonuniqueness_demo, truncation_bound,
                                truncation_sweep)


@pytest.fixture(scope="module")
def unit_problem(request):
    from mppbsde.mpp import build_model
    from conftest import POISSON

    model = build_model(POISSON)
    return BsdeProblem(model, zero_generator(), constant_terminal(1.0), beta=4.0, allow_subthreshold=True)


def test_bound_poisson_tail(unit_problem):
    b, se = truncation_bound(unit_problem, 2, 10_000, seed=0)
    closed = math.exp(4) * (1 - 2 * math.exp(-1))
    assert closed == pytest.approx(14.4271, abs=1e-4)
    assert abs(b - closed) <= 3 * se


def test_bound_zero_data(poisson):
    pb = BsdeProblem(poisson, zero_generator(), constant_terminal(0.0))
    assert all(truncation_bound(pb, m, 500)[0] == 0.0 for m in (1, 2, 3))


def test_bound_includes_driver_term(poisson):
    pb = BsdeProblem(poisson, martingale_generator(), constant_terminal(0.0), L=1.0, beta=0.0,
                     allow_subthreshold=True)
    assert truncation_bound(pb, 1, 200)[0] == 0.0  # f(., 0, 0) = 0 for the compensated driver


def test_bound_decreases_to_zero(unit_problem):
    vals = [truncation_bound(unit_problem, m, 4000, seed=m)[0] for m in range(1, 9)]
    assert all(b < a for a, b in zip(vals, vals[1:]) if a > 0)
    assert vals[-1] < 1e-2 * vals[0]


def test_gap_trivial_cases(poisson, unit_problem):
    assert empirical_gap(unit_problem, 3, 3, 51) == 0.0
    pb0 = BsdeProblem(poisson, zero_generator(), constant_terminal(0.0))
    assert empirical_gap(pb0, 1, 4, 51) == 0.0


def test_gap_decreases(poisson):
    pb = BsdeProblem(poisson, martingale_generator(), constant_terminal(1.0), L=1.0)
    cache = {}
    g1 = empirical_gap(pb, 1, 4, 51, cache)
    g2 = empirical_gap(pb, 2, 4, 51, cache)
    assert g1 > g2 > 0


def test_extend_field_keeps_lower_levels(poisson2):
    pb = BsdeProblem(poisson2, martingale_generator(), count_terminal(), L=1.0)
    small = solve_truncated(pb, build_tree(poisson2, 2, 21))
    big = build_tree(poisson2, 4, 21)
    ext = extend_field(small, big)
    assert np.array_equal(ext.y[1][:len(small.y[1])], small.y[1])
    assert np.all(ext.y[2] == 0) and np.all(ext.y[3] == 0)
    with pytest.raises(ValueError):
        extend_field(small, build_tree(poisson2, 4, 31))


def test_sweep_shape(unit_problem):
    reps = truncation_sweep(unit_problem, [1, 2, 3, 4, 5], grid_size=51, n_samples=5000, seed=2, m_large=6)
    for a, b in zip(reps, reps[1:]):
        assert b.bound_value <= a.bound_value + 2 * math.hypot(a.standard_error, b.standard_error)
        assert b.empirical_gap <= a.empirical_gap
    kappa = fit_kappa(reps[:3])
    assert all(r.empirical_gap <= 2 * kappa * r.bound_value for r in reps[3:])


def test_nonuniqueness_w_zero():
    rep = nonuniqueness_demo(0.0, grid_size=200, n_trajectories=50)
    assert rep.residual_spurious == 0.0 and rep.norm_zero == 0.0
    assert all(q == 0.0 for _, _, q, _ in rep.growth)


def test_nonuniqueness_growth():
    rep = nonuniqueness_demo(1.0, grid_size=1000, n_trajectories=100)
    assert rep.residual_spurious < 5e-3 and rep.residual_zero == 0.0
    for k in range(5, 10):
        assert rep.growth_ratio(k, k + 1) >= 2
    for _, _, q, exact in rep.growth:
        assert q == pytest.approx(exact, rel=1e-3)
