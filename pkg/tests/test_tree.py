import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mppbsde.mpp import History, build_model
from mppbsde.tree import SolutionField, TreeError, build_tree, grid_indices, simulate_on_tree, snap_history

from conftest import POISSON, UNIFORM


def test_poisson_m1_counts(poisson):
    tree = build_tree(poisson, 1, 11)
    assert tree.collapsed
    assert [len(lv) for lv in tree.levels] == [1, 10]


def test_uniform_single_jump_cell_masses(uniform_jump):
    tree = build_tree(uniform_jump, 1, 11)
    np.testing.assert_allclose(tree.levels[0].weights[0, 1:], 0.1, atol=1e-12)
    assert tree.boundary


def test_budget_error_for_unrolled_tree():
    model = build_model(dict(POISSON, marks=["a", "b", "c"]), markov=False)
    with pytest.raises(TreeError, match="budget"):
        build_tree(model, 4, 50)


def test_a2_failure_rejected():
    half = build_model(dict(UNIFORM, uniform={"upper": 0.5}))
    with pytest.raises(TreeError, match="survival"):
        build_tree(half, 1, 11)


@pytest.mark.parametrize("m, grid", [(0, 11), (1, 1)])
def test_bad_sizes(poisson, m, grid):
    with pytest.raises(TreeError):
        build_tree(poisson, m, grid)


def test_weights_sum_to_jump_probability(any_model):
    tree = build_tree(any_model, 2, 41)
    for lv in tree.levels[:-1]:
        np.testing.assert_allclose(lv.weights.sum(axis=1) + lv.survive, 1.0, atol=1e-12)


def test_collapsed_and_unrolled_trees_agree(poisson2):
    flat = build_model(dict(POISSON, marks=["a", "b"]), markov=False)
    a = build_tree(poisson2, 2, 9)
    b = build_tree(flat, 2, 9)
    assert not b.collapsed and b.node_count() > a.node_count()
    for lv in b.levels[1:]:
        for bb, h in enumerate(lv.histories):
            assert np.array_equal(lv.F[bb], a.levels[lv.n].F[a.locate(h)])


def test_occupation_is_reach_probability(any_model):
    tree = build_tree(any_model, 3, 31)
    M = tree.occupation(0.0)
    reach = np.array([m.sum() for m in M])
    assert reach[0] == 1.0
    assert reach[1] == pytest.approx(1 - tree.levels[0].survive[0], abs=1e-12)
    assert np.all(np.diff(reach) <= 1e-12)


@settings(max_examples=30)
@given(st.lists(st.floats(0.001, 1.0), max_size=5))
def test_snap_history_lands_on_grid(times):
    grid = np.linspace(0, 1, 21)
    h = History(tuple(sorted(set(times))), tuple("a" for _ in set(times)))
    s = snap_history(grid, h)
    idx = grid_indices(grid, s.times)
    assert idx == sorted(set(idx)) and all(i >= 1 for i in idx)
    assert s.depth <= h.depth


def test_simulate_on_tree_follows_children(markov):
    tree = build_tree(markov, 3, 21)
    for seed in range(20):
        traj, path = simulate_on_tree(tree, seed)
        for n, b in enumerate(path):
            assert tree.locate(traj.history.prefix(n)) == b


def test_random_field_vanishes_at_level_m(poisson):
    tree = build_tree(poisson, 2, 11)
    f = SolutionField.random(tree, 0)
    assert np.all(f.y[2] == 0) and np.all(f.z[2] == 0)
    assert np.any(f.y[0] != 0)


def test_solution_csv(tmp_path, poisson2):
    import csv

    tree = build_tree(poisson2, 1, 5)
    SolutionField.constant(tree, 1.0, 2.0).to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv", encoding="utf-8")))
    assert rows[0] == ["level", "node_id", "last_time", "last_mark", "grid_time", "y", "z[a]", "z[b]"]
    assert len(rows) - 1 == 5 + sum(5 - k for k in range(1, 5)) * 2
