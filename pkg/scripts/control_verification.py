"""Solve the two-action control fixture and compare Y0 with Monte Carlo costs."""

import argparse

from mppbsde.control import solve_control, two_action_fixture, verify_optimality


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=int, default=4)
    ap.add_argument("--grid", type=int, default=101)
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--random-controls", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cp = two_action_fixture()
    sol = solve_control(cp, args.m, args.grid)
    rep = verify_optimality(cp, sol.Y0, sol.ustar, args.random_controls, args.samples, args.seed)
    print(f"Y0 = {rep.Y0:.5f}   J(u*) = {rep.J_star:.5f} ± {rep.J_star_stderr:.5f}   "
          f"feasibility: {sol.feasibility.status}")
    for c in rep.comparisons + rep.perturbed:
        print(f"  {c.label:18s} J = {c.J:.5f} ± {c.stderr:.5f}  {'ok' if c.holds else 'VIOLATED'}")
    print("verdict:", "PASS" if rep.passed else "FAIL")


if __name__ == "__main__":
    main()
