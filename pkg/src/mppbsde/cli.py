"""`mpp-bsde` command line: config-driven runs with seeded, reproducible artifacts."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig, apply_overrides, config_hash, load_config, validate_config
from .control import random_control, solve_control, verify_optimality
from .mpp import Trajectory, simulate_trajectory
from .problem import equivalent_norm, lp_beta_norm
from .solver import apriori_check, ito_residual, picard_iterate, picard_map, solve_truncated
from .tree import SolutionField, build_tree, snap_history
from .truncation import truncation_sweep


@dataclass
class RunManifest:
    config_hash: str
    output_dir: str
    versions: dict
    timings: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    exit_code: int = 0

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _f(x):
    """JSON-safe float (nan and inf become strings)."""
    x = float(x)
    return x if np.isfinite(x) else repr(x)


class _Run:
    """Lazily shared state between stages of one experiment."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self._tree = None
        self._sol = None
        self._ctrl = None
        self.files = []

    @property
    def tree(self):
        if self._tree is None:
            s = self.cfg.solver
            self._tree = build_tree(self.cfg.model, s["m"], s["grid_size"], s["node_budget"])
        return self._tree

    @property
    def solution(self) -> SolutionField:
        if self._sol is None:
            self._sol = solve_truncated(self.cfg.problem, self.tree)
        return self._sol

    def path(self, name):
        p = self.out / name
        self.files.append(p)
        return p

    # -- stages -------------------------------------------------------------

    def solve(self):
        tree, sol = self.tree, self.solution
        sol.to_csv(self.path("solution.csv"))
        lvl_m = bool(np.all(sol.y[tree.m] == sol.u[tree.m][:, None]))
        pb = self.cfg.problem
        return {"Y0": _f(sol.Y0), "nodes": tree.node_count(), "collapsed": tree.collapsed,
                "boundary_degeneracy": tree.boundary, "beta": _f(pb.beta), "threshold": _f(pb.threshold),
                "norm": _f(lp_beta_norm(sol, pb).total), "validators": {"level_m_constant": bool(lvl_m)}}

    def validate_ito(self):
        v = self.cfg.validation
        pb = self.cfg.problem
        seeds = [self.cfg.seed + i for i in range(v["ito_trajectories"])]

        def battery(tree, sol):
            out = []
            for s in seeds:
                tj = simulate_trajectory(pb.model, s)
                h = snap_history(tree.grid, tj.history)
                out.append(ito_residual(sol, Trajectory(h, tj.horizon, s), pb))
            return np.abs(out)

        base = battery(self.tree, self.solution)
        res = {"max_residual": _f(base.max()), "mean_residual": _f(base.mean()), "tolerance": v["ito_tolerance"]}
        checks = {"residual_within_tolerance": bool(base.max() <= v["ito_tolerance"])}
        rows = [[s, repr(float(r))] for s, r in zip(seeds, base)]
        header = ["seed", "residual"]
        if v["ito_refine"]:
            s = self.cfg.solver
            fine = build_tree(pb.model, s["m"], 2 * (s["grid_size"] - 1) + 1, s["node_budget"])
            ref = battery(fine, solve_truncated(pb, fine))
            ratio = float(base.max() / ref.max()) if ref.max() > 0 else np.inf
            res.update(max_residual_refined=_f(ref.max()), refinement_ratio=_f(ratio))
            checks["refinement_ratio_at_least_1.3"] = bool(ratio >= 1.3)
            rows = [r + [repr(float(x))] for r, x in zip(rows, ref)]
            header.append("residual_refined")
        _write_csv(self.path("ito.csv"), header, rows)
        res["validators"] = checks
        return res

    def validate_apriori(self):
        pb = self.cfg.problem
        rep = apriori_check(pb, self.tree, self.solution)
        res = {"c1": _f(rep.c1), "c2": _f(rep.c2), "lhs_p4": _f(rep.lhs_p4), "data": _f(rep.data),
               "lemma_threshold": _f(rep.lemma_threshold), "c_eps": _f(rep.c_eps)}
        checks = {"finite_constants": bool(rep.passed)}
        sizes = list(self.cfg.validation["apriori_grid_sizes"])
        if sizes and not rep.degenerate:
            s = self.cfg.solver
            c2 = {}
            for g in sizes:
                t = build_tree(pb.model, s["m"], g, s["node_budget"])
                c2[g] = apriori_check(pb, t, solve_truncated(pb, t)).c2
            ref = c2[max(sizes)]
            drift = max(abs(c - ref) / abs(ref) for c in c2.values()) if ref else 0.0
            res["c2_by_grid"] = {str(k): _f(v) for k, v in c2.items()}
            res["c2_drift"] = _f(drift)
            checks["stable_under_refinement"] = bool(drift <= 0.2)
        res["validators"] = checks
        return res

    def picard_trace(self):
        pb = self.cfg.problem
        v = self.cfg.validation
        tr = picard_iterate(pb, self.tree, self.solution, v["picard_iterations"], v["picard_tolerance"])
        c = pb.contraction()
        ratios = []
        for i in range(v["picard_pairs"]):
            a = SolutionField.random(self.tree, self.cfg.seed + 2 * i)
            b = SolutionField.random(self.tree, self.cfg.seed + 2 * i + 1)
            den = equivalent_norm(a - b, pb, c)
            num = equivalent_norm(picard_map(pb, self.tree, a) - picard_map(pb, self.tree, b), pb, c)
            ratios.append(num / den)
        _write_csv(self.path("picard.csv"), ["iteration", "sup_distance", "equivalent_norm"],
                   [[i + 1, repr(d), repr(n)] for i, (d, n) in enumerate(zip(tr.distances, tr.norms))])
        bound = 1 - (pb.beta - pb.threshold) / (2 * pb.beta)
        return {"iterations": tr.iterations, "final_distance": _f(tr.distances[-1]), "alpha": _f(c.alpha),
                "max_pair_ratio": _f(max(ratios)) if ratios else None, "ratio_bound": _f(bound),
                "validators": {"converged": tr.converged,
                               "contraction": bool(all(r <= bound for r in ratios))}}

    def truncation_sweep(self):
        v = self.cfg.validation
        reps = truncation_sweep(self.cfg.problem, v["truncation_m_list"], self.cfg.solver["grid_size"],
                                v["truncation_samples"], self.cfg.seed, v.get("truncation_m_large"))
        _write_csv(self.path("truncation.csv"), ["m", "bound", "gap", "stderr"],
                   [[r.m, repr(r.bound_value), repr(r.empirical_gap), repr(r.standard_error)] for r in reps])
        bnd = all(b.bound_value <= a.bound_value + 2 * np.hypot(a.standard_error, b.standard_error)
                  for a, b in zip(reps, reps[1:]))
        gap = all(b.empirical_gap <= a.empirical_gap + 1e-12 for a, b in zip(reps, reps[1:]))
        return {"rows": [{"m": r.m, "bound": _f(r.bound_value), "gap": _f(r.empirical_gap),
                          "stderr": _f(r.standard_error)} for r in reps],
                "validators": {"bound_nonincreasing": bool(bnd), "gap_nonincreasing": bool(gap)}}

    def control_solution(self):
        if self._ctrl is None:
            raw = self.cfg.raw["control"]
            s = self.cfg.solver
            self._ctrl = solve_control(self.cfg.control, s["m"], s["grid_size"], raw.get("beta", "auto"),
                                       raw.get("eps", 0.5))
        return self._ctrl

    def control_solve(self):
        cs = self.control_solution()
        tree, u = cs.ustar.tree, cs.ustar
        acts = self.cfg.control.actions
        rows = []
        for n, lv in enumerate(tree.levels[:tree.m]):
            for b in range(len(lv)):
                for k in range(int(lv.last_idx[b]) + 1, tree.N + 1):
                    rows.append([f"{n}:{b}", repr(float(tree.grid[k])), acts[int(u.actions[n][b, k])],
                                 repr(float(u.margins[n][b, k]))])
        _write_csv(self.path("control_actions.csv"), ["node", "time", "action", "margin"], rows)
        f = cs.feasibility
        return {"Y0": _f(cs.Y0), "beta": _f(cs.problem.beta), "feasibility": {
            "exponent": _f(f.exponent), "lemma_beta": _f(f.lemma_beta), "threshold": _f(f.threshold),
            "status": f.status, "violations": f.violations},
            "validators": {"feasible": f.status == "pass"}}

    def control_verify(self):
        cs = self.control_solution()
        v = self.cfg.validation
        rep = verify_optimality(self.cfg.control, cs.Y0, cs.ustar, v["random_controls"], v["control_samples"],
                                self.cfg.seed, v["allowance"])
        _write_csv(self.path("control_verify.csv"), ["control", "J", "stderr", "holds"],
                   [[c.label, repr(c.J), repr(c.stderr), c.holds] for c in rep.comparisons + rep.perturbed])
        return {"Y0": _f(rep.Y0), "J_star": _f(rep.J_star), "J_star_stderr": _f(rep.J_star_stderr),
                "min_J": _f(min(c.J for c in rep.comparisons)),
                "comparisons": [{"control": c.label, "J": _f(c.J), "stderr": _f(c.stderr), "holds": c.holds}
                                for c in rep.comparisons + rep.perturbed],
                "violations": [c.label for c in rep.violations],
                "validators": {"Y0_below_all_costs": all(c.holds for c in rep.comparisons),
                               "Y0_matches_J_star": rep.equality_holds}}


_STAGE_FN = {"solve": "solve", "validate-ito": "validate_ito", "validate-apriori": "validate_apriori",
             "picard-trace": "picard_trace", "truncation-sweep": "truncation_sweep",
             "control-solve": "control_solve", "control-verify": "control_verify"}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Runs the configured stages, writes artifacts plus ``summary.json`` and ``manifest.json``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(config_hash(cfg.raw), str(out), {
        "mppbsde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
        "python": platform.python_version()})
    run = _Run(cfg, out)
    summary = {"config_hash": man.config_hash, "stages": {}}
    ok = True
    for stage in cfg.stages:
        t0 = time.perf_counter()
        try:
            res = getattr(run, _STAGE_FN[stage])()
            passed = all(res.get("validators", {}).values())
            man.stages[stage] = {"status": "ok", "passed": passed}
        except Exception as e:  # stage failures are recorded, not raised
            res = {"error": f"{type(e).__name__}: {e}"}
            passed = False
            man.stages[stage] = {"status": "error", "passed": False, "error": res["error"]}
        man.timings[stage] = round(time.perf_counter() - t0, 6)
        summary["stages"][stage] = res
        ok = ok and passed
    spath = out / "summary.json"
    with open(spath, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    run.files.append(spath)
    man.outputs = [{"path": p.name, "sha256": _sha256(p)} for p in run.files]
    man.exit_code = 0 if ok else 1
    man.write(out / "manifest.json")
    return man


_HEADLINE = {"solve": "Y0", "validate-ito": "max_residual", "validate-apriori": "c2", "picard-trace": "iterations",
             "truncation-sweep": None, "control-solve": "Y0", "control-verify": "J_star"}


def report_summary(manifest: RunManifest) -> str:
    """Plain-text table: one row per stage with its headline number and verdict."""
    if not manifest.stages:
        return "no stages run"
    spath = Path(manifest.output_dir) / "summary.json"
    try:
        with open(spath, encoding="utf-8") as fh:
            summary = json.load(fh)["stages"]
    except (OSError, ValueError, KeyError):
        summary = {}
    rows = [("stage", "value", "verdict")]
    for stage, info in manifest.stages.items():
        res = summary.get(stage)
        if res is None:
            rows.append((stage, "artifact missing", "FAIL"))
            continue
        if info.get("status") == "error":
            rows.append((stage, info.get("error", "error")[:60], f"FAIL (see summary.json#/stages/{stage}/error)"))
            continue
        key = _HEADLINE.get(stage)
        if key is None:
            val = "m=" + ",".join(str(r["m"]) for r in res.get("rows", []))
        else:
            x = res.get(key)
            val = f"{key}={x:.6g}" if isinstance(x, (int, float)) else f"{key}={x}"
        bad = [k for k, v in res.get("validators", {}).items() if not v]
        verdict = "PASS" if not bad else f"FAIL (see summary.json#/stages/{stage}/validators/{bad[0]})"
        rows.append((stage, val, verdict))
    w = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(c.ljust(w[i]) for i, c in enumerate(r)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * x for x in w))
    return "\n".join(lines)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpp-bsde", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, dotted path (repeatable)")
        p.add_argument("--out", help="output directory")
        return p

    add("run", "run the stages listed in the config")
    add("solve", "solve the truncated BSDE on the history tree")
    add("validate-ito", "Itô identity residuals along snapped trajectories")
    add("validate-apriori", "a priori bound ratios")
    add("picard-trace", "Picard iteration and contraction ratios")
    add("truncation-sweep", "truncation bound and gap over m").add_argument("--m-list", help="e.g. 1,2,3")
    add("control-solve", "solve the control BSDE and extract u*")
    add("control-verify", "verify optimality against other controls").add_argument(
        "--random-controls", type=int, help="number of seeded random controls")
    rp = sub.add_parser("report", help="print the summary table of a finished run")
    rp.add_argument("manifest")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.verb == "report":
        print(report_summary(RunManifest.read(args.manifest)))
        return 0
    try:
        raw = load_config(args.config, args.set)
        if args.verb != "run":
            extra = {"control-verify": ["control-verify"], "truncation-sweep": ["truncation-sweep"]}
            raw = apply_overrides(raw, [])
            raw["stages"] = extra.get(args.verb, [args.verb])
            if args.verb == "truncation-sweep" and args.m_list:
                raw.setdefault("validation", {})["truncation_m_list"] = [int(x) for x in args.m_list.split(",")]
            if args.verb == "control-verify" and args.random_controls is not None:
                raw.setdefault("validation", {})["random_controls"] = args.random_controls
        errs = validate_config(raw)
        if errs:
            for e in errs:
                print(f"config error at {e.pointer or '/'}: {e.message}", file=sys.stderr)
            return 2
        cfg = ExperimentConfig.from_dict(raw, args.out)
    except ConfigError as e:
        print(f"config error at {e.pointer or '/'}: {e.message}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return 2
    man = run_experiment(cfg)
    print(report_summary(man))
    return man.exit_code


if __name__ == "__main__":
    sys.exit(main())
