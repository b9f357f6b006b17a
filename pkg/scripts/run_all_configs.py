"""Run every shipped config under configs/ and print one verdict line each."""

import argparse
import time
from pathlib import Path

from mppbsde.cli import run_experiment
from mppbsde.config import ExperimentConfig, load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs", help="parent directory for run outputs")
    args = ap.parse_args()
    worst = 0
    for path in sorted((ROOT / "configs").glob("*.json")):
        cfg = ExperimentConfig.from_dict(load_config(path), str(Path(args.out) / path.stem))
        t0 = time.perf_counter()
        man = run_experiment(cfg)
        dt = time.perf_counter() - t0
        worst = max(worst, man.exit_code)
        print(f"{path.stem:24s} exit={man.exit_code} {dt:6.2f}s")
    raise SystemExit(worst)


if __name__ == "__main__":
    main()
