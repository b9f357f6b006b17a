import csv
import json
import time
from pathlib import Path

import pytest

from mppbsde.cli import RunManifest, main, report_summary, run_experiment
from mppbsde.config import ConfigError, ExperimentConfig, apply_overrides, config_hash, load_config, validate_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = {
    "seed": 1,
    "model": {"kind": "poisson", "horizon": 1.0, "marks": ["a"], "rate": 1.0},
    "problem": {"terminal": {"name": "constant", "value": 1.0}},
    "solver": {"m": 2, "grid_size": 51},
    "validation": {"ito_trajectories": 10, "picard_pairs": 2},
    "stages": ["solve", "validate-ito"],
}


def run(cfg, tmp_path, name="out"):
    return run_experiment(ExperimentConfig.from_dict(cfg, str(tmp_path / name)))


def test_minimal_solve_manifest(tmp_path):
    man = run(MINIMAL, tmp_path)
    names = [o["path"] for o in man.outputs]
    assert "solution.csv" in names and "summary.json" in names
    assert man.exit_code == 0 and man.config_hash == config_hash(MINIMAL)
    assert set(man.versions) == {"mppbsde", "numpy", "scipy", "python"}
    assert set(man.timings) == {"solve", "validate-ito"}
    on_disk = RunManifest.read(tmp_path / "out" / "manifest.json")
    assert on_disk.outputs == man.outputs


def test_rerun_is_bit_identical(tmp_path):
    a = run(MINIMAL, tmp_path, "a")
    b = run(MINIMAL, tmp_path, "b")
    assert a.outputs == b.outputs


def test_hash_ignores_key_order():
    shuffled = dict(reversed(list(MINIMAL.items())))
    assert config_hash(shuffled) == config_hash(MINIMAL)
    assert config_hash(apply_overrides(MINIMAL, ["seed=2"])) != config_hash(MINIMAL)


def test_missing_seed_names_field():
    cfg = {k: v for k, v in MINIMAL.items() if k != "seed"}
    errs = validate_config(cfg)
    assert [e.pointer for e in errs] == ["/seed"]
    with pytest.raises(ConfigError) as ei:
        ExperimentConfig.from_dict(cfg)
    assert ei.value.pointer == "/seed"


def test_nested_schema_pointer():
    cfg = apply_overrides(MINIMAL, ["solver.grid_size=1", "problem.generator.name=\"nope\""])
    pointers = {e.pointer for e in validate_config(cfg)}
    assert {"/solver/grid_size", "/problem/generator/name"} <= pointers


def test_unknown_builtin_rejected():
    cfg = apply_overrides(MINIMAL, ['problem.terminal={"name": "last-mark"}'])
    with pytest.raises(ConfigError) as ei:
        ExperimentConfig.from_dict(cfg)
    assert ei.value.pointer == "/problem/terminal/mark"


def test_overrides_parse_json_values():
    cfg = apply_overrides(MINIMAL, ["solver.m=4", "name=abc", "validation.ito_refine=true"])
    assert cfg["solver"]["m"] == 4 and cfg["name"] == "abc" and cfg["validation"]["ito_refine"] is True
    assert MINIMAL["solver"]["m"] == 2
    with pytest.raises(ConfigError):
        apply_overrides(MINIMAL, ["no-equals-sign"])


def test_csv_is_rfc4180(tmp_path):
    run(MINIMAL, tmp_path)
    raw = (tmp_path / "out" / "solution.csv").read_bytes()
    assert b"\r\n" in raw
    rows = list(csv.reader(raw.decode("utf-8").splitlines()))
    assert rows[0][:2] == ["level", "node_id"] and all(len(r) == len(rows[0]) for r in rows)


def test_report_contains_y0_and_ito_verdict(tmp_path):
    text = report_summary(run(MINIMAL, tmp_path))
    assert "Y0=" in text
    line = next(l for l in text.splitlines() if l.startswith("validate-ito"))
    assert line.rstrip().endswith("PASS")


def test_failed_validator_gives_fail_row_and_exit_code(tmp_path):
    cfg = apply_overrides(MINIMAL, ["validation.ito_tolerance=1e-12"])
    man = run(cfg, tmp_path)
    assert man.exit_code == 1
    line = next(l for l in report_summary(man).splitlines() if l.startswith("validate-ito"))
    assert "FAIL" in line and "summary.json#/stages/validate-ito/validators/" in line


def test_failed_apriori_row(tmp_path):
    cfg = apply_overrides(MINIMAL, ["stages=[\"validate-apriori\"]", "problem.beta=3.0",
                                    "problem.allow_subthreshold=true"])
    man = run(cfg, tmp_path)
    line = next(l for l in report_summary(man).splitlines() if l.startswith("validate-apriori"))
    assert "FAIL" in line and "#/stages/validate-apriori/" in line
    assert man.exit_code == 1


def test_stage_error_recorded(tmp_path):
    cfg = apply_overrides(MINIMAL, ["solver.node_budget=3"])
    man = run(cfg, tmp_path)
    assert man.stages["solve"]["status"] == "error" and man.exit_code == 1
    assert "FAIL" in report_summary(man)


def test_empty_manifest():
    assert report_summary(RunManifest("x", "/nonexistent", {})) == "no stages run"


def test_missing_artifacts_reported(tmp_path):
    man = run(MINIMAL, tmp_path)
    (tmp_path / "out" / "summary.json").unlink()
    assert "artifact missing" in report_summary(man)


def test_main_exit_codes(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(MINIMAL))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 0
    assert main(["run", str(path), "--set", "validation.ito_tolerance=1e-12", "--out", str(tmp_path / "p")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({k: v for k, v in MINIMAL.items() if k != "seed"}))
    assert main(["run", str(bad)]) == 2
    assert "/seed" in capsys.readouterr().err


def test_verbs_select_single_stage(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(MINIMAL))
    assert main(["solve", str(path), "--out", str(tmp_path / "s")]) == 0
    assert list(RunManifest.read(tmp_path / "s" / "manifest.json").stages) == ["solve"]
    cfg = apply_overrides(MINIMAL, ["problem.generator={\"name\": \"zero\"}", "problem.L=0", "problem.beta=4",
                                    "problem.allow_subthreshold=true"])
    path.write_text(json.dumps(cfg))
    assert main(["truncation-sweep", str(path), "--m-list", "1,2", "--set", "validation.truncation_samples=500",
                 "--out", str(tmp_path / "t")]) == 0
    rows = list(csv.reader(open(tmp_path / "t" / "truncation.csv", encoding="utf-8")))
    assert rows[0] == ["m", "bound", "gap", "stderr"] and [r[0] for r in rows[1:]] == ["1", "2"]


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_run_quickly(path, tmp_path):
    t0 = time.perf_counter()
    man = run_experiment(ExperimentConfig.from_dict(load_config(path), str(tmp_path / path.stem)))
    assert time.perf_counter() - t0 < 60
    assert man.exit_code == 0, man.stages
