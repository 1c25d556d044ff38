import csv
import json
import subprocess
import sys

import pytest

from halfspace_be.cli import run_command


def run(tmp_path, *argv):
    return run_command(list(argv) + ["--out", str(tmp_path)])


def test_roots_report(tmp_path):
    assert run(tmp_path, "roots", "--a", "1", "--beta", "1", "--lam", "3+4j", "--xi-prime", "1") == 0
    rep = json.loads((tmp_path / "roots.json").read_text())
    assert rep["schema_version"] and "wave_numbers" in rep["report"]
    assert (tmp_path / "run.log").exists()


def test_verify_residual_exit0(tmp_path):
    assert run(tmp_path, "verify", "residual", "--a", "1", "--beta", "1", "--n", "40") == 0
    rows = list(csv.DictReader(open(tmp_path / "verify_residual.csv")))
    assert len(rows) == 40 and max(float(r["residual"]) for r in rows) < 1e-9


def test_scan_nonvanishing_csv(tmp_path):
    code = run(tmp_path, "scan", "nonvanishing", "--a", "1", "--beta", "1", "--theta", "1.2",
               "--r", "1", "--level", "2")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "scan_nonvanishing.csv")))
    vals = {(r["level"], r["quantity"]): float(r["value"]) for r in rows}
    assert all(v > 0 for v in vals.values())
    assert ("3", "min_abs_F_a") in vals


def test_floor_violation_exit1(tmp_path):
    code = run(tmp_path, "scan", "nonvanishing", "--a", "1", "--beta", "1", "--level", "1",
               "--floor", "10")
    assert code == 1


def test_malformed_config_exit2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"params": {"a": 1}, "bogus": 3}))
    assert run(tmp_path, "verify", "residual", "--config", str(cfg)) == 2
    assert "bogus" in capsys.readouterr().err
    cfg.write_text(json.dumps({"params": {"a": "one"}}))
    assert run(tmp_path, "verify", "residual", "--config", str(cfg)) == 2
    assert "'params.a'" in capsys.readouterr().err
    assert run(tmp_path, "verify", "residual", "--beta", "x") == 2


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"params": {"a": 2.0, "beta": 0.5}, "lam": "2j"}))
    assert run(tmp_path, "roots", "--config", str(cfg), "--beta", "1") == 0
    rep = json.loads((tmp_path / "roots.json").read_text())
    assert rep["config"]["params"]["a"] == 2.0 and rep["config"]["params"]["beta"] == 1.0


@pytest.mark.parametrize("argv,files", [
    (("verify", "residual", "--n", "20", "--seed", "3"), ("verify_residual.json", "verify_residual.csv")),
    (("roots", "--lam", "i", "--xi-prime", "0.5"), ("roots.json",)),
])
def test_deterministic_outputs(tmp_path, argv, files):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert run_command(list(argv) + ["--out", str(d)]) == 0
        outs.append([(d / f).read_bytes().replace(str(d).encode(), b"OUT") for f in files])
    assert outs[0] == outs[1]


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "halfspace_be.cli", "roots", "--lam", "1+1j",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and "z1" in r.stdout
