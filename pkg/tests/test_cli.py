import json
import subprocess
import sys

import numpy as np
import pytest

from aetcopt.cli import main

from oracles import grid_allocation_2lf


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def run_spec(tmp_path):
    return _write(
        tmp_path / "exp.json",
        {
            "version": 1,
            "ensemble": "elasticity_surrogate",
            "budgets": [1e5],
            "estimators": ["MC", "AETC"],
            "trials": 3,
            "seed": 4,
        },
    )


def test_run_writes_outputs(tmp_path, run_spec, capsys):
    out = tmp_path / "res"
    assert main(["run", "--spec", run_spec, "--out", str(out)]) == 0
    for name in ("results.csv", "summary.json", "manifest.json"):
        assert (out / name).is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 4 and len(manifest["spec_sha256"]) == 64 and "version" in manifest
    first = (out / "results.csv").read_bytes()
    assert main(["run", "--spec", run_spec, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "results.csv").read_bytes() == first
    assert main(["run", "--spec", run_spec, "--out", str(tmp_path / "w2"), "--workers", "2"]) == 0
    assert (tmp_path / "w2" / "results.csv").read_bytes() == first


def test_run_refuses_overwrite(tmp_path, run_spec, capsys):
    out = str(tmp_path / "res")
    assert main(["run", "--spec", run_spec, "--out", out]) == 0
    assert main(["run", "--spec", run_spec, "--out", out]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["run", "--spec", run_spec, "--out", out, "--force"]) == 0


def test_seed_overrides(tmp_path, run_spec, monkeypatch):
    base = tmp_path / "a"
    main(["run", "--spec", run_spec, "--out", str(base), "--seed", "9"])
    monkeypatch.setenv("AETCOPT_SEED", "9")
    main(["run", "--spec", run_spec, "--out", str(tmp_path / "b")])
    assert (base / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 9
    monkeypatch.setenv("AETCOPT_SEED", "not-a-number")
    assert main(["run", "--spec", run_spec, "--out", str(tmp_path / "c")]) == 2


def test_run_missing_fixture(tmp_path, capsys):
    spec = _write(tmp_path / "s.json", {"version": 1, "ensemble": str(tmp_path / "gone.json"), "budgets": [10.0]})
    assert main(["run", "--spec", spec, "--out", str(tmp_path / "o")]) == 1
    assert "gone.json" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv_tail, body",
    [
        ([], {"version": 1, "ensemble": "elasticity_surrogate", "budgets": [10.0], "typo": 1}),
        ([], {"version": 7, "ensemble": "elasticity_surrogate", "budgets": [10.0]}),
        (["--workers", "0"], {"version": 1, "ensemble": "elasticity_surrogate", "budgets": [10.0]}),
    ],
)
def test_run_usage_errors(tmp_path, argv_tail, body):
    spec = _write(tmp_path / "s.json", body)
    assert main(["run", "--spec", spec, "--out", str(tmp_path / "o"), *argv_tail]) == 2


def test_usage_errors_without_spec(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path)]) == 2
    assert main(["alloc", "--spec", str(tmp_path / "missing.json")]) == 2
    assert main(["nonsense"]) == 2
    assert main(["run", "--seed", "x"]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["alloc", "--spec", str(tmp_path / "bad.json")]) == 2


def _alloc_rows(text):
    rows = {}
    for line in text.strip().splitlines()[1:]:
        key, rest = line.rsplit(",", 2)[0], line.rsplit(",", 2)[1:]
        rows[key.strip('"')] = rest
    return rows


def test_alloc_single_group(tmp_path, capsys):
    spec = _write(
        tmp_path / "a.json",
        {"version": 1, "covariance": [[2.0]], "costs": [0.5], "budget": 10.0, "sketch": [1.0], "groups": ["{0}"]},
    )
    assert main(["alloc", "--spec", spec]) == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert lines[0] == "group,continuous,rounded"
    assert lines[1] == '"{0}",20.0,20'
    assert float(lines[2].split(",")[1]) == pytest.approx(2.0 / 20)


def test_alloc_matches_grid_oracle(tmp_path, capsys):
    cov = np.array([[1.3, 0.7], [0.7, 0.9]])
    b = [0.8, -0.4]
    spec = _write(
        tmp_path / "a.json",
        {
            "version": 1,
            "covariance": cov.tolist(),
            "costs": [4.0, 1.0],
            "indices": [1, 2],
            "budget": 1.0,
            "sketch": b,
            "groups": ["{1}", "{2}", "{1,2}"],
            "integer": False,
        },
    )
    assert main(["alloc", "--spec", spec]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    obj = float(lines[-2].split(",")[1])
    assert obj == pytest.approx(grid_allocation_2lf(cov, [4.0, 1.0], np.array(b)), rel=0.005)
    assert float(lines[-1].split(",")[1]) <= 1e-7


def test_alloc_infeasible_integer(tmp_path, capsys):
    spec = _write(
        tmp_path / "a.json",
        {"version": 1, "covariance": [[1.0, 0.5], [0.5, 1.0]], "costs": [10.0, 10.0], "budget": 5.0, "sketch": [1.0, 0.0]},
    )
    assert main(["alloc", "--spec", spec]) == 1
    assert "Infeasible" in capsys.readouterr().err


def test_loss_and_landscape(tmp_path, capsys):
    spec = _write(
        tmp_path / "l.json",
        {"version": 1, "ensemble": "elasticity_surrogate", "subset": "{1,2,3,4}", "budget": 2e6, "q_grid": [10, 100, 200]},
    )
    assert main(["loss", "--spec", spec]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "q,oracle_loss,estimated_loss" and len(lines) == 4
    assert main(["loss", "--spec", spec, "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "loss.csv").read_text().splitlines() == lines
    capsys.readouterr()

    spec = _write(tmp_path / "d.json", {"version": 1, "ensemble": "elasticity_surrogate", "budget": 2e6})
    assert main(["landscape", "--spec", spec]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 16 and lines[1].startswith('"{1,2,3,4}"')


def test_fixtures(tmp_path, capsys):
    assert main(["fixtures"]) == 0
    assert capsys.readouterr().out.split() == ["elasticity_surrogate", "ice_sheet_costs"]
    assert main(["fixtures", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "elasticity_surrogate.json").is_file()
    assert main(["fixtures", "--out", str(tmp_path)]) == 2
    # an exported fixture is usable as a file reference
    spec = _write(tmp_path / "d.json", {"version": 1, "ensemble": "elasticity_surrogate.json", "budget": 2e6, "pool": ["{1}"]})
    assert main(["landscape", "--spec", spec]) == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "aetcopt", "fixtures"], capture_output=True, text=True)
    assert r.returncode == 0 and "elasticity_surrogate" in r.stdout
    r = subprocess.run([sys.executable, "-m", "aetcopt", "run", "--spec"], capture_output=True, text=True)
    assert r.returncode == 2
