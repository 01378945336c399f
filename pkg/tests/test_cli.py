import csv
import io
import json
import math
import subprocess
import sys
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from hmmlab import cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg) if not isinstance(cfg, str) else cfg)
    return str(path)


SMALL_COUNTER = {
    "experiment": "rm13-small", "command": "counterexample", "model": {"name": "remark13"},
    "seed": 5, "replicates": 3, "schedule": [200, 1000],
    "options": {"x0": [1, 2], "init": {"kind": "point", "point": 0}, "per_dim": 9},
}

SMALL_CONSISTENCY = {
    "experiment": "g2", "command": "consistency", "model": {"name": "gaussian_2state"},
    "seed": 11, "replicates": 4, "schedule": [50, 100], "options": {"per_dim": 9},
}


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_bundled_configs_validate(name):
    assert cli.validate(str(CONFIGS / name)) == []


def test_theta_star_outside_box_names_coordinate(tmp_path):
    cfg = dict(SMALL_CONSISTENCY, theta_star=[0.0, 7.5])
    problems = cli.validate(write(tmp_path, cfg))
    assert any("theta[1]" in p for p in problems)


def test_decreasing_schedule_is_reported(tmp_path):
    cfg = dict(SMALL_CONSISTENCY, schedule=[100, 50])
    assert any("schedule" in p for p in cli.validate(write(tmp_path, cfg)))


def test_unknown_key_and_bad_tolerance(tmp_path):
    assert cli.validate(write(tmp_path, dict(SMALL_CONSISTENCY, colour="red")))
    cfg = dict(SMALL_CONSISTENCY, options={"tol": 0})
    assert any("tol" in p for p in cli.validate(write(tmp_path, cfg)))


def test_malformed_json_exit_2_without_output(tmp_path):
    out = tmp_path / "out.csv"
    assert cli.main(["run", "--config", write(tmp_path, "{not json"), "--out", str(out)]) == 2
    assert not out.exists()
    assert list(tmp_path.glob(".lab-*")) == []


def test_schema_violation_exit_2(tmp_path):
    out = tmp_path / "out.csv"
    cfg = dict(SMALL_CONSISTENCY, seed=-1)
    assert cli.main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 2
    assert not out.exists()


def test_runtime_failure_exit_1(tmp_path):
    out = tmp_path / "out.csv"
    cfg = {"command": "loglik", "model": {"name": "stochvol"}, "seed": 1, "replicates": 1,
           "schedule": [50], "options": {"grid": {"lo": -0.5, "hi": 0.5, "m": 50}}}
    assert cli.main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 1
    assert not out.exists()


def test_counterexample_csv_format(tmp_path):
    out = tmp_path / "out.csv"
    assert cli.main(["run", "--config", write(tmp_path, SMALL_COUNTER), "--out", str(out)]) == 0
    raw = out.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    rows = list(csv.DictReader(io.StringIO(raw.decode())))
    assert list(rows[0]) == ["experiment", "replicate", "x0", "n", "theta_hat"]
    assert len(rows) == 2 * 3 * 2
    assert {r["x0"] for r in rows} == {"1", "2"}
    for r in rows:
        value = r["theta_hat"]
        assert "," not in value and float(value) == float("%.17g" % float(value))
        assert 0.5 <= float(value) <= 0.9


def test_parallelism_byte_identical(tmp_path):
    cfg = write(tmp_path, SMALL_CONSISTENCY)
    a, b, c = (tmp_path / f"{k}.csv" for k in "abc")
    assert cli.main(["run", "--config", cfg, "--out", str(a), "--parallelism", "1"]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(b), "--parallelism", "8"]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(c)]) == 0
    assert a.read_bytes() == b.read_bytes() == c.read_bytes()


def test_env_default_parallelism(tmp_path, monkeypatch):
    cfg = write(tmp_path, SMALL_CONSISTENCY)
    out = tmp_path / "o.csv"
    monkeypatch.setenv("LAB_DEFAULT_PARALLELISM", "3")
    assert cli._default_parallelism() == 3
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 0
    monkeypatch.setenv("LAB_DEFAULT_PARALLELISM", "many")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "p.csv")]) == 2


def test_strict_mode(tmp_path, capsys):
    good = write(tmp_path, SMALL_CONSISTENCY, "good.json")
    assert cli.main(["run", "--config", good, "--out", str(tmp_path / "g.csv"), "--strict"]) == 0
    bad = {"command": "simulate", "model": {"name": "finite", "params": {
        "trans": [[1, 0], [0, 1]], "emit": [[0.5, 0.5], [0.2, 0.8]]}}, "seed": 1, "schedule": [10]}
    out = tmp_path / "b.csv"
    assert cli.main(["run", "--config", write(tmp_path, bad, "bad.json"), "--out", str(out)]) == 0
    out.unlink()
    assert cli.main(["run", "--config", write(tmp_path, bad, "bad.json"), "--out", str(out), "--strict"]) == 1
    assert not out.exists()
    assert "F1" in capsys.readouterr().err


def test_validate_command_and_module_entry(tmp_path):
    path = write(tmp_path, SMALL_CONSISTENCY)
    res = subprocess.run([sys.executable, "-m", "hmmlab.cli", "validate", "--config", path],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout == ""
    bad = write(tmp_path, dict(SMALL_CONSISTENCY, schedule=[3, 2]), "bad.json")
    res = subprocess.run([sys.executable, "-m", "hmmlab.cli", "validate", "--config", bad],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "schedule" in res.stdout


@pytest.mark.parametrize("name", ["gaussian_lemma6.json", "stochvol.json"])
def test_bundled_runs_are_reproducible(tmp_path, name):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cfg = str(CONFIGS / name)
    assert cli.main(["run", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(b), "--parallelism", "4"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_nan_sentinel_in_improper_head(tmp_path):
    params = {"A": [[0.5, 0.1, 0.0], [0.0, 0.4, 0.2], [0.1, 0.0, 0.3]],
              "R": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "B": [[1, 0, 0]], "S": [[1]]}
    cfg = {"command": "loglik", "model": {"name": "linear_gaussian", "params": params},
           "seed": 3, "replicates": 1, "schedule": [1, 2, 4], "options": {"init": {"kind": "lambda"}}}
    out = tmp_path / "o.csv"
    assert cli.main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["loglik"] == "nan" for r in rows] == [True, False, False]
    assert all(v != "" for r in rows for v in r.values())


@given(st.floats(allow_nan=True, allow_infinity=False))
def test_cell_round_trips_reals(v):
    text = cli._cell(v)
    if math.isnan(v):
        assert text == "nan"
    else:
        assert float(text) == v and "," not in text and " " not in text
