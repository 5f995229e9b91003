import json
import shutil
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from taukit.cli import load_schema, main

RUNNING = "id,x,y,t,status\nA,0,0,0,case\nB,1,0,1,case\nC,2,0,50,case\nD,10,0,100,case\n"


@pytest.fixture(scope="module")
def cases(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(d), "--seed", "3", "--set", "initial_cases=10",
                 "--set", "max_cases=250", "--set", "seed_window=20"]) == 0
    return d / "cases.csv"


@pytest.fixture(scope="module")
def panel(tmp_path_factory):
    d = tmp_path_factory.mktemp("panel")
    (d / "p.csv").write_text("id,entry,exit,x,y\nP1,0,100,0,0\nP2,0,100,10,0\nP3,0,100,400,0\n"
                             "P4,0,100,5,5\nP5,0,100,300,300\n")
    (d / "e.csv").write_text("person_id,onset,recovery\nP1,5,10\nP2,8,14\nP4,12,15\nP3,40,45\n"
                             "P5,70,72\n")
    return d / "p.csv", d / "e.csv"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def result(d):
    return json.loads((Path(d) / "result.json").read_text())


def validate(d):
    doc = result(d)
    jsonschema.validate(doc, load_schema())
    return doc


def test_tau_example(cases, tmp_path, capsys):
    code, out, _ = run(["tau", "--cases", cases, "--bands", "width:500:10", "--relate", "0:5",
                        "--estimator", "odds", "--R", 50, "--seed", 42, "--out", tmp_path], capsys)
    assert code == 0
    assert json.loads(out)["status"] == "ok"
    for name in ("curve.csv", "result.json", "curve.svg", "curve_plot.csv"):
        assert (tmp_path / name).exists()
    doc = validate(tmp_path)
    assert doc["estimator"] == "odds" and len(doc["tau"]) == 10
    assert doc["meta"] == {"seed": 42, "R": 50, "rng": doc["rng"], "version": doc["version"]}
    assert doc["envelope"]["level"] == 0.95
    assert doc["warnings"] == []
    svg = (tmp_path / "curve.svg").read_text()
    for token in ("estimator=odds", "R=50", "level=0.95", "[0, 5]"):
        assert token in svg


def test_tau_running_example_value(tmp_path, capsys):
    (tmp_path / "c.csv").write_text(RUNNING)
    code, _, _ = run(["tau", "--cases", tmp_path / "c.csv", "--bands", "width:4:2", "--out",
                      tmp_path / "o", "--format", "json"], capsys)
    assert code == 0
    doc = validate(tmp_path / "o")
    assert doc["tau"][0] == 5.0
    assert not (tmp_path / "o" / "curve.csv").exists()


def test_rate_without_episodes_is_config_error(cases, tmp_path, capsys):
    code, out, err = run(["tau", "--cases", cases, "--estimator", "rate", "--out", tmp_path / "o"], capsys)
    assert code == 2
    e = json.loads(err)
    assert e["exit_code"] == 2 and "episodes" in e["message"]
    assert not (tmp_path / "o" / "result.json").exists()


def test_rate_estimator(panel, tmp_path, capsys):
    persons, episodes = panel
    code, _, err = run(["tau", "--persons", persons, "--episodes", episodes, "--estimator", "rate",
                        "--bands", "width:50:2", "--relate", "0:10", "--out", tmp_path], capsys)
    assert code == 0, err
    doc = validate(tmp_path)
    assert doc["estimator"] == "rate"


def test_map_example(cases, tmp_path, capsys):
    code, _, err = run(["map", "--cases", cases, "--dbands", "width:1000:20", "--tbands", "width:180:12",
                        "--out", tmp_path], capsys)
    assert code == 0, err
    for name in ("map.csv", "heatmap.svg", "heatmap_plot.csv", "result.json"):
        assert (tmp_path / name).exists()
    doc = validate(tmp_path)
    assert len(doc["map"]["tau"]) == 20 and len(doc["map"]["tau"][0]) == 12


def test_range_and_test(cases, tmp_path, capsys):
    code, _, err = run(["range", "--cases", cases, "--bands", "width:600:12", "--relate", "0:20",
                        "--R", 40, "--out", tmp_path / "r"], capsys)
    assert code == 0, err
    doc = validate(tmp_path / "r")
    assert {"point", "lo", "hi", "censored_fraction"} <= set(doc["range"])
    assert "legacy_range" in doc
    assert (tmp_path / "r" / "range_replicates.csv").exists()
    code, _, err = run(["test", "--cases", cases, "--bands", "width:600:12", "--relate", "0:20",
                        "--R", 39, "--out", tmp_path / "t"], capsys)
    assert code == 0, err
    doc = validate(tmp_path / "t")
    assert 0 < doc["global_test"]["p"] <= 1 and doc["global_test"]["R"] == 39


def test_test_insufficient_replicates_is_config_error(cases, tmp_path, capsys):
    code, _, err = run(["test", "--cases", cases, "--R", 10, "--out", tmp_path], capsys)
    assert code == 2 and json.loads(err)["error"] == "InsufficientReplicates"


def test_bands_preview(cases, tmp_path, capsys):
    code, _, _ = run(["bands", "--cases", cases, "--bands", "discs:100,200,400", "--out", tmp_path], capsys)
    assert code == 0
    doc = validate(tmp_path)
    assert doc["band_preview"]["edges"] == [[0, 100], [0, 200], [0, 400]]
    c = doc["band_preview"]["pair_counts"]
    assert c[0] <= c[1] <= c[2]


def test_simulate_null_and_validation(tmp_path, capsys):
    code, _, _ = run(["simulate", "--kind", "null", "--n", 30, "--out", tmp_path], capsys)
    assert code == 0
    assert len((tmp_path / "cases.csv").read_text().splitlines()) == 31
    validate(tmp_path)
    code, _, err = run(["simulate", "--set", "R_e=-1", "--out", tmp_path / "x"], capsys)
    assert code == 2
    code, _, err = run(["simulate", "--set", "nosuch=1", "--out", tmp_path / "x"], capsys)
    assert code == 2


def test_simulate_config_file(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"initial_cases": 8, "max_cases": 60, "region": [0, 0, 900, 900]}))
    code, _, err = run(["simulate", "--config", tmp_path / "cfg.json", "--out", tmp_path / "o"], capsys)
    assert code == 0, err
    doc = validate(tmp_path / "o")
    assert doc["config"]["region"] == [0, 0, 900, 900]
    assert (tmp_path / "o" / "tree.json").exists()


@pytest.mark.parametrize("argv,code", [
    (["tau", "--out", "{out}"], 2),
    (["tau", "--cases", "{out}/missing.csv", "--out", "{out}"], 3),
    (["tau", "--cases", "{cases}", "--bands", "blobs:3", "--out", "{out}"], 2),
    (["frobnicate"], 2),
    (["tau", "--cases", "{cases}", "--workers", "0", "--out", "{out}"], 2),
])
def test_exit_codes(argv, code, cases, tmp_path, capsys):
    argv = [a.format(out=tmp_path, cases=cases) for a in argv]
    got, _, err = run(argv, capsys)
    assert got == code
    assert json.loads(err.strip().splitlines()[-1])["exit_code"] == code


def test_data_error_names_row(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("id,x,y,t,status\nA,0,0,0,case\nA,1,0,1,case\n")
    code, _, err = run(["tau", "--cases", tmp_path / "c.csv", "--out", tmp_path], capsys)
    assert code == 3
    e = json.loads(err)
    assert e["error"] == "DuplicateId" and e["row"] == 3


def test_degenerate_exit_four(tmp_path, capsys):
    # no pair is closer than 0.5, so the only band is empty
    (tmp_path / "c.csv").write_text("id,x,y,t,status\nA,0,0,0,case\nB,1,0,100,case\nC,50,0,1,case\n")
    code, _, err = run(["tau", "--cases", tmp_path / "c.csv", "--bands", "width:0.5:1", "--out", tmp_path], capsys)
    assert code == 4
    assert json.loads(err)["exit_code"] == 4


def test_seed_env_fallback(cases, tmp_path, capsys, monkeypatch):
    args = ["tau", "--cases", cases, "--bands", "width:500:5", "--R", 20]
    monkeypatch.setenv("TAUKIT_SEED", "17")
    assert run(args + ["--out", tmp_path / "env"], capsys)[0] == 0
    monkeypatch.delenv("TAUKIT_SEED")
    assert run(args + ["--out", tmp_path / "flag", "--seed", 17], capsys)[0] == 0
    assert run(args + ["--out", tmp_path / "other", "--seed", 18], capsys)[0] == 0
    assert result(tmp_path / "env")["seed"] == 17
    assert result(tmp_path / "env")["envelope"] == result(tmp_path / "flag")["envelope"]
    assert result(tmp_path / "other")["envelope"] != result(tmp_path / "flag")["envelope"]
    monkeypatch.setenv("TAUKIT_SEED", "abc")
    assert run(args + ["--out", tmp_path / "bad"], capsys)[0] == 2


def snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())}


@pytest.mark.parametrize("sub,extra", [
    ("tau", ["--bands", "width:500:8", "--R", 30]),
    ("range", ["--bands", "width:500:8", "--R", 30]),
    ("test", ["--bands", "width:500:8", "--R", 39]),
    ("map", ["--dbands", "width:600:6", "--tbands", "width:60:4"]),
    ("bands", ["--bands", "eqcount:5"]),
])
def test_byte_identical_reruns_and_workers(sub, extra, cases, tmp_path, capsys):
    base = [sub, "--cases", cases, "--seed", 9] + extra
    assert run(base + ["--out", tmp_path / "a"], capsys)[0] == 0
    assert run(base + ["--out", tmp_path / "b"], capsys)[0] == 0
    assert run(base + ["--out", tmp_path / "c", "--workers", 3], capsys)[0] == 0
    a = snapshot(tmp_path / "a")
    assert a == snapshot(tmp_path / "b")
    assert a == snapshot(tmp_path / "c")
    validate(tmp_path / "a")


def test_simulate_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["simulate", "--seed", 4, "--set", "max_cases=100", "--out", tmp_path / d], capsys)[0] == 0
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")


def test_console_script(tmp_path):
    exe = shutil.which("tau-kit")
    cmd = [exe] if exe else [sys.executable, "-m", "taukit.cli"]
    proc = subprocess.run(cmd + ["simulate", "--kind", "null", "--n", "5", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run(cmd + ["tau"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["exit_code"] == 2
