from __future__ import annotations

import json

import pytest

from nashrate.cli import _parse_grid, main
from tests.conftest import FIXTURES


def _write(tmp_path, name, **extra):
    doc = {
        "schema_version": 1,
        "name": name,
        "seed": 4,
        "agents": [{"a": 2.0, "b": 1.0}, {"a": 1.5, "b": 1.0}],
        "links": [{"id": 0, "capacity": 1.0, "coefficients": {"0": 1.0, "1": 1.0}}],
        "routes": {"0": [0], "1": [0]},
        "br": {"deviation_samples": 50, "perturbed_starts": 1, "max_rounds": 10},
    }
    doc.update(extra)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def test_validate(tmp_path, capsys):
    path = _write(tmp_path, "pair")
    assert main(["validate", "--scenario", path, "--mechanism", "sbb"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["name"] == "pair"
    assert out["mechanism"] == "sbb"
    assert out["n_agents"] == 2


def test_solve_writes_certificate(tmp_path, capsys):
    path = _write(tmp_path, "pair")
    assert main(["solve", "--scenario", path, "--out", str(tmp_path / "cert")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["x_star"][0] == pytest.approx(5 / 7, abs=1e-7)
    assert (tmp_path / "cert" / "certificate.json").is_file()


@pytest.mark.parametrize("mechanism", ["wbb", "sbb"])
def test_equilibrium(tmp_path, capsys, mechanism):
    path = _write(tmp_path, "pair")
    assert main(["equilibrium", "--scenario", path, "--mechanism", mechanism]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == "equilibrium"


def test_equilibrium_out_of_scope(tmp_path, capsys):
    path = _write(tmp_path, "starved", agents=[{"a": 5.0, "b": 1.0}, {"a": 0.1, "b": 1.0}])
    assert main(["equilibrium", "--scenario", path]) == 2
    assert json.loads(capsys.readouterr().out)["status"] == "out_of_scope"


def test_run_writes_report(tmp_path, capsys):
    path = _write(tmp_path, "pair")
    assert main(["run", "--scenario", path, "--out", str(tmp_path / "rep"), "--eta", "0.0005"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["status"] == "passed"
    report = json.loads((tmp_path / "rep" / "report.json").read_text(encoding="utf-8"))
    assert report["eta_certificate"]["eta"] == pytest.approx(5e-4)


def test_run_out_of_scope_exit_code(tmp_path):
    path = _write(tmp_path, "starved", agents=[{"a": 5.0, "b": 1.0}, {"a": 0.1, "b": 1.0}])
    assert main(["run", "--scenario", path]) == 2


def test_sweep(tmp_path, capsys):
    path = _write(tmp_path, "pair")
    code = main(["sweep", "--scenario", path, "--out", str(tmp_path / "sw"), "--grid", "eta=0.001,0.0001"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines == ["pair__eta=0.001: passed", "pair__eta=0.0001: passed", "out_of_scope_rate: 0.000"]
    assert (tmp_path / "sw" / "summary.csv").is_file()


def test_sweep_rejects_unknown_grid_key(tmp_path, capsys):
    path = _write(tmp_path, "pair")
    assert main(["sweep", "--scenario", path, "--grid", "colour=red"]) == 1
    assert "unknown grid key" in capsys.readouterr().err


def test_probe(tmp_path, capsys):
    path = _write(tmp_path, "pair")
    assert main(["probe", "--scenario", path]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["extraneous_under_pure"] == 10
    assert out["extraneous_under_corrected"] == 0


def test_scenario_errors_go_to_stderr(capsys):
    assert main(["validate", "--scenario", str(FIXTURES / "missing_route.json")]) == 1
    assert "scenario error: missing route for agent 1" in capsys.readouterr().err


def test_parse_grid():
    grid = _parse_grid(["seed=1,2", "eta=0.1", "mechanism=wbb,sbb"])
    assert grid == {"seed": [1, 2], "eta": [0.1], "mechanism": ["wbb", "sbb"]}
    with pytest.raises(ValueError):
        _parse_grid(["seed"])


def test_unknown_verb_exits():
    with pytest.raises(SystemExit):
        main(["launch"])
