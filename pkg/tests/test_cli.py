from __future__ import annotations

import csv
import json

import pytest

from pmelab.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, load_config, main


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


@pytest.mark.parametrize("data,field", [
    ({"problem": {"m": 0.5}}, "problem.m"),
    ({"grid": {"foo": 1}}, "grid.foo"),
    ({"grid": {"N": "many"}}, "grid.N"),
    ({"sweep": {"r_range": [0.3, 0.1]}}, "sweep.r_range"),
    ({"problem": {"source": "nope"}}, "problem.source"),
])
def test_config_errors_name_the_field(tmp_path, capsys, data, field):
    code = main(["simulate", "--config", _write(tmp_path, data), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_defaults_roundtrip():
    cfg = load_config(None)
    again = load_config(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_constant_source_verifies(tmp_path):
    cfg = _write(tmp_path, {"problem": {"source": "constant", "constant": 1.0}, "grid": {"N": 64},
                            "sweep": {"cylinders": 10}})
    out = tmp_path / "o"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["verify", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "verify.json").read_text())["passed"] is True
    assert main(["report", "--config", cfg, "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert {"simulate", "verify", "config"} <= set(report)


def test_same_seed_gives_identical_outputs(tmp_path):
    cfg = _write(tmp_path, {"grid": {"N": 64}, "sweep": {"cylinders": 12}})
    blobs = []
    for k, threads in enumerate(("1", "3")):
        out = tmp_path / f"o{k}"
        assert main(["regimes", "--config", cfg, "--seed", "7", "--threads", threads, "--out", str(out)]) == EXIT_OK
        blobs.append((out / "regimes.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_report_flags_failures(tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / "thing.json").write_text(json.dumps({"passed": False}))
    assert main(["report", "--out", str(out)]) == EXIT_FAIL


def test_exponent_table_labels(tmp_path):
    cfg = _write(tmp_path, {"problem": {"m": 4.0},
                            "exponent": {"levels": [64, 128], "p_ladder": [2.5, 3.5]}})
    out = tmp_path / "o"
    assert main(["exponent", "--config", cfg, "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "exponent.csv").open()))
    assert [r["expected"] for r in rows] == ["bounded", "divergent"]
    growth = [float(r["raw_growth"]) for r in rows]
    assert growth[1] > growth[0] > 1.0
