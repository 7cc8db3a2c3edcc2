import csv
import io
import json
import subprocess

import numpy as np
import pytest

from smasim import __version__, cli


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_version():
    out = subprocess.run(["smasim", "--version"], capture_output=True, text=True, check=True)
    assert __version__ in out.stdout


def test_validate_small_passes(capsys, tmp_path):
    report = tmp_path / "v.json"
    code, _, err = run(["validate", "--seed", "1", "--count", "30", "--max-dim", "96",
                        "--out", str(report)], capsys)
    assert code == 0, err
    doc = json.loads(report.read_text())
    assert doc["passed"] and doc["records"] == [] and doc["cases"] == 30
    assert sorted(doc["runners"]) == ["dot_product", "mapper", "semi_broadcast",
                                      "weight_stationary"]


def test_validate_reports_injected_fault(capsys, tmp_path, monkeypatch):
    def broken(p, index):
        c, macs = cli._run_mapper(p, index)
        c = c.copy()
        c[0, 0] += 1.0 + abs(c[0, 0])
        return c, macs
    monkeypatch.setitem(cli.RUNNERS, "mapper", broken)
    report = tmp_path / "v.json"
    code, _, err = run(["validate", "--seed", "3", "--count", "2", "--max-dim", "40",
                        "--out", str(report)], capsys)
    assert code == 1
    assert "FAIL case 0 on mapper" in err and "--seed 3" in err
    rec = json.loads(report.read_text())["records"][0]
    assert rec["worst_element"] == [0, 0]
    assert rec["repro"] == {"seed": 3, "index": 0, "max_dim": 40}
    p = cli.validation_problem(3, 0, 40)
    assert (rec["m"], rec["n"], rec["k"]) == (p.m, p.n, p.k)


def test_validate_mac_fault(capsys, monkeypatch):
    monkeypatch.setitem(cli.RUNNERS, "dot_product",
                        lambda p, i: (cli.gemm_reference(p), p.macs - 1))
    doc = cli.cmd_validate(seed=1, count=1, max_dim=16)
    assert not doc["passed"]
    assert any("mac count" in s for s in doc["records"][0]["problems"])


def test_validate_zero_count_warns(capsys, caplog):
    code, out, err = run(["validate", "--count", "0"], capsys)
    assert code == 0
    assert "nothing to validate" in caplog.text + err


def test_sweep_csv_and_determinism(capsys):
    argv = ["sweep", "--config", "2-sma,4-tc", "--sizes", "8,64,256"]
    code, first, _ = run(argv, capsys)
    assert code == 0
    _, second, _ = run(argv, capsys)
    assert first == second
    rows = list(csv.DictReader(io.StringIO(first)))
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    assert [r["config"] for r in rows] == ["2-sma"] * 3 + ["4-tc"] * 3
    eff = {(r["config"], int(r["size_m"])): float(r["efficiency"]) for r in rows}
    assert eff[("2-sma", 8)] < 0.01
    assert eff[("2-sma", 8)] < eff[("2-sma", 64)] < eff[("2-sma", 256)]
    for r in rows:
        assert int(r["macs"]) == int(r["size_m"]) ** 3


def test_sweep_parallel_matches_serial():
    cfgs = [cli.resolve_config("3-sma"), cli.resolve_config("volta-baseline")]
    assert cli.cmd_sweep(cfgs, [32, 128], jobs=2) == cli.cmd_sweep(cfgs, [32, 128], jobs=1)


def test_sweep_json_replay(capsys, tmp_path):
    report = tmp_path / "s.json"
    code, _, _ = run(["sweep", "--config", "3-sma", "--sizes", "64,128", "--format", "json",
                      "--out", str(report)], capsys)
    assert code == 0
    doc = json.loads(report.read_text())
    assert doc["tool_version"] == __version__
    assert [c["name"] for c in doc["configs"]] == ["3-sma"]
    again = tmp_path / "again.json"
    assert cli.main(["sweep", "--replay", str(report), "--out", str(again)]) == 0
    assert again.read_bytes() == report.read_bytes()


def test_replay_command_mismatch(capsys, tmp_path):
    report = tmp_path / "s.json"
    cli.main(["sweep", "--config", "3-sma", "--sizes", "64", "--format", "json",
              "--out", str(report)])
    code, _, err = run(["pipeline", "--replay", str(report)], capsys)
    assert code == 2 and "not 'pipeline'" in err


def test_trace_output(capsys, tmp_path):
    path = tmp_path / "t.jsonl"
    run(["sweep", "--config", "2-sma", "--sizes", "64,128", "--trace", str(path)], capsys)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert [x["size"] for x in lines] == [64, 128]
    assert lines[0]["counters"]["mac"] == 64 ** 3


@pytest.mark.parametrize("argv", [
    ["sweep", "--config", "no-such-config", "--sizes", "64"],
    ["sweep", "--sizes", "64,-1"],
    ["compare", "iso-flop", "--config", "2-sma"],
    ["pipeline", "--spec", "no-such-spec"],
    ["explain-plan", "4,4"],
])
def test_bad_input_exit_two(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and "error" in err


def test_compare_sizes(capsys):
    code, out, _ = run(["compare", "iso-flop", "--sizes", "1024"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["subject"] == "2-sma" and doc["reference"] == "4-tc"
    assert doc["records"][0]["speedup"] > 1


def test_compare_models(capsys):
    code, out, _ = run(["compare", "energy", "--models", "alexnet"], capsys)
    rec = json.loads(out)["records"][0]
    assert code == 0 and rec["energy_ratio"] < 1
    assert rec["dominant_structure"] in ("register file", "shared memory")


def test_pipeline_csv(capsys):
    code, out, _ = run(["pipeline", "--config", "3-sma", "--intervals", "1,4"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [int(r["detection_interval"]) for r in rows] == [1, 4]
    assert float(rows[1]["average_ms"]) < float(rows[0]["average_ms"])
    assert float(rows[0]["reduction_vs_n1"]) == 0.0


def test_explain_plan(capsys):
    code, out, _ = run(["explain-plan", "--config", "2-sma", "4096"], capsys)
    assert code == 0 and "[2-sma]" in out and "32" in out


def test_parse_helpers():
    assert cli.parse_sizes("64, 128") == [64, 128]
    assert cli.parse_dims("4096") == (4096, 4096, 4096)
    assert cli.parse_dims("2,3,4") == (2, 3, 4)
    assert cli.a_reuse(cli.resolve_config("2-sma"), 12) == pytest.approx(6.0)
    assert np.isclose(cli.a_reuse(cli.resolve_config("4-tc"), 64), 4.0)
