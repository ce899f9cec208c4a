import csv
import math
import subprocess
import sys

import pytest
from hypothesis import given, strategies as st

from oracles import brute_stats, csv_columns
from trusdn.adversary import Scenario, bundled_scenarios
from trusdn.bench import CSV_COLUMNS, BenchConfig, format_summary, read_columns, run_bench, summarize, summary_table
from trusdn.cli import main
from trusdn.endpoint import Mode
from trusdn.errors import ParseError


def write_rows(path, rows, header=("flow", "mode", "x")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# -- run --------------------------------------------------------------------------


def test_run_bundled_exits_zero(capsys):
    assert main(["run", "eavesdrop"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("scenario eavesdrop") and "FAIL" not in out


def test_run_with_metrics(capsys):
    assert main(["run", "forge_rule", "--metrics", "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert "seed=4" in out and "flows_established=" in out


def test_failing_assertion_exits_one(tmp_path, capsys):
    s = Scenario.load(bundled_scenarios()["eavesdrop"])
    s.assertions.append({"check": "outcome", "key": "cuckoo.check", "equals": True})
    path = tmp_path / "bad.json"
    path.write_text(s.to_json())
    assert main(["run", str(path)]) == 1
    assert "FAIL outcome" in capsys.readouterr().out


def test_malformed_scenario_exits_two(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"name": "x",\n "topology": ')
    assert main(["run", str(path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_scenario_exits_two():
    assert main(["run", "no-such-scenario"]) == 2


def test_topology_error_exits_two(tmp_path, capsys):
    s = Scenario.load(bundled_scenarios()["eavesdrop"])
    s.topology["flows"][0]["src"] = "ghost"
    path = tmp_path / "t.json"
    path.write_text(s.to_json())
    assert main(["run", str(path)]) == 2
    assert "ghost" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["run"], ["bench", "--flows", "3"], ["bench", "--flows", "x", "--csv", "o"], ["frobnicate"]])
def test_usage_errors_exit_two(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def test_env_seed(monkeypatch, capsys):
    monkeypatch.setenv("TRUSDN_SEED", "9")
    main(["run", "eavesdrop"])
    from_env = capsys.readouterr().out.splitlines()[0]
    monkeypatch.delenv("TRUSDN_SEED")
    main(["run", "eavesdrop", "--seed", "9"])
    assert capsys.readouterr().out.splitlines()[0] == from_env and "seed=9" in from_env
    monkeypatch.setenv("TRUSDN_SEED", "nine")
    assert main(["run", "eavesdrop"]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "trusdn", "run", "tamper_beta"], capture_output=True, text=True)
    assert out.returncode == 0 and "PASS" in out.stdout


# -- bench --------------------------------------------------------------------------


def test_bench_psk_rows(tmp_path, capsys):
    path = tmp_path / "psk.csv"
    assert main(["bench", "--flows", "200", "--mode", "psk", "--csv", str(path)]) == 0
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_COLUMNS
    assert len(rows) == 200
    assert [int(r["flow"]) for r in rows] == list(range(200))
    assert {r["first_packet_ticks"] for r in rows} == {"6"}
    assert {r["handshake_messages"] for r in rows} == {"3"}
    assert {r["handshake_pk_ops"] for r in rows} == {"0"}
    assert all(int(r["keygen_wall_ns"]) > 0 and int(r["distribution_wall_ns"]) > 0 for r in rows)


def test_bench_pk_rows(tmp_path):
    recs = run_bench(BenchConfig(20, mode=Mode.BASELINE, csv_path=str(tmp_path / "pk.csv")))
    assert {r.first_packet_ticks for r in recs} == {4}
    assert {r.handshake_messages for r in recs} == {4}
    assert {r.handshake_pk_ops for r in recs} == {8}
    assert {r.keygen_wall_ns for r in recs} == {0}


def test_bench_repeats_and_workers_agree(tmp_path):
    cfg = BenchConfig(10, repeats=3, seed=2)
    serial, parallel = run_bench(cfg), run_bench(cfg, workers=2)
    assert len(serial) == 30 and [r.flow for r in parallel] == list(range(30))
    strip = lambda recs: [(r.flow, r.first_packet_ticks, r.handshake_messages, r.handshake_pk_ops) for r in recs]
    assert strip(serial) == strip(parallel)


def test_bench_config_validated():
    with pytest.raises(ValueError):
        BenchConfig(0)
    with pytest.raises(ValueError):
        BenchConfig(1, repeats=0)
    assert main(["bench", "--flows", "0", "--csv", "x.csv"]) == 2


# -- summary ------------------------------------------------------------------------


def test_summary_against_brute_force(tmp_path):
    path = tmp_path / "b.csv"
    run_bench(BenchConfig(50, csv_path=str(path)))
    table = summary_table(path)
    oracle = {k: brute_stats(v) for k, v in csv_columns(path).items()}
    assert set(table) == set(CSV_COLUMNS) - {"flow", "mode"}
    for col, stats in table.items():
        for name, value in stats.items():
            assert math.isclose(value, oracle[col][name], rel_tol=1e-9, abs_tol=1e-9), (col, name)


def test_constant_column_has_zero_stddev(tmp_path):
    path = write_rows(tmp_path / "c.csv", [(i, "psk", 6) for i in range(7)])
    s = summary_table(path)["x"]
    assert s["stddev"] == 0.0 and s["min"] == s["max"] == s["mean"] == s["median"] == 6


def test_two_values(tmp_path):
    s = summary_table(write_rows(tmp_path / "t.csv", [(0, "psk", 1), (1, "psk", 3)]))["x"]
    assert s["mean"] == 2 and s["median"] == 2 and s["stddev"] == 1


def test_single_row_no_nan(tmp_path):
    s = summary_table(write_rows(tmp_path / "one.csv", [(0, "psk", 5)]))["x"]
    assert not any(math.isnan(v) for v in s.values())


@given(st.lists(st.integers(-10**9, 10**9), min_size=1, max_size=40))
def test_summarize_matches_oracle(xs):
    got, want = summarize([float(x) for x in xs]), brute_stats(xs)
    for k in want:
        assert math.isclose(got[k], want[k], rel_tol=1e-9, abs_tol=1e-9)


@pytest.mark.parametrize(
    "text,line",
    [
        ("", 1),
        ("a,b\n1,2\n", 1),
        ("flow,mode,x\n0,psk,1\n1,psk\n", 3),
        ("flow,mode,x\n0,psk,abc\n", 2),
        ("flow,mode,x\n0,psk,nan\n", 2),
        ("flow,mode,x\n", 2),
    ],
)
def test_bad_csv(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        read_columns(path)
    assert info.value.line == line


def test_summary_cli(tmp_path, capsys):
    path = write_rows(tmp_path / "s.csv", [(0, "psk", 1), (1, "psk", 3)])
    assert main(["summary", str(path)]) == 0
    out = capsys.readouterr().out
    for head in ("Minimum", "Maximum", "Mean", "Median", "Stddev"):
        assert head in out
    assert main(["summary", str(tmp_path / "missing.csv")]) == 2
    (tmp_path / "e.csv").write_text("")
    assert main(["summary", str(tmp_path / "e.csv")]) == 2
    assert "x" in format_summary({"x": summarize([1.0])})
