import csv
import io
import json
import os
import shutil

import pytest

from lightplan import cli, planner
from lightplan.config import parse_config

from cli_scenarios import GOLDEN, REGEN_ENV, SCENARIOS, run_cli, run_scenario
from conftest import FIXTURES
from oracles import brute_force_search


def run_json(capsys, *argv):
    assert cli.main(list(argv)) == cli.EXIT_OK
    return json.loads(capsys.readouterr().out)


def toy_cfg(tmp_path, **overrides):
    """Copy toy.cfg with some ``key = value`` lines replaced."""
    lines = (FIXTURES / "toy.cfg").read_text().splitlines()
    out = []
    for line in lines:
        key = line.split("=")[0].strip()
        out.append(f"{key} = {overrides[key]}" if key in overrides else line)
    path = tmp_path / "edited.cfg"
    path.write_text("\n".join(out) + "\n")
    return str(path)


def test_plan_matches_brute_force(capsys):
    got = run_json(capsys, "plan", "--config", str(FIXTURES / "toy.cfg"), "--max-n-ub", "8",
                   "--mu-values", "1,2,4,8")
    hw, model, wl, _ = parse_config(str(FIXTURES / "toy.cfg"))
    grid = planner.SearchGrid(mu_values=(1, 2, 4, 8), n_ub_values=tuple(range(1, 9)))
    objective, policy = brute_force_search(hw, model, wl, grid, planner.default_ctx(wl))
    assert got["objective"] == float(f"{objective:.9g}")
    assert got["policy"] == {"N": policy.N, "mu": policy.mu, "A_g": policy.A_g, "F_g": policy.F_g,
                             "r_w": policy.r_w, "r_c": policy.r_c}
    assert got["manifest"]["command"] == "plan"


def test_simulate_cgopipe_not_slower_than_s3(capsys):
    spans = {}
    for schedule in ("cgopipe", "s3"):
        spans[schedule] = run_json(capsys, "simulate", "--config", str(FIXTURES / "toy.cfg"),
                                   "--schedule", schedule)["makespan"]
    assert spans["cgopipe"] <= spans["s3"]


def test_batch_empty_file(capsys):
    got = run_json(capsys, "batch", "--requests", str(FIXTURES / "empty.csv"))
    assert got["micro_batches"] == [] and got["aborted"] == []


def test_latency_reports_toy_breakdown(capsys):
    got = run_json(capsys, "latency", "--config", str(FIXTURES / "toy.cfg"), "--ctx", "10")
    assert got["latency"]["t_attn_c"] == 256
    assert got["latency"]["t_layer"] == 1824


def test_roofline_turning_points(capsys):
    got = run_json(capsys, "roofline", "--config", str(FIXTURES / "toy.cfg"), "--op", "ffn", "--mu", "4")
    (tp,) = got["turning_points"]
    assert tp["p2_bound"] == pytest.approx(tp["p2"] * 2)
    assert {p["kind"] for p in got["points"]} >= {"op_point", "mem_ji"}


def test_sweep_rows_follow_grid_order(capsys, monkeypatch):
    monkeypatch.setenv("LIGHTPLAN_THREADS", "4")
    got = run_json(capsys, "sweep", "--config", str(FIXTURES / "toy.cfg"), "--vary", "b_cg=1:3:3",
                   "--vary", "cpu_scale=1:2:2", "--mu-values", "1,2,4", "--max-n-ub", "2")
    assert [(r["b_cg"], r["cpu_scale"]) for r in got["rows"]] == [
        (1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)]


def test_csv_output_has_manifest_line(capsys):
    assert cli.main(["latency", "--config", str(FIXTURES / "toy.cfg"), "--format", "csv"]) == 0
    first, *rest = capsys.readouterr().out.splitlines()
    assert first.startswith("# manifest: ")
    assert json.loads(first[len("# manifest: "):])["command"] == "latency"
    (row,) = csv.DictReader(io.StringIO("\n".join(rest)))
    assert row["policy.N"] == "8"


def test_out_directory(tmp_path, capsys):
    assert cli.main(["batch", "--requests", str(FIXTURES / "requests.csv"), "--out", str(tmp_path)]) == 0
    path = tmp_path / "batch.json"
    assert capsys.readouterr().out.strip() == str(path)
    data = json.loads(path.read_text())
    assert data["manifest"]["outputs"] == [str(path)]
    assert sum(len(mb) for mb in data["micro_batches"]) + len(data["aborted"]) == 40


@pytest.mark.parametrize("overrides", [{"n_q": 6, "n_kv": 4}, {"b_cg": -1}, {"N": 6}, {"typo_key": 1}])
def test_invalid_config_exits_2(tmp_path, capsys, overrides):
    path = toy_cfg(tmp_path, **{k: v for k, v in overrides.items() if k != "typo_key"})
    if "typo_key" in overrides:
        with open(path, "a") as fh:
            fh.write("typo_key = 1\n")
    assert cli.main(["latency", "--config", path]) == cli.EXIT_INVALID
    err = capsys.readouterr().err
    assert err.startswith("lightplan: error: ") and len(err.strip().splitlines()) == 1


def test_missing_config_exits_2(capsys):
    assert cli.main(["plan", "--config", "no/such.cfg"]) == cli.EXIT_INVALID


def test_bad_vary_exits_2(capsys):
    for vary in ("b_cg", "bogus=1:2:2", "b_cg=1:2", "b_cg=1:2:0"):
        assert cli.main(["sweep", "--config", str(FIXTURES / "toy.cfg"), "--vary", vary]) == cli.EXIT_INVALID


def test_no_feasible_policy_exits_3(tmp_path, capsys):
    path = toy_cfg(tmp_path, m_g=10)
    assert cli.main(["plan", "--config", path]) == cli.EXIT_NO_POLICY
    assert "gpu_memory" in capsys.readouterr().err


def test_unsupported_schedule_exits_2(capsys):
    assert cli.main(["simulate", "--config", str(FIXTURES / "toy.cfg"), "--schedule", "s4"]) == cli.EXIT_INVALID


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        cli.main(["plan", "--config", str(FIXTURES / "toy.cfg"), "--frobnicate"])
    assert err.value.code == 2


def test_console_entry_point(tmp_path):
    proc = run_cli(["--version"], tmp_path)
    assert proc.returncode == 0 and "lightplan" in proc.stdout


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_golden(name, tmp_path):
    artifact = run_scenario(name, tmp_path)
    golden = GOLDEN / artifact.name
    if os.environ.get(REGEN_ENV):
        shutil.copyfile(artifact, golden)
    assert golden.exists(), f"missing {golden}; rerun with {REGEN_ENV}=1"
    assert artifact.read_bytes() == golden.read_bytes()
