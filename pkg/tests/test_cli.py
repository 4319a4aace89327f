import json
import subprocess
import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent


def run_cli(*args, check=True):
    proc = subprocess.run([sys.executable, "-m", "sagesim.cli", *args],
                          capture_output=True, text=True, cwd=REPO,
                          env={"PYTHONPATH": str(REPO / "src"), "PATH": "/usr/bin:/bin"})
    if check and proc.returncode != 0:
        raise AssertionError(f"sagectl {args} failed: {proc.stderr}")
    return proc


@pytest.fixture(scope="module")
def topo(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "topo.json"
    run_cli("mktopo", "--seed", "42", "--devices-per-tier", "6",
            "--capacity", "2048", str(path))
    return str(path)


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    from sagesim.workloads import scenario_to_jsonl, standard_scenario
    path = tmp_path_factory.mktemp("cli") / "scenario.jsonl"
    path.write_text(scenario_to_jsonl(standard_scenario(42)))
    return str(path)


def test_run_script_deterministic(topo, scenario):
    out1 = json.loads(run_cli("run", scenario, "--config", topo, "--json").stdout)
    out2 = json.loads(run_cli("run", scenario, "--config", topo, "--json").stdout)
    assert out1["exit"] == 0
    assert out1["trace_sha256"] == out2["trace_sha256"]
    assert out1["stats"] == out2["stats"]


def test_catalog_dump_jsonl(topo, scenario):
    proc = run_cli("catalog", "dump", "--config", topo, "--script", scenario)
    lines = [json.loads(l) for l in proc.stdout.splitlines() if l.strip()]
    assert lines
    assert all({"id_hi", "id_lo", "kind", "attrs"} <= set(l) for l in lines)
    assert any(l["kind"] == "REALM" for l in lines)


def test_obj_layout_dump(topo, scenario):
    proc = run_cli("obj", "layout", "0", "2", "--config", topo,
                   "--script", scenario, "--json")
    doc = json.loads(proc.stdout)
    assert doc["layout"]["extents"]
    assert doc["units"]


def test_embedded_create_and_stats(topo):
    created = json.loads(run_cli(
        "obj", "create", "--config", topo, "--block-size", "512",
        "--nblocks", "2").stdout)
    assert created["id"]["lo"] >= 2
    stats = json.loads(run_cli("stats", "--config", topo).stdout)
    assert stats["tiers"]["3"]["capacity_blocks"] == 6 * 2048


def test_script_failure_exit_code(topo, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"op": "ASSERT_STATS",
                               "params": {"path": "network_bytes", "min": 10**12}}) + "\n")
    proc = run_cli("run", str(bad), "--config", topo, check=False)
    assert proc.returncode == 1
    assert "ASSERT FAIL" in proc.stderr


def test_seed_env_override(topo, scenario):
    import os
    proc = subprocess.run(
        [sys.executable, "-m", "sagesim.cli", "run", scenario, "--config", topo, "--json"],
        capture_output=True, text=True, cwd=REPO,
        env={"PYTHONPATH": str(REPO / "src"), "PATH": "/usr/bin:/bin", "SAGE_SEED": "777"})
    base = json.loads(run_cli("run", scenario, "--config", topo, "--json").stdout)
    other = json.loads(proc.stdout)
    assert other["exit"] == 0
    assert other["trace_sha256"] != base["trace_sha256"]  # different seed, different run
