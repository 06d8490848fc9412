import json

import numpy as np
import pytest

from qosra.allocator import PowerTable, Scenario, exhaustive_oracle
from qosra.cli import main
from qosra.config import SENSITIVE, TOLERANT, URLLC, SystemConfig, UserSpec

USERS = [
    {"service": TOLERANT, "alpha": 2e-12, "arrival_rate": 6e5},
    {"service": SENSITIVE, "alpha": 1e-12, "nu_a": 400.0, "nu_s": 1 / 3e3},
    {"service": URLLC, "alpha": 5e-13, "packet_bits": 300.0},
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_solve_matches_oracle(tmp_path, capsys):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"users": USERS, "gain": 64.0, "system": {"N_max": 9}}))
    code, out, _ = run(capsys, "solve", "--scenario", scen)
    assert code == 0
    got = json.loads(out)
    cfg = SystemConfig(N_max=9)
    scn = Scenario([UserSpec(**u) for u in USERS], cfg)
    want = exhaustive_oracle(scn, "total", table=PowerTable(scn, pools=np.full((3, 1, 9), 64.0)))
    assert got["n"] == want.alloc.n.tolist()
    assert got["total_power"] == pytest.approx(want.total_power, abs=1e-6)
    code, out, _ = run(capsys, "solve", "--scenario", scen, "--oracle", "--objective", "transmit")
    assert code == 0 and json.loads(out)["objective"] == "transmit"


def test_error_record(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    code, _, err = run(capsys, "solve", "--scenario", bad)
    assert code == 2
    rec = json.loads(err)
    assert rec["error"] == "invalid-input"
    code, _, err = run(capsys, "solve")
    assert code == 2 and json.loads(err)["error"] == "invalid-input"
    code, _, err = run(capsys, "generate", "--count", 1, "--out", tmp_path / "x", "--set", "system.N_T=0")
    assert code == 2 and "N_T" in json.loads(err)["message"]


def test_pipeline(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("system:\n  N_max: 12\ntemplate:\n  users: [tolerant, sensitive, urllc]\n  draws: 40\n"
                   "train:\n  epochs: 60\narch:\n  phi_I_hidden: [8, 8]\n  phi_II_hidden: [4, 4]\n")
    data = tmp_path / "d.jsonl"
    monkeypatch.setenv("QOSRA_SEED", "5")
    code, out, _ = run(capsys, "generate", "--config", cfg, "--count", 20, "--out", data)
    assert code == 0 and json.loads(out)["count"] == 20
    again = tmp_path / "d2.jsonl"
    run(capsys, "generate", "--config", cfg, "--count", 20, "--out", again, "--seed", 5)
    assert again.read_bytes() == data.read_bytes()

    model = tmp_path / "m.txt"
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", data, "--out", model)
    assert code == 0 and model.exists()

    code, out, _ = run(capsys, "eval", "--config", cfg, "--data", data, "--oracle", "--out-dir", tmp_path / "o")
    summary = json.loads(out)
    assert code == 0 and summary["eta"] == pytest.approx(1.0) and summary["violation_at_zero"] == 0.0
    assert (tmp_path / "o" / "fig4_violation.tsv").read_text().startswith("# fig4")

    code, out, _ = run(capsys, "eval", "--config", cfg, "--data", data, "--model", model, "--out-dir", tmp_path / "e")
    assert code == 0 and (tmp_path / "e" / "fig5_power_vs_users.tsv").exists()

    tuned, trace = tmp_path / "t.txt", tmp_path / "trace.tsv"
    code, out, _ = run(capsys, "transfer", "--config", cfg, "--model", model, "--data", data, "--epochs", 10,
                       "--eval-every", 5, "--frozen", "phi_I=1", "--out", tuned, "--trace", trace)
    assert code == 0 and trace.read_text().splitlines()[0] == "# fig6"

    other = tmp_path / "o.jsonl"
    run(capsys, "generate", "--config", cfg, "--count", 4, "--out", other, "--set", "system.N_T=16")
    code, _, err = run(capsys, "eval", "--config", cfg, "--data", other, "--model", model, "--out-dir", tmp_path / "x")
    assert code == 2 and json.loads(err)["error"] == "digest-mismatch"


def test_validate_conditions(tmp_path, capsys):
    out_file = tmp_path / "fig3.tsv"
    code, out, _ = run(capsys, "validate-conditions", "--nt", 8, "--n-max", 8, "--draws", 2000, "--alpha", 1e-12,
                       "--out", out_file)
    assert code == 0
    reports = [json.loads(line) for line in out.splitlines()]
    assert {r["mode"] for r in reports} == {"closed_form", "monte_carlo"}
    assert all(not r["cond1_violations"] and not r["cond2_violations"] for r in reports)
    assert len(out_file.read_text().splitlines()) == 2 + 16
