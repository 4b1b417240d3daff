import json
import subprocess
import sys

import numpy as np
import pytest

from s2ft.cli import main
from s2ft.netspec import load_checkpoint


def run(*argv) -> int:
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return int(exc.code)


@pytest.fixture
def ws(tmp_path):
    assert run("init", "--d", 8, "--h", 2, "--k", 12, "--seed", 1, "--out", tmp_path / "m.ckpt") == 0
    assert run("data", "--model", tmp_path / "m.ckpt", "--n", 6, "--seq-len", 4, "--seed", 2,
               "--out", tmp_path / "d.npz") == 0
    return tmp_path


def test_usage_errors(ws, capsys):
    assert run("frobnicate") == 1
    assert run("select", "--model", ws / "m.ckpt", "--ratio", 2.0, "--out", ws / "x.json") == 1
    assert run("init", "--d", 10, "--h", 3, "--out", ws / "bad.ckpt") == 1
    assert run("train", "--method", "s2ft", "--model", ws / "m.ckpt", "--data", ws / "d.npz",
               "--out", ws / "t") == 1
    assert run("graph", "--model", ws / "missing.ckpt") == 1
    capsys.readouterr()


def test_corrupt_checkpoint_exit_2(ws):
    raw = (ws / "m.ckpt").read_bytes()
    (ws / "bad.ckpt").write_bytes(b"NOTMAGIC" + raw[8:])
    assert run("graph", "--model", ws / "bad.ckpt", "--out", ws / "g.json") == 2


def test_graph_and_select_byte_identical(ws):
    for i in (1, 2):
        assert run("graph", "--model", ws / "m.ckpt", "--out", ws / f"g{i}.json") == 0
        assert run("select", "--model", ws / "m.ckpt", "--strategy", "R", "--ratio", 0.2, "--seed", 3,
                   "--out", ws / f"s{i}.json") == 0
    assert (ws / "g1.json").read_bytes() == (ws / "g2.json").read_bytes()
    assert (ws / "s1.json").read_bytes() == (ws / "s2.json").read_bytes()
    doc = json.loads((ws / "g1.json").read_text())
    assert [s["kind"] for s in doc["structures"]] == ["MhaBasic", "FfnBasic", "Residual"]
    assert run("select", "--model", ws / "m.ckpt", "--strategy", "G", "--ratio", 0.2,
               "--calib", ws / "d.npz", "--out", ws / "g.json") == 0


def test_permute_reports_invariance(ws, capsys):
    run("select", "--model", ws / "m.ckpt", "--ratio", 0.2, "--seed", 3, "--out", ws / "mask.json")
    capsys.readouterr()
    assert run("permute", "--model", ws / "m.ckpt", "--mask", ws / "mask.json", "--out", ws / "p.ckpt") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["passed"] and rep["max_abs_diff"] <= 1e-10
    assert (ws / "p.ckpt.plan.json").exists()


def _train_s2ft(ws, out, chans):
    (ws / f"{out}.mask.json").write_text(json.dumps(
        {"schema_version": 1, "blocks": [{"heads": [1], "channels": chans}], "strategy": "R"}))
    (ws / "train.json").write_text(json.dumps({"schema_version": 1, "epochs": 20, "lr": 0.01}))
    return run("train", "--method", "s2ft", "--model", ws / "m.ckpt", "--data", ws / "d.npz",
               "--mask", ws / f"{out}.mask.json", "--config", ws / "train.json", "--name", out,
               "--out", ws / out)


def test_train_outputs_deterministic(ws):
    assert _train_s2ft(ws, "a", [0, 3]) == 0
    first = {p.name: p.read_bytes() for p in (ws / "a").rglob("*") if p.is_file()}
    assert _train_s2ft(ws, "a", [0, 3]) == 0
    second = {p.name: p.read_bytes() for p in (ws / "a").rglob("*") if p.is_file()}
    assert first == second
    assert {"model.ckpt", "loss.csv", "accounting.json", "plan.json", "a_Wo.s2ad", "a_Wdown.s2ad"} <= set(first)
    for method in ("lora", "full", "spft"):
        assert run("train", "--method", method, "--model", ws / "m.ckpt", "--data", ws / "d.npz",
                   "--out", ws / method) == 0
        loss = (ws / method / "loss.csv").read_text().splitlines()
        assert loss[0] == "step,loss" and len(loss) == 2


def test_adapter_lifecycle(ws):
    assert _train_s2ft(ws, "t1", [0, 3]) == 0
    assert _train_s2ft(ws, "t2", [5, 7, 9]) == 0
    reg = ws / "reg"
    reg.mkdir()
    for t in ("t1", "t2"):
        for f in (ws / t / "adapters").iterdir():
            (reg / f.name).write_bytes(f.read_bytes())
    assert run("adapter", "switch", "--model", ws / "m.ckpt", "--registry", reg, "--from", "t1_Wdown",
               "--to", "t2_Wdown", "--out", ws / "sw.json") == 0
    sw = json.loads((ws / "sw.json").read_text())
    assert sw["counts"]["scatter_add"] == 2 and sw["counts"]["matmul"] == 0
    assert run("adapter", "parallel-bench", "--model", ws / "m.ckpt", "--registry", reg,
               "--out", ws / "pb.json") == 0
    pb = json.loads((ws / "pb.json").read_text())
    assert pb["max_abs_error"] <= 1e-10
    assert all(r["counts"] == {"matmul": 1, "add": 1, "gather_or_scatter": 1} for r in pb["reports"])
    assert run("adapter", "fuse", "--model", ws / "m.ckpt", "--registry", reg, "--ids", "t1_Wdown,t2_Wdown",
               "--out", ws / "fused.ckpt") == 0
    fused = load_checkpoint(ws / "fused.ckpt")
    base = load_checkpoint(ws / "m.ckpt")
    changed = np.nonzero(np.any(fused.Wdown != base.Wdown, axis=0))[0].tolist()
    assert set(changed) <= {0, 3, 5, 7, 9}
    # re-extract from the trained checkpoint reproduces the stored adapter files
    assert run("adapter", "extract", "--base", ws / "m.ckpt", "--tuned", ws / "t1" / "model.ckpt",
               "--plan", ws / "t1" / "plan.json", "--name", "t1", "--registry", ws / "reg2") == 0
    assert (ws / "reg2" / "t1_Wdown.s2ad").read_bytes() == (reg / "t1_Wdown.s2ad").read_bytes()


def test_adapter_fingerprint_mismatch_exit_2(ws):
    assert _train_s2ft(ws, "t1", [0, 3]) == 0
    run("init", "--d", 8, "--h", 2, "--k", 12, "--seed", 9, "--out", ws / "other.ckpt")
    assert run("adapter", "switch", "--model", ws / "other.ckpt", "--registry", ws / "t1" / "adapters",
               "--from", "t1_Wdown", "--to", "t1_Wdown", "--out", ws / "sw.json") == 2


def test_theory_exit_codes(ws):
    assert run("theory", "--trials", 4, "--out", ws / "th1.json") == 0
    assert run("theory", "--trials", 4, "--out", ws / "th2.json") == 0
    assert (ws / "th1.json").read_bytes() == (ws / "th2.json").read_bytes()
    assert run("theory", "--trials", 0, "--out", ws / "th0.json") == 0
    assert json.loads((ws / "th0.json").read_text())["trials"] == []
    assert run("theory", "--trials", 2, "--covariate-shift", "--out", ws / "bad.json") == 2


def test_bench_and_experiment(ws):
    cfg = {"schema_version": 1, "kind": "efficiency", "d": 16, "h": 4, "k": 32, "seq_len": 8, "lora_rank": 2,
           "warmup": 1, "repeats": 2}
    (ws / "eff.json").write_text(json.dumps(cfg))
    assert run("bench", "--config", ws / "eff.json", "--no-timing", "--out", ws / "b1") == 0
    assert run("bench", "--config", ws / "eff.json", "--no-timing", "--out", ws / "b2") == 0
    assert (ws / "b1" / "efficiency.csv").read_bytes() == (ws / "b2" / "efficiency.csv").read_bytes()
    gen = {"schema_version": 1, "kind": "generalization", "d": 8, "h": 2, "k": 16, "seq_len": 4, "n_train": 4,
           "n_eval": 4, "ratios": [0.1], "steps": 10}
    (ws / "gen.json").write_text(json.dumps(gen))
    assert run("experiment", "--config", ws / "gen.json", "--out", ws / "e") == 0
    lines = (ws / "e" / "generalization.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    (ws / "bad.json").write_text(json.dumps({"schema_version": 1, "kind": "generalization", "ratios": [3]}))
    assert run("experiment", "--config", ws / "bad.json", "--out", ws / "e2") == 1


def test_console_entry_point(ws):
    proc = subprocess.run([sys.executable, "-m", "s2ft.cli", "graph", "--model", str(ws / "m.ckpt")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["structures"]
