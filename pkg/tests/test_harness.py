import csv
import io
import json

import numpy as np
import pytest

from s2ft import harness
from s2ft.errors import ConfigError
from s2ft.harness import (
    EfficiencyConfig,
    ExperimentConfig,
    TaskSet,
    TheoryConfig,
    efficiency_csv,
    eval_losses,
    load_config,
    make_tasks,
    records_csv,
    run_efficiency_report,
    run_generalization_experiment,
    run_single,
    run_theory_suite,
    strip_columns,
)
from s2ft.netspec import WEIGHT_ORDER, forward_block
from s2ft.permute import apply_permutation, plan_permutation
from s2ft.depgraph import build_graph, discover_coupled
from s2ft.select import SelectionMask

TINY = ExperimentConfig(d=8, h=2, k=16, seq_len=4, n_train=4, n_eval=4, ratios=(0.1, 0.5), seeds=(0, 1), steps=20)
SMALL_EFF = EfficiencyConfig(d=16, h=4, k=32, seq_len=8, lora_rank=2, methods=("s2ft", "lora", "full", "spft"),
                             warmup=1, repeats=3)


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 1, "ratios": [0.0]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 1, "seeds": []})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 2})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 1, "unknown": 3})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "kind": "theory", "trials": 3}))
    cfg = load_config(p)
    assert isinstance(cfg, TheoryConfig) and cfg.trials == 3
    p.write_text(json.dumps(TINY.to_dict()))
    assert load_config(p) == TINY


def test_row_count_and_determinism(tmp_path):
    recs = run_generalization_experiment(TINY, tmp_path / "a")
    assert len(recs) == len(TINY.methods) * len(TINY.ratios) * len(TINY.seeds)
    text = (tmp_path / "a" / "generalization.csv").read_text()
    rows = _rows(text)
    assert list(rows[0]) == list(harness.CSV_COLUMNS)
    assert all(r["status"] == "ok" for r in rows)
    for r in rows:
        for c in ("final_train_loss", "id_loss", "near_ood_loss", "far_ood_loss"):
            assert np.isfinite(float(r[c]))
    again = run_generalization_experiment(TINY, tmp_path / "b")
    assert strip_columns(records_csv(recs)) == strip_columns(records_csv(again))


def test_worker_pool_matches_serial():
    from dataclasses import replace
    serial = run_generalization_experiment(TINY)
    pooled = run_generalization_experiment(replace(TINY, workers=4))
    assert strip_columns(records_csv(serial)) == strip_columns(records_csv(pooled))


def test_shift_levels():
    tasks = make_tasks(ExperimentConfig(), 0)
    assert tasks.shift_eps2["near"] == pytest.approx(0.05)
    assert tasks.shift_eps2["far"] == pytest.approx(4.0)
    assert tasks.shift_eps2["far"] >= ExperimentConfig().far_threshold


def test_ratio_one_equal_train_loss():
    cfg = ExperimentConfig(d=8, h=2, k=16, seq_len=8, n_train=8, n_eval=8, ratios=(1.0,), steps=3000, lr=5e-3)
    tasks = make_tasks(cfg, 0)
    losses = {m: run_single(tasks, m, 1.0, 0, cfg)[0].final_train_loss for m in cfg.methods}
    assert max(losses.values()) - min(losses.values()) <= 1e-6


def test_empty_budget_rows():
    cfg = ExperimentConfig(ratios=(0.001,), steps=5)
    recs = run_generalization_experiment(cfg)
    by = {r.method: r for r in recs}
    assert by["s2ft"].status == "empty_budget" and by["s2ft"].steps == 0
    assert by["lora"].status == "empty_budget"
    pre_losses = eval_losses(make_tasks(cfg, 0).pretrained, make_tasks(cfg, 0))
    assert by["s2ft"].far_ood_loss == pre_losses["far"]


def test_orthogonal_shift_keeps_pretrained_far_loss():
    cfg = ExperimentConfig(steps=50)
    tasks = make_tasks(cfg, 0)
    chans = (1, 4, 9, 20)
    pre = tasks.pretrained
    Wup = pre.Wup.copy()
    Wup[list(chans)] = 0.0  # selected channels are dead, so the trained rows have no output span
    pre_dead = pre.replace(Wup=Wup)
    dead = TaskSet(pre_dead, tasks.teachers, tasks.X_train, tasks.Y_train, tasks.X_eval, tasks.Y_eval)
    mask = SelectionMask((), chans, "R")
    rec, trained = run_single(dead, "s2ft", 0.1, 0, cfg, mask=mask)
    plan = plan_permutation(mask, discover_coupled(build_graph(pre_dead)))
    assert apply_permutation(trained, plan.inverse()).bit_equal(pre_dead)
    base = eval_losses(pre_dead, dead)
    assert abs(rec.far_ood_loss - base["far"]) <= 1e-12 * base["far"]
    full, _ = run_single(dead, "full", 0.1, 0, cfg)
    assert abs(full.far_ood_loss - base["far"]) > 1e-3 * base["far"]


def test_trained_channels_change_output_only_in_their_span():
    cfg = ExperimentConfig(steps=50)
    tasks = make_tasks(cfg, 0)
    mask = SelectionMask((), (2, 5, 11), "R")
    rec, trained = run_single(tasks, "s2ft", 0.1, 0, cfg, mask=mask)
    plan = plan_permutation(mask, discover_coupled(build_graph(tasks.pretrained)))
    back = apply_permutation(trained, plan.inverse())
    for w in WEIGHT_ORDER:
        if w != "Wdown":
            assert np.array_equal(back.get(w), tasks.pretrained.get(w))
    dW = back.Wdown - tasks.pretrained.Wdown
    off = [c for c in range(cfg.k) if c not in mask.ffn_channels]
    assert np.all(dW[:, off] == 0)
    # shift component orthogonal to the update's output span: S2FT and pretrained agree there
    U, s, _ = np.linalg.svd(dW[:, list(mask.ffn_channels)])
    basis = U[:, : int(np.sum(s > 1e-12 * s[0]))]
    Q = np.eye(cfg.d) - basis @ basis.T
    T = tasks.Y_eval["far"]
    Y_pre, _ = forward_block(tasks.pretrained, tasks.X_eval)
    Y_s2, _ = forward_block(back, tasks.X_eval)
    assert np.max(np.abs((Y_s2 - T) @ Q - (Y_pre - T) @ Q)) <= 1e-10


def test_memorization_vs_generalization_pattern():
    recs = {(r.method, r.ratio): r for r in run_generalization_experiment(ExperimentConfig(ratios=(0.1,)))}
    assert recs[("full", 0.1)].final_train_loss < recs[("s2ft", 0.1)].final_train_loss


def test_efficiency_report_properties():
    rows = {r["method"]: r for r in run_efficiency_report(SMALL_EFF)}
    s, lo, f = rows["s2ft"], rows["lora"], rows["full"]
    ratio = s["trainable_params"] / f["trainable_params"]
    assert s["optimizer_bytes"] == pytest.approx(ratio * f["optimizer_bytes"], rel=1e-12)
    assert s["trainable_params"] <= lo["trainable_params"]
    assert lo["step_flops"] > s["step_flops"]
    assert s["taped_bytes"] <= lo["taped_bytes"] and s["optimizer_bytes"] <= lo["optimizer_bytes"]
    assert all(r["step_time_median_s"] > 0 for r in rows.values())


def test_efficiency_deterministic_modulo_timing(tmp_path):
    a = efficiency_csv(run_efficiency_report(SMALL_EFF, tmp_path / "a"))
    b = efficiency_csv(run_efficiency_report(SMALL_EFF, tmp_path / "b"))
    assert strip_columns(a) == strip_columns(b)
    assert (tmp_path / "a" / "efficiency.csv").read_text() == a


def test_theory_suite_outcomes():
    ok = run_theory_suite(TheoryConfig(trials=6))
    assert ok.exit_code == 0 and ok.report["passed"] and len(ok.report["trials"]) == 6
    empty = run_theory_suite(TheoryConfig(trials=0))
    assert empty.exit_code == 0 and empty.report["trials"] == [] and empty.report["errors"] == []
    bad = run_theory_suite(TheoryConfig(trials=3, covariate_shift=True))
    assert bad.exit_code == 2 and len(bad.report["errors"]) == 3
    assert all(e["error"] == "precondition" for e in bad.report["errors"])


@pytest.mark.slow
def test_theory_default_config_exit_zero():
    assert run_theory_suite(TheoryConfig()).exit_code == 0
