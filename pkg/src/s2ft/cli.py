"""Command-line front door.

Exit codes: 0 success, 1 usage or configuration error, 2 failed bound,
integrity or precondition check, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .adapter import (
    AdapterRegistry,
    extract,
    parallel_apply,
    registry_from_dir,
    save_adapter,
    weighted_fuse,
)
from .depgraph import build_graph, discover_coupled, export_json
from .errors import (
    ArgumentError,
    ConfigError,
    IntegrityError,
    LookupFailure,
    NumericError,
    PreconditionError,
    S2FTError,
)
from .netspec import forward_block, init_block, load_checkpoint, save_checkpoint
from .permute import PermutationPlan, apply_permutation, plan_permutation, verify_output_invariance
from .rng import make_rng
from .select import STRATEGIES, CalibrationBatch, SelectionMask, budget_from_ratio, select
from .sparsetrain import METHODS, TrainConfig, TrainData, accounting, regions_for_selection, train_loop

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ArgumentError(f"expected comma-separated integers, got {text!r}") from None


def _load_arrays(path, *names) -> list[np.ndarray]:
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if isinstance(data, np.ndarray):
        return [data]
    missing = [n for n in names if n not in data]
    if missing:
        raise ConfigError(f"{path} lacks arrays {missing}")
    return [np.asarray(data[n], dtype=np.float64) for n in names]


# ---------------------------------------------------------------- commands


def cmd_init(a) -> int:
    if a.config:
        doc = _read_json(a.config)
        d, h, k = int(doc["d"]), int(doc["h"]), int(doc["k"])
    else:
        d, h, k = a.d, a.h, a.k
    if d % h:
        raise ConfigError("d must be divisible by h")
    save_checkpoint(init_block(d, h, k, a.seed, causal=a.causal), a.out, seed=a.seed)
    return EXIT_OK


def cmd_data(a) -> int:
    """Synthetic regression data from a perturbed copy of the model."""
    model = load_checkpoint(a.model)
    rng = make_rng(a.seed)
    shift = {w: model.get(w) + a.shift * rng.standard_normal(model.weight_shape(w)) / np.sqrt(model.weight_shape(w)[1])
             for w in harness.SHIFT_WEIGHTS}
    teacher = model.replace(**shift)
    X = rng.standard_normal((a.n, a.seq_len, model.d))
    Y, _ = forward_block(teacher, X)
    with open(a.out, "wb") as fh:
        np.savez(fh, X=X, Y=Y)
    return EXIT_OK


def cmd_graph(a) -> int:
    g = build_graph(load_checkpoint(a.model))
    text = export_json(g, discover_coupled(g))
    if a.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(a.out).write_text(text)
    return EXIT_OK


def cmd_select(a) -> int:
    model = load_checkpoint(a.model)
    calib = None
    if a.calib:
        if a.strategy == "G":
            X, Y = _load_arrays(a.calib, "X", "Y")
            calib = CalibrationBatch(X, Y)
        else:
            (X,) = _load_arrays(a.calib, "X")
            calib = CalibrationBatch(X)
    mask = select(a.strategy, a.polarity, model, calib, budget_from_ratio(a.ratio, model, a.widen), seed=a.seed)
    _write_json(a.out, mask.to_dict())
    return EXIT_OK


def cmd_permute(a) -> int:
    model = load_checkpoint(a.model)
    mask = SelectionMask.load(a.mask)
    mask.validate(model)
    plan = plan_permutation(mask, discover_coupled(build_graph(model)), widen=a.widen)
    permuted = apply_permutation(model, plan)
    X = make_rng(a.seed).standard_normal((4, model.d))
    rep = verify_output_invariance(model, permuted, X)
    save_checkpoint(permuted, a.out)
    plan.save(a.plan or str(a.out) + ".plan.json")
    print(json.dumps({"max_abs_diff": rep.max_abs_diff, "passed": rep.passed}))
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_train(a) -> int:
    base = load_checkpoint(a.model)
    cfg = TrainConfig.from_dict(_read_json(a.config)) if a.config else TrainConfig()
    if a.seed is not None:
        cfg = replace(cfg, seed=a.seed)
    X, Y = _load_arrays(a.data, "X", "Y")
    data = TrainData(X, Y)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    model, plan = base, None
    if a.method == "s2ft":
        if not a.mask:
            raise ArgumentError("--mask is required for --method s2ft")
        mask = SelectionMask.load(a.mask)
        mask.validate(base)
        plan = plan_permutation(mask, discover_coupled(build_graph(base)), widen=a.widen)
        model = apply_permutation(base, plan)
        cfg = replace(cfg, regions=tuple(regions_for_selection(model, plan.n_heads, plan.n_channels, a.widen)))
        spec = cfg.regions
    elif a.method == "lora":
        spec = cfg.rank
    elif a.method == "full":
        spec = cfg.trainable
    else:
        spec = cfg.sparse_ratio
    if a.method == "s2ft" and not cfg.regions:
        raise ConfigError("the mask selects nothing to train")
    res = train_loop(a.method, model, data, cfg)
    n_seq, seq_len = data.X.shape[0], data.X.shape[1]
    batch = cfg.batch_size or n_seq
    acc = accounting(model, a.method, spec, batch=batch, seq_len=seq_len, optimizer=cfg.optimizer,
                     lora_targets=cfg.lora_targets)
    save_checkpoint(res.merged(), out / "model.ckpt", seed=cfg.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(res.losses):
        w.writerow([i, repr(v)])
    (out / "loss.csv").write_text(buf.getvalue())
    _write_json(out / "accounting.json", acc.to_dict())
    if plan is not None:
        plan.save(out / "plan.json")
        adir = out / "adapters"
        adir.mkdir(exist_ok=True)
        for ad in extract(res.model, base, plan):
            save_adapter(ad, adir / f"{a.name}_{ad.weight_id}.s2ad", plan_ref="plan.json")
    return EXIT_OK


def cmd_adapter(a) -> int:
    return {"extract": _adapter_extract, "fuse": _adapter_fuse, "switch": _adapter_switch,
            "parallel-bench": _adapter_parallel}[a.action](a)


def _adapter_extract(a) -> int:
    base = load_checkpoint(a.base)
    tuned = load_checkpoint(a.tuned)
    plan = PermutationPlan.load(a.plan)
    reg = Path(a.registry)
    reg.mkdir(parents=True, exist_ok=True)
    for ad in extract(tuned, base, plan):
        save_adapter(ad, reg / f"{a.name}_{ad.weight_id}.s2ad", plan_ref=str(a.plan))
    return EXIT_OK


def _adapter_fuse(a) -> int:
    model = load_checkpoint(a.model)
    reg = registry_from_dir(a.registry)
    ids = a.ids.split(",") if a.ids else sorted(reg.adapters)
    weights = [float(t) for t in a.weights.split(",")] if a.weights else [1.0] * len(ids)
    if len(weights) != len(ids):
        raise ArgumentError("--weights needs one value per adapter id")
    groups: dict[str, list] = {}
    for aid, wt in zip(ids, weights):
        groups.setdefault(reg.get(aid).weight_id, []).append((reg.get(aid), wt))
    live = AdapterRegistry()
    for wid, items in sorted(groups.items()):
        composite = weighted_fuse([ad for ad, _ in items], [wt for _, wt in items])
        live.register(f"fused_{wid}", composite)
        live.fuse(model, f"fused_{wid}")
    save_checkpoint(model, a.out)
    return EXIT_OK


def _adapter_switch(a) -> int:
    model = load_checkpoint(a.model)
    reg = registry_from_dir(a.registry)
    reg.fuse(model, a.from_id)
    t0 = time.perf_counter()
    rep = reg.switch(model, a.from_id, a.to_id)
    elapsed = time.perf_counter() - t0
    doc = rep.to_dict()
    doc["from"], doc["to"] = a.from_id, a.to_id
    _write_json(a.out, doc)
    if a.out_model:
        save_checkpoint(model, a.out_model)
    print(f"switch took {elapsed:.6f} s", file=sys.stderr)
    return EXIT_OK


def _adapter_parallel(a) -> int:
    model = load_checkpoint(a.model)
    reg = registry_from_dir(a.registry)
    W = model.get(a.weight)
    ids = [aid for aid in sorted(reg.adapters) if reg.get(aid).weight_id == a.weight]
    if not ids:
        raise LookupFailure(f"registry has no adapters for {a.weight}")
    rng = make_rng(a.seed)
    requests = [(aid, rng.standard_normal((a.tokens, W.shape[1]))) for aid in ids]
    outputs, reports = parallel_apply(W, reg, requests)
    errors = []
    for (aid, x), y in zip(requests, outputs):
        fused = reg.get(aid).apply_to(W)
        errors.append(float(np.max(np.abs(x @ fused.T - y))))
    worst = max(errors)
    doc = {"weight": a.weight, "adapters": ids, "tokens": a.tokens, "max_abs_error": worst,
           "reports": [r.to_dict() for r in reports]}
    _write_json(a.out, doc)
    return EXIT_OK if worst <= 1e-10 else EXIT_CHECK


def cmd_theory(a) -> int:
    if a.config:
        cfg = harness.TheoryConfig.from_dict(_read_json(a.config))
    else:
        cfg = harness.TheoryConfig()
    over = {}
    for key in ("suite", "trials", "seed", "layer"):
        if getattr(a, key) is not None:
            over[key] = getattr(a, key)
    if a.dims:
        over["dims"] = tuple(_ints(a.dims))
    if a.covariate_shift:
        over["covariate_shift"] = True
    cfg = replace(cfg, **over)
    outcome = harness.run_theory_suite(cfg)
    _write_json(a.out, outcome.report)
    for err in outcome.report["errors"]:
        print(f"trial {err['trial']}: {err['error']}: {err['message']}", file=sys.stderr)
    return outcome.exit_code


def cmd_bench(a) -> int:
    cfg = harness.EfficiencyConfig.from_dict(_read_json(a.config)) if a.config else harness.EfficiencyConfig()
    if a.seed is not None:
        cfg = replace(cfg, seed=a.seed)
    if a.no_timing:
        cfg = replace(cfg, timing=False)
    rows = harness.run_efficiency_report(cfg)
    text = harness.efficiency_csv(rows)
    if a.out in (None, "-"):
        sys.stdout.write(text)
    else:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "efficiency.csv").write_text(text)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_experiment(a) -> int:
    cfg = harness.load_config(a.config) if a.config else harness.ExperimentConfig()
    if isinstance(cfg, harness.TheoryConfig):
        outcome = harness.run_theory_suite(cfg)
        _write_json(Path(a.out or cfg.out_dir or ".") / "theory.json", outcome.report)
        return outcome.exit_code
    if a.seed is not None:
        cfg = replace(cfg, **({"seeds": (a.seed,)} if isinstance(cfg, harness.ExperimentConfig) else {"seed": a.seed}))
    out = a.out or cfg.out_dir
    if out is None:
        raise ArgumentError("--out (or out_dir in the config) is required")
    if isinstance(cfg, harness.EfficiencyConfig):
        harness.run_efficiency_report(cfg, out)
        return EXIT_OK
    records = harness.run_generalization_experiment(cfg, out)
    failed = [r for r in records if r.status.startswith("failed")]
    for r in failed:
        print(f"{r.method} ratio={r.ratio} seed={r.seed}: {r.status}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2ft", description="Structured sparse fine-tuning engine and theory lab.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="write a randomly initialised block checkpoint")
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--h", type=int, default=8)
    s.add_argument("--k", type=int, default=128)
    s.add_argument("--causal", action="store_true")
    s.add_argument("--config", help="JSON with d, h, k")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("data", help="write synthetic (X, Y) regression data as .npz")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, default=16, help="number of sequences")
    s.add_argument("--seq-len", type=int, default=8)
    s.add_argument("--shift", type=float, default=0.1, help="teacher perturbation scale")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_data)

    s = sub.add_parser("graph", help="export the dependency graph and coupled structures")
    s.add_argument("--model", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("select", help="choose heads and channels under a budget")
    s.add_argument("--model", required=True)
    s.add_argument("--strategy", choices=STRATEGIES, default="R")
    s.add_argument("--polarity", choices=("largest", "smallest"), default="largest")
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--calib", help=".npz with X (and Y for strategy G)")
    s.add_argument("--widen", action="store_true", help="count producer rows in the budget")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("permute", help="co-permute a checkpoint so the selection is contiguous")
    s.add_argument("--model", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--widen", action="store_true")
    s.add_argument("--plan", help="where to write the plan (default <out>.plan.json)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_permute)

    s = sub.add_parser("train", help="fine-tune with one method")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help=".npz with X and Y")
    s.add_argument("--mask")
    s.add_argument("--widen", action="store_true")
    s.add_argument("--config")
    s.add_argument("--name", default="adapter", help="prefix for extracted adapter files")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("adapter", help="adapter lifecycle operations")
    act = s.add_subparsers(dest="action", required=True, parser_class=_Parser)
    e = act.add_parser("extract")
    e.add_argument("--base", required=True)
    e.add_argument("--tuned", required=True)
    e.add_argument("--plan", required=True)
    e.add_argument("--name", default="adapter")
    e.add_argument("--registry", required=True)
    f = act.add_parser("fuse")
    f.add_argument("--model", required=True)
    f.add_argument("--registry", required=True)
    f.add_argument("--ids", help="comma-separated adapter ids (default all)")
    f.add_argument("--weights", help="comma-separated fusion weights")
    f.add_argument("--out", required=True)
    w = act.add_parser("switch")
    w.add_argument("--model", required=True)
    w.add_argument("--registry", required=True)
    w.add_argument("--from", dest="from_id", required=True)
    w.add_argument("--to", dest="to_id", required=True)
    w.add_argument("--out-model")
    w.add_argument("--out")
    b = act.add_parser("parallel-bench")
    b.add_argument("--model", required=True)
    b.add_argument("--registry", required=True)
    b.add_argument("--weight", default="Wdown")
    b.add_argument("--tokens", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    s.set_defaults(func=cmd_adapter)

    s = sub.add_parser("theory", help="run the deep-linear bound suite")
    s.add_argument("--suite", choices=("theorem2",))
    s.add_argument("--trials", type=int)
    s.add_argument("--dims", help="layer widths, e.g. 6,8,6")
    s.add_argument("--layer", type=int)
    s.add_argument("--covariate-shift", action="store_true", help="negative control: violate the hypotheses")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_theory)

    s = sub.add_parser("bench", help="efficiency report at matched budgets")
    s.add_argument("--config")
    s.add_argument("--no-timing", action="store_true", help="skip the step-time measurement")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("experiment", help="run an experiment from a JSON config")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (IntegrityError, PreconditionError)):
        return EXIT_CHECK
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_USAGE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (S2FTError, OSError, KeyError) as exc:
        print(f"s2ft: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
