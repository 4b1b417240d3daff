"""Experiment orchestration and report emission.

Three experiment kinds share one JSON config format (``schema_version``
is required):

* ``generalization``: a toy memorization/generalization study.  Every
  method is trained on an in-distribution (ID) regression task derived
  from a pretrained block and evaluated on ID, near-OOD and far-OOD
  label maps.  One CSV row per (method, ratio, seed).
* ``efficiency``: closed-form cost counters plus measured step times at
  matched trainable budgets.
* ``theory``: the deep-linear bound suite.

Synthetic tasks.  The ID teacher is the pretrained block with a random
perturbation of Wo and Wdown.  OOD teachers add a further shift Xi to
the ID teacher's Wo and Wdown, scaled so that the shift meter
``||Xi||_F^2 / ||Delta_id||_F^2`` equals ``near_eps2`` or ``far_eps2``.
A far shift must reach ``far_threshold``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .depgraph import build_graph, discover_coupled
from .errors import ArgumentError, ConfigError, NumericError, PreconditionError
from .netspec import WEIGHT_ORDER, TransformerBlockSpec, forward_block, init_block
from .permute import apply_permutation, plan_permutation
from .rng import derive_seed, make_rng
from .select import SelectionMask, budget_from_params, budget_from_ratio, select
from .sparsetrain import (
    LORA_TARGETS,
    METHODS,
    TrainConfig,
    TrainData,
    accounting,
    make_stepper,
    mse_loss,
    regions_for_selection,
    train_loop,
)
from .theory import theorem2_trial

SCHEMA_VERSION = 1
SHIFT_WEIGHTS = ("Wo", "Wdown")

CSV_COLUMNS = (
    "method", "ratio", "seed", "trainable_params", "final_train_loss", "id_loss",
    "near_ood_loss", "far_ood_loss", "taped_bytes", "optimizer_bytes", "step_flops",
    "steps", "status", "wall_time_s",
)
EFFICIENCY_COLUMNS = (
    "method", "trainable_params", "taped_bytes", "optimizer_bytes", "fwd_flops",
    "bwd_flops", "step_flops", "step_time_median_s",
)
TIMING_COLUMNS = ("wall_time_s", "step_time_median_s")


def _from_doc(cls, doc: dict, kind: str):
    doc = dict(doc)
    version = doc.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{kind} config needs schema_version {SCHEMA_VERSION}, got {version}")
    found = doc.pop("kind", kind)
    if found != kind:
        raise ConfigError(f"expected a {kind} config, got kind {found!r}")
    names = {f.name for f in fields(cls)}
    extra = set(doc) - names
    if extra:
        raise ConfigError(f"unknown {kind} config keys {sorted(extra)}")
    for f in fields(cls):
        if f.name in doc and isinstance(doc[f.name], list):
            doc[f.name] = tuple(doc[f.name])
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _to_doc(obj, kind: str) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind}
    for k, v in asdict(obj).items():
        doc[k] = list(v) if isinstance(v, tuple) else v
    return doc


@dataclass(frozen=True)
class ExperimentConfig:
    d: int = 16
    h: int = 4
    k: int = 32
    seq_len: int = 8
    n_train: int = 16
    n_eval: int = 16
    methods: tuple[str, ...] = METHODS
    ratios: tuple[float, ...] = (0.1, 0.01, 0.001)
    seeds: tuple[int, ...] = (0,)
    steps: int = 300
    optimizer: str = "adamw"
    lr: float = 1e-2
    schedule: str = "cosine"
    strategy: str = "R"
    id_shift: float = 0.1
    near_eps2: float = 0.05
    far_eps2: float = 4.0
    far_threshold: float = 1.0
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.ratios or any(not 0 < float(r) <= 1 for r in self.ratios):
            raise ConfigError("ratios must lie in (0, 1]")
        if any(m not in METHODS for m in self.methods) or not self.methods:
            raise ConfigError(f"methods must be drawn from {METHODS}")
        if min(self.d, self.h, self.k, self.seq_len, self.n_train, self.n_eval, self.steps) < 1:
            raise ConfigError("dimensions, sizes and steps must be positive")
        if self.d % self.h:
            raise ConfigError("d must be divisible by h")
        if self.strategy not in ("R", "W"):
            raise ConfigError("generalization runs select with R or W (no calibration data)")
        if not 0 <= self.near_eps2 < self.far_threshold <= self.far_eps2:
            raise ConfigError("need 0 <= near_eps2 < far_threshold <= far_eps2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _from_doc(cls, doc, "generalization")

    def to_dict(self) -> dict:
        return _to_doc(self, "generalization")


@dataclass(frozen=True)
class EfficiencyConfig:
    d: int = 128
    h: int = 8
    k: int = 512
    seq_len: int = 256
    batch: int = 1
    lora_rank: int = 8
    methods: tuple[str, ...] = ("s2ft", "lora", "full")
    optimizer: str = "adamw"
    warmup: int = 5
    repeats: int = 30
    seed: int = 0
    timing: bool = True
    out_dir: str | None = None

    def __post_init__(self):
        if any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must be drawn from {METHODS}")
        if self.repeats < 1 or self.warmup < 0 or self.lora_rank < 1:
            raise ConfigError("need repeats >= 1, warmup >= 0 and lora_rank >= 1")
        if self.d % self.h:
            raise ConfigError("d must be divisible by h")

    @classmethod
    def from_dict(cls, doc: dict) -> "EfficiencyConfig":
        return _from_doc(cls, doc, "efficiency")

    def to_dict(self) -> dict:
        return _to_doc(self, "efficiency")


@dataclass(frozen=True)
class TheoryConfig:
    suite: str = "theorem2"
    trials: int = 100
    dims: tuple[int, ...] = (6, 8, 8, 6)
    seed: int = 7
    layer: int | None = None
    covariate_shift: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if self.suite != "theorem2":
            raise ConfigError(f"unknown theory suite {self.suite!r}")
        if self.trials < 0:
            raise ConfigError("trials must be non-negative")
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ConfigError(f"invalid dims {self.dims}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TheoryConfig":
        return _from_doc(cls, doc, "theory")

    def to_dict(self) -> dict:
        return _to_doc(self, "theory")


def load_config(path):
    """Read a JSON config and dispatch on its ``kind`` field."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    kinds = {"generalization": ExperimentConfig, "efficiency": EfficiencyConfig, "theory": TheoryConfig}
    kind = doc.get("kind")
    if kind not in kinds:
        raise ConfigError(f"config kind must be one of {sorted(kinds)}, got {kind!r}")
    return kinds[kind].from_dict(doc)


# ---------------------------------------------------------------- tasks


@dataclass
class TaskSet:
    """Pretrained block, teachers and data for one seed."""

    pretrained: TransformerBlockSpec
    teachers: dict[str, TransformerBlockSpec]
    X_train: np.ndarray
    Y_train: np.ndarray
    X_eval: np.ndarray
    Y_eval: dict[str, np.ndarray]
    shift_eps2: dict[str, float] = field(default_factory=dict)


def _random_shift(model: TransformerBlockSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {w: rng.standard_normal(model.weight_shape(w)) for w in SHIFT_WEIGHTS}


def _norm2(delta: dict[str, np.ndarray]) -> float:
    return float(sum(np.sum(v * v) for v in delta.values()))


def _apply(model: TransformerBlockSpec, delta: dict[str, np.ndarray], scale: float) -> TransformerBlockSpec:
    return model.replace(**{w: model.get(w) + scale * v for w, v in delta.items()})


def shift_meter(base: TransformerBlockSpec, shifted: TransformerBlockSpec, reference: TransformerBlockSpec,
                pretrained: TransformerBlockSpec) -> float:
    """Shift energy of ``shifted - base`` relative to the ID update ``reference - pretrained``."""
    num = sum(float(np.sum((shifted.get(w) - base.get(w)) ** 2)) for w in WEIGHT_ORDER)
    den = sum(float(np.sum((reference.get(w) - pretrained.get(w)) ** 2)) for w in WEIGHT_ORDER)
    if den == 0:
        raise ArgumentError("reference update is zero")
    return num / den


def make_tasks(cfg: ExperimentConfig, seed: int) -> TaskSet:
    pre = init_block(cfg.d, cfg.h, cfg.k, derive_seed(seed, 0))
    rng = make_rng(derive_seed(seed, 1))
    d_id = _random_shift(pre, rng)
    id_scale = cfg.id_shift * math.sqrt(sum(float(np.sum(pre.get(w) ** 2)) for w in SHIFT_WEIGHTS) / _norm2(d_id))
    teacher = _apply(pre, d_id, id_scale)
    id_energy = id_scale ** 2 * _norm2(d_id)
    teachers = {"id": teacher}
    eps2 = {"id": 0.0}
    for name, target in (("near", cfg.near_eps2), ("far", cfg.far_eps2)):
        xi = _random_shift(pre, rng)
        teachers[name] = _apply(teacher, xi, math.sqrt(target * id_energy / _norm2(xi)))
        eps2[name] = shift_meter(teacher, teachers[name], teacher, pre)
    if eps2["far"] < cfg.far_threshold * (1 - 1e-9):
        raise ConfigError("far-OOD shift is below far_threshold")
    data_rng = make_rng(derive_seed(seed, 2))
    X_train = data_rng.standard_normal((cfg.n_train, cfg.seq_len, cfg.d))
    X_eval = data_rng.standard_normal((cfg.n_eval, cfg.seq_len, cfg.d))
    Y_train, _ = forward_block(teacher, X_train)
    Y_eval = {name: forward_block(t, X_eval)[0] for name, t in teachers.items()}
    return TaskSet(pre, teachers, X_train, Y_train, X_eval, Y_eval, eps2)


# ---------------------------------------------------------------- runs


@dataclass
class RunRecord:
    method: str
    ratio: float
    seed: int
    trainable_params: int
    final_train_loss: float
    id_loss: float
    near_ood_loss: float
    far_ood_loss: float
    taped_bytes: int
    optimizer_bytes: int
    step_flops: int
    steps: int
    status: str
    wall_time_s: float

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def lora_rank_for_ratio(model: TransformerBlockSpec, ratio: float, targets: Sequence[str] = LORA_TARGETS) -> int:
    """Largest rank whose adapters fit in ``ratio`` of the block's parameters."""
    per_rank = sum(sum(model.weight_shape(t)) for t in targets)
    cap = min(min(model.weight_shape(t)) for t in targets)
    target = int(math.floor(ratio * model.num_params() * (1 + 1e-12)))
    return min(cap, target // per_rank)


def s2ft_selection(model: TransformerBlockSpec, ratio: float, strategy: str, seed: int) -> SelectionMask:
    return select(strategy, "largest", model, None, budget_from_ratio(ratio, model), seed=seed)


def eval_losses(model: TransformerBlockSpec, tasks: TaskSet) -> dict[str, float]:
    Y, _ = forward_block(model, tasks.X_eval)
    return {name: mse_loss(Y, T)[0] for name, T in tasks.Y_eval.items()}


def run_single(tasks: TaskSet, method: str, ratio: float, seed: int, cfg: ExperimentConfig,
               mask: SelectionMask | None = None) -> tuple[RunRecord, TransformerBlockSpec]:
    """Train one method on the ID task; returns the record and the (merged) model."""
    t0 = time.perf_counter()
    pre = tasks.pretrained
    train_seed = derive_seed(seed, 3)
    base = TrainConfig(epochs=cfg.steps, lr=cfg.lr, optimizer=cfg.optimizer, seed=train_seed,
                       schedule=cfg.schedule)
    n = cfg.n_train
    model = pre
    if method == "s2ft":
        mask = mask or s2ft_selection(pre, ratio, cfg.strategy, derive_seed(seed, 4))
        plan = plan_permutation(mask, discover_coupled(build_graph(pre)))
        model = apply_permutation(pre, plan)
        regions = tuple(regions_for_selection(model, plan.n_heads, plan.n_channels))
        tc = replace(base, regions=regions)
        spec = regions
    elif method == "lora":
        r = lora_rank_for_ratio(pre, ratio)
        tc = replace(base, rank=max(r, 1))
        spec = r
    elif method == "full":
        tc, spec = base, None
    else:
        tc = replace(base, sparse_ratio=float(ratio))
        spec = float(ratio)
    acc = accounting(model, method, spec, batch=n, seq_len=cfg.seq_len, optimizer=cfg.optimizer)
    status = "ok"
    steps = cfg.steps
    if (method == "lora" and spec == 0) or (method == "s2ft" and not regions):
        # Nothing fits in the budget: the run is the pretrained model.
        status, steps, trained = "empty_budget", 0, model
        acc = replace(acc, bwd_flops=0, taped_bytes=0, optimizer_bytes=0)
    else:
        try:
            with np.errstate(all="ignore"):
                res = train_loop(method, model, TrainData(tasks.X_train, tasks.Y_train), tc)
            trained = res.merged()
        except NumericError as exc:
            status, trained = "failed: " + str(exc).split("\n")[0], None
    if trained is not None:
        Y, _ = forward_block(trained, tasks.X_train)
        train_loss = mse_loss(Y, tasks.Y_train)[0]
        ev = eval_losses(trained, tasks)
        if not all(math.isfinite(v) for v in [train_loss, *ev.values()]):
            status, trained = "failed: non-finite loss", None
    if trained is None:
        train_loss = math.nan
        ev = {"id": math.nan, "near": math.nan, "far": math.nan}
    rec = RunRecord(method, float(ratio), int(seed), acc.trainable_params, train_loss, ev["id"], ev["near"],
                    ev["far"], acc.taped_bytes, acc.optimizer_bytes, acc.step_flops, steps, status,
                    round(time.perf_counter() - t0, 6))
    return rec, trained


def _runs(cfg: ExperimentConfig):
    return [(seed, ratio, method) for seed in cfg.seeds for ratio in cfg.ratios for method in cfg.methods]


def run_generalization_experiment(cfg: ExperimentConfig, out_dir=None) -> list[RunRecord]:
    """Train every (method, ratio, seed); rows come back in config order."""
    tasks = {seed: make_tasks(cfg, seed) for seed in cfg.seeds}

    def one(job):
        seed, ratio, method = job
        return run_single(tasks[seed], method, ratio, seed, cfg)[0]

    jobs = _runs(cfg)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(one, jobs))
    else:
        records = [one(j) for j in jobs]
    out_dir = out_dir or cfg.out_dir
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "generalization.csv").write_text(records_csv(records))
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return records


def records_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def strip_columns(csv_text: str, drop: Sequence[str] = TIMING_COLUMNS) -> str:
    """CSV text without the named columns (used to compare reports across runs)."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    keep = [i for i, c in enumerate(rows[0]) if c not in drop]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([row[i] for i in keep])
    return buf.getvalue()


# ---------------------------------------------------------------- efficiency


def matched_s2ft_mask(model: TransformerBlockSpec, lora_rank: int, seed: int) -> SelectionMask:
    """Random selection with at most the LoRA adapters' parameter count."""
    params = sum(lora_rank * sum(model.weight_shape(t)) for t in LORA_TARGETS)
    return select("R", "n/a", model, None, budget_from_params(params, model), seed=seed)


def time_steps(steppers: dict, X: np.ndarray, T: np.ndarray, warmup: int, repeats: int) -> dict[str, float]:
    """Median step time per method, measured in interleaved rounds.

    Each round times one step of every method in turn, so slow drifts in
    machine speed affect all methods alike.
    """
    for st in steppers.values():
        for _ in range(warmup):
            st.step(X, T)
    times: dict[str, list[float]] = {m: [] for m in steppers}
    for _ in range(repeats):
        for m, st in steppers.items():
            t0 = time.perf_counter()
            st.step(X, T)
            times[m].append(time.perf_counter() - t0)
    return {m: statistics.median(v) for m, v in times.items()}


def run_efficiency_report(cfg: EfficiencyConfig, out_dir=None) -> list[dict]:
    """Per-method counters and median step time at a LoRA-matched budget."""
    pre = init_block(cfg.d, cfg.h, cfg.k, derive_seed(cfg.seed, 0))
    mask = matched_s2ft_mask(pre, cfg.lora_rank, derive_seed(cfg.seed, 4))
    plan = plan_permutation(mask, discover_coupled(build_graph(pre)))
    permuted = apply_permutation(pre, plan)
    regions = tuple(regions_for_selection(permuted, plan.n_heads, plan.n_channels))
    s2ft_params = sum(r.size(permuted) for r in regions)
    specs = {
        "s2ft": (permuted, regions, {"regions": regions}),
        "lora": (pre, cfg.lora_rank, {"rank": cfg.lora_rank}),
        "full": (pre, None, {}),
        "spft": (pre, s2ft_params / pre.num_params(), {"sparse_ratio": s2ft_params / pre.num_params()}),
    }
    rng = make_rng(derive_seed(cfg.seed, 2))
    X = rng.standard_normal((cfg.batch, cfg.seq_len, cfg.d))
    T = rng.standard_normal((cfg.batch, cfg.seq_len, cfg.d))
    timings = {}
    if cfg.timing:
        steppers = {}
        for method in cfg.methods:
            model, _, extra = specs[method]
            tc = TrainConfig(lr=1e-4, optimizer=cfg.optimizer, seed=cfg.seed, **extra)
            steppers[method] = make_stepper(method, model.copy(), tc)
        timings = time_steps(steppers, X, T, cfg.warmup, cfg.repeats)
    rows = []
    for method in cfg.methods:
        model, spec, _ = specs[method]
        acc = accounting(model, method, spec, batch=cfg.batch, seq_len=cfg.seq_len, optimizer=cfg.optimizer)
        row = acc.to_dict()
        row["step_time_median_s"] = timings.get(method, math.nan)
        rows.append({c: row[c] for c in EFFICIENCY_COLUMNS})
    out_dir = out_dir or cfg.out_dir
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "efficiency.csv").write_text(efficiency_csv(rows))
    return rows


def efficiency_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EFFICIENCY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in EFFICIENCY_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------- theory


@dataclass
class TheoryOutcome:
    report: dict
    exit_code: int


def run_theory_suite(cfg: TheoryConfig) -> TheoryOutcome:
    """Run the bound suite trial by trial.

    Exit code 0 when every trial passes, 2 when any bound fails or a
    trial violates the suite's preconditions (those trials are logged
    under ``errors``).
    """
    trials, errors = [], []
    for t in range(cfg.trials):
        try:
            rep = theorem2_trial(list(cfg.dims), t, cfg.seed, cfg.layer, covariate_shift=cfg.covariate_shift)
        except PreconditionError as exc:
            errors.append({"trial": t, "error": "precondition", "message": str(exc)})
            continue
        trials.append(rep.to_dict())
    failed = [d["trial"] for d in trials if not d["passed"]]
    report = {
        "schema_version": SCHEMA_VERSION,
        "suite": cfg.suite,
        "dims": list(cfg.dims),
        "seed": cfg.seed,
        "trials": trials,
        "errors": errors,
        "failed_trials": failed,
        "passed": not failed and not errors,
    }
    return TheoryOutcome(report, 0 if report["passed"] else 2)
