"""Partial back-propagation, in-place sparse updates and training baselines.

Trainable parts of a block are contiguous ``TrainableRegion`` ranges of
one weight axis.  ``forward_with_tape`` keeps only what the regions'
gradients need:

* the input slice that multiplies a column range (or the full input for
  a row range),
* the gate/up pre-activations when the gradient has to pass back
  through the frozen SwiGLU to reach attention-side regions,
* attention probabilities and q/k/v columns for widened producer rows.

``backward_partial`` then computes exactly those dense sub-gradients.
``full_grad_oracle`` is an independent, unoptimised reference used by
the tests and by the full fine-tuning baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, NumericError, ShapeError, StateError
from .linalg import mm
from .netspec import (
    WEIGHT_ORDER,
    TransformerBlockSpec,
    forward_block,
    merge_heads,
    split_heads,
    swiglu_backward,
)
from .rng import make_rng

Axis = Literal["rows", "cols"]
Method = Literal["s2ft", "lora", "full", "spft"]
METHODS = ("s2ft", "lora", "full", "spft")

# Activation that each weight reads.
WEIGHT_INPUT = {
    "Wq": "x", "Wk": "x", "Wv": "x", "Wo": "attn",
    "Wup": "h1", "Wgate": "h1", "Wdown": "inner",
}
FLOAT_BYTES = 8


SCHEDULES = ("constant", "cosine")


def scheduled_lr(lr: float, schedule: str, step: int, total: int) -> float:
    """Learning rate at ``step`` of ``total`` (cosine decays to zero)."""
    if schedule == "constant" or total <= 1:
        return lr
    if schedule == "cosine":
        return 0.5 * lr * (1.0 + math.cos(math.pi * step / total))
    raise ArgumentError(f"unknown schedule {schedule!r}")


class TrainingDiverged(NumericError):
    pass


@dataclass(frozen=True)
class TrainableRegion:
    weight_id: str
    axis: Axis
    start: int
    end: int

    def __post_init__(self):
        if self.weight_id not in WEIGHT_ORDER:
            raise ArgumentError(f"unknown weight {self.weight_id!r}")
        if self.axis not in ("rows", "cols"):
            raise ArgumentError(f"axis must be rows or cols, got {self.axis!r}")
        if not 0 <= self.start < self.end:
            raise ArgumentError(f"empty or negative range [{self.start}, {self.end})")

    @property
    def width(self) -> int:
        return self.end - self.start

    def index(self) -> tuple[slice, slice]:
        sl = slice(self.start, self.end)
        return (sl, slice(None)) if self.axis == "rows" else (slice(None), sl)

    def view(self, model: TransformerBlockSpec) -> np.ndarray:
        return model.get(self.weight_id)[self.index()]

    def size(self, model: TransformerBlockSpec) -> int:
        rows, cols = model.weight_shape(self.weight_id)
        return self.width * (cols if self.axis == "rows" else rows)

    def to_dict(self) -> dict:
        return {"weight_id": self.weight_id, "axis": self.axis, "start": self.start, "end": self.end}


def regions_for_selection(model: TransformerBlockSpec, n_heads: int, n_channels: int,
                          widen: bool = False) -> list[TrainableRegion]:
    """Post-permutation regions for the first ``n_heads`` heads and ``n_channels`` channels.

    By default only the consumer side trains (Wo columns, Wdown columns);
    ``widen`` adds the producer rows (Wq/Wk/Wv and Wup/Wgate).
    """
    out = []
    e = n_heads * model.d_h
    if e:
        if widen:
            out += [TrainableRegion(w, "rows", 0, e) for w in ("Wq", "Wk", "Wv")]
        out.append(TrainableRegion("Wo", "cols", 0, e))
    if n_channels:
        if widen:
            out += [TrainableRegion(w, "rows", 0, n_channels) for w in ("Wup", "Wgate")]
        out.append(TrainableRegion("Wdown", "cols", 0, n_channels))
    return out


def full_regions(model: TransformerBlockSpec, weights: Iterable[str] = WEIGHT_ORDER) -> list[TrainableRegion]:
    return [TrainableRegion(w, "rows", 0, model.weight_shape(w)[0]) for w in weights]


@dataclass(frozen=True)
class _Needs:
    """Which intermediate gradients a region set requires."""

    ffn: tuple[int, int] | None  # channel range of du/dg
    heads: tuple[int, int] | None  # channel range (head aligned) of dq/dk/dv
    need_dh1: bool
    dq: bool
    dk: bool
    dv: bool


def validate_regions(model: TransformerBlockSpec, regions: Sequence[TrainableRegion]) -> None:
    seen = set()
    for r in regions:
        if r.weight_id in seen:
            raise ArgumentError(f"more than one region on {r.weight_id}")
        seen.add(r.weight_id)
        rows, cols = model.weight_shape(r.weight_id)
        n = rows if r.axis == "rows" else cols
        if r.end > n:
            raise ArgumentError(f"region {r} exceeds axis length {n}")
        if r.weight_id in ("Wq", "Wk", "Wv") and r.axis == "rows":
            if r.start % model.d_h or r.end % model.d_h:
                raise ArgumentError(f"{r.weight_id} rows must be head aligned (d_h={model.d_h})")


def _union(ranges: list[tuple[int, int]]) -> tuple[int, int] | None:
    if not ranges:
        return None
    return min(a for a, _ in ranges), max(b for _, b in ranges)


def _needs(model: TransformerBlockSpec, regions: Sequence[TrainableRegion]) -> _Needs:
    by = {r.weight_id: r for r in regions}
    ffn = []
    for w in ("Wup", "Wgate"):
        if w in by:
            r = by[w]
            ffn.append((r.start, r.end) if r.axis == "rows" else (0, model.k))
    heads = []
    for w in ("Wq", "Wk", "Wv"):
        if w in by:
            r = by[w]
            heads.append((r.start, r.end) if r.axis == "rows" else (0, model.d))
    head_rng = _union(heads)
    need_dh1 = "Wo" in by or head_rng is not None
    ffn_rng = (0, model.k) if need_dh1 else _union(ffn)
    return _Needs(ffn=ffn_rng, heads=head_rng, need_dh1=need_dh1,
                  dq="Wq" in by, dk="Wk" in by, dv="Wv" in by)


def _tape_keys(model: TransformerBlockSpec, regions: Sequence[TrainableRegion]) -> list[tuple[str, int, int]]:
    """(tensor, lo, hi) column slices the tape must hold, deduplicated and ordered."""
    keys: list[tuple[str, int, int]] = []

    def add(key):
        if key not in keys:
            keys.append(key)

    width = {"x": model.d, "attn": model.d, "h1": model.d, "inner": model.k}
    for r in regions:
        act = WEIGHT_INPUT[r.weight_id]
        add((act, r.start, r.end) if r.axis == "cols" else (act, 0, width[act]))
    nd = _needs(model, regions)
    if nd.ffn is not None:
        add(("gate",) + nd.ffn)
        add(("up",) + nd.ffn)
    if nd.heads is not None:
        a, b = nd.heads
        add(("probs", a // model.d_h, b // model.d_h))
        for t in ("q", "k", "v"):
            add((t, a, b))
    return keys


@dataclass
class Tape:
    """Saved tensors for one forward pass, keyed by (tensor, lo, hi)."""

    regions: tuple[TrainableRegion, ...]
    dims: tuple[int, int, int]
    lead_shape: tuple[int, ...]
    saved: dict[tuple[str, int, int], np.ndarray] = field(default_factory=dict)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.saved.values())

    def get(self, name: str, lo: int, hi: int) -> np.ndarray:
        try:
            return self.saved[(name, lo, hi)]
        except KeyError:
            raise StateError(f"tape has no {name}[{lo}:{hi}]") from None


def forward_with_tape(model: TransformerBlockSpec, regions: Sequence[TrainableRegion], X):
    """Forward pass that keeps only the slices needed by ``regions``."""
    regions = tuple(regions)
    validate_regions(model, regions)
    Y, tr = forward_block(model, X)
    tape = Tape(regions=regions, dims=(model.d, model.h, model.k), lead_shape=Y.shape[:-1])
    for name, lo, hi in _tape_keys(model, regions):
        src = getattr(tr, name)
        if name == "probs":
            part = src[..., lo:hi, :, :]
        else:
            part = src[..., lo:hi]
        # Full-width entries are the forward's own arrays; partial ones are copied
        # so the rest of the activation can be released.
        full = part.shape == src.shape
        tape.saved[(name, lo, hi)] = src if full else np.ascontiguousarray(part)
    return Y, tape


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _weight_grad(r: TrainableRegion, dout: np.ndarray, dout_lo: int, z: np.ndarray, z_lo: int) -> np.ndarray:
    """Region gradient from an output-gradient block and an input block.

    ``dout`` covers output channels starting at ``dout_lo`` and ``z``
    covers input channels starting at ``z_lo``.
    """
    if r.axis == "rows":
        return mm(_flat(dout[..., r.start - dout_lo: r.end - dout_lo]).T, _flat(z))
    return mm(_flat(dout).T, _flat(z[..., r.start - z_lo: r.end - z_lo]))


def backward_partial(model: TransformerBlockSpec, tape: Tape, dY) -> dict[TrainableRegion, np.ndarray]:
    """Gradients of the loss for each taped region, given dL/dY."""
    dY = np.asarray(dY, dtype=np.float64)
    if tape.dims != (model.d, model.h, model.k):
        raise StateError("tape was recorded for a model with different dims")
    if dY.shape != tape.lead_shape + (model.d,):
        raise StateError(f"upstream gradient {dY.shape} does not match tape {tape.lead_shape}")
    if not np.all(np.isfinite(dY)):
        raise NumericError("upstream gradient contains NaN or Inf")
    regions = tape.regions
    nd = _needs(model, regions)
    by = {r.weight_id: r for r in regions}
    d, k, dh = model.d, model.k, model.d_h
    grads: dict[TrainableRegion, np.ndarray] = {}

    def inp(r: TrainableRegion):
        act = WEIGHT_INPUT[r.weight_id]
        if r.axis == "cols":
            return tape.get(act, r.start, r.end), r.start
        return tape.get(act, 0, k if act == "inner" else d), 0

    if "Wdown" in by:
        r = by["Wdown"]
        z, zlo = inp(r)
        grads[r] = _weight_grad(r, dY, 0, z, zlo)

    if nd.ffn is not None:
        a, b = nd.ffn
        g = tape.get("gate", a, b)
        u = tape.get("up", a, b)
        dact = mm(dY, model.Wdown[:, a:b])
        du, dg = swiglu_backward(dact, g, u)
        for w, dout in (("Wup", du), ("Wgate", dg)):
            if w in by:
                r = by[w]
                z, zlo = inp(r)
                grads[r] = _weight_grad(r, dout, a, z, zlo)
        if nd.need_dh1:
            dh1 = dY + mm(du, model.Wup) + mm(dg, model.Wgate)

    if "Wo" in by:
        r = by["Wo"]
        z, zlo = inp(r)
        grads[r] = _weight_grad(r, dh1, 0, z, zlo)

    if nd.heads is not None:
        a, b = nd.heads
        nh = (b - a) // dh
        P = tape.get("probs", a // dh, b // dh)
        dO = split_heads(mm(dh1, model.Wo[:, a:b]), nh)
        scale = 1.0 / math.sqrt(dh)
        if nd.dv:
            dv = merge_heads(mm(np.swapaxes(P, -1, -2), dO))
        if nd.dq or nd.dk:
            vh = split_heads(tape.get("v", a, b), nh)
            dP = mm(dO, np.swapaxes(vh, -1, -2))
            dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True))
            if nd.dq:
                dq = merge_heads(mm(dS, split_heads(tape.get("k", a, b), nh))) * scale
            if nd.dk:
                dk = merge_heads(mm(np.swapaxes(dS, -1, -2), split_heads(tape.get("q", a, b), nh))) * scale
        local = {}
        if nd.dq:
            local["Wq"] = dq
        if nd.dk:
            local["Wk"] = dk
        if nd.dv:
            local["Wv"] = dv
        for w, dout in local.items():
            r = by[w]
            z, zlo = inp(r)
            grads[r] = _weight_grad(r, dout, a, z, zlo)
    return grads


def full_grad_oracle(model: TransformerBlockSpec, X, dY) -> dict[str, np.ndarray]:
    """Reference gradients for all seven weights (per-sequence, per-head loops)."""
    X = np.asarray(X, dtype=np.float64)
    dY = np.asarray(dY, dtype=np.float64)
    _, tr = forward_block(model, X)
    if dY.shape != tr.y.shape:
        raise ShapeError(f"upstream gradient {dY.shape} does not match output {tr.y.shape}")
    seq = lambda a: a.reshape((-1,) + a.shape[-2:])  # noqa: E731
    xs, attns, h1s, gs, us, inners = map(seq, (tr.x, tr.attn, tr.h1, tr.gate, tr.up, tr.inner))
    qs, ks, vs, dYs = map(seq, (tr.q, tr.k, tr.v, dY))
    probs = tr.probs.reshape((-1,) + tr.probs.shape[-3:])
    dh = model.d_h
    grads = {n: np.zeros_like(model.get(n)) for n in WEIGHT_ORDER}
    for b in range(xs.shape[0]):
        dyb = dYs[b]
        grads["Wdown"] += dyb.T @ inners[b]
        dact = dyb @ model.Wdown
        g, u = gs[b], us[b]
        sig = 1.0 / (1.0 + np.exp(-g))
        du = dact * g * sig
        dg = dact * u * (sig + g * sig * (1.0 - sig))
        grads["Wup"] += du.T @ h1s[b]
        grads["Wgate"] += dg.T @ h1s[b]
        dh1 = dyb + du @ model.Wup + dg @ model.Wgate
        grads["Wo"] += dh1.T @ attns[b]
        dattn = dh1 @ model.Wo
        for i in range(model.h):
            sl = slice(i * dh, (i + 1) * dh)
            P = probs[b, i]
            dO = dattn[:, sl]
            dP = dO @ vs[b][:, sl].T
            dS = np.empty_like(P)
            for t in range(P.shape[0]):
                jac = np.diag(P[t]) - np.outer(P[t], P[t])
                dS[t] = jac @ dP[t]
            dq = dS @ ks[b][:, sl] / math.sqrt(dh)
            dk = dS.T @ qs[b][:, sl] / math.sqrt(dh)
            dvv = P.T @ dO
            grads["Wq"][sl] += dq.T @ xs[b]
            grads["Wk"][sl] += dk.T @ xs[b]
            grads["Wv"][sl] += dvv.T @ xs[b]
    return grads


def mse_loss(Y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """``0.5 * sum((Y - target)**2) / tokens`` and its gradient."""
    diff = Y - target
    tokens = int(np.prod(Y.shape[:-1]))
    return 0.5 * float(np.sum(diff * diff)) / tokens, diff / tokens


# ---------------------------------------------------------------- LoRA baseline

LORA_TARGETS = ("Wo", "Wdown")


@dataclass
class LowRankAdapterParams:
    """Unmerged ``W + alpha * U @ V.T`` for one weight; V starts at zero."""

    weight_id: str
    U: np.ndarray
    V: np.ndarray
    alpha: float = 1.0

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def delta(self) -> np.ndarray:
        return self.alpha * (self.U @ self.V.T)

    def num_params(self) -> int:
        return self.U.size + self.V.size


def init_lora(model: TransformerBlockSpec, rank: int, seed: int, alpha: float = 1.0,
              targets: Sequence[str] = LORA_TARGETS) -> dict[str, LowRankAdapterParams]:
    """U ~ N(0, 1/rank), V = 0, drawn in target order from one seeded stream."""
    for t in targets:
        if t not in LORA_TARGETS:
            raise ArgumentError(f"LoRA baseline supports {LORA_TARGETS}, not {t!r}")
    rng = make_rng(seed)
    out = {}
    for t in targets:
        rows, cols = model.weight_shape(t)
        if not 1 <= rank <= min(rows, cols):
            raise ArgumentError(f"rank {rank} outside 1..{min(rows, cols)} for {t}")
        out[t] = LowRankAdapterParams(
            t, rng.standard_normal((rows, rank)) / math.sqrt(rank), np.zeros((cols, rank)), alpha
        )
    return out


def lora_forward(model: TransformerBlockSpec, adapters: Mapping[str, LowRankAdapterParams], X):
    """Unmerged forward; returns (Y, tape) with the tensors LoRA's backward needs."""
    Y, tr = forward_block(model, X, adapters=adapters)
    saved = {}
    if "Wdown" in adapters:
        saved["inner"] = tr.inner
        saved["mid_Wdown"] = tr.mids["Wdown"]
    if "Wo" in adapters:
        saved["attn"] = tr.attn
        saved["mid_Wo"] = tr.mids["Wo"]
        saved["gate"] = tr.gate
        saved["up"] = tr.up
    return Y, saved


def lora_backward(model: TransformerBlockSpec, adapters: Mapping[str, LowRankAdapterParams],
                  saved: Mapping[str, np.ndarray], dY) -> dict[tuple[str, str], np.ndarray]:
    """Gradients keyed by (weight_id, 'U'|'V')."""
    dY = np.asarray(dY, dtype=np.float64)
    grads = {}
    dmid_down = None
    if "Wdown" in adapters:
        ad = adapters["Wdown"]
        grads[("Wdown", "U")] = ad.alpha * mm(_flat(dY).T, _flat(saved["mid_Wdown"]))
        dmid_down = ad.alpha * mm(dY, ad.U)
        grads[("Wdown", "V")] = mm(_flat(saved["inner"]).T, _flat(dmid_down))
    if "Wo" in adapters:
        dact = mm(dY, model.Wdown)
        if dmid_down is not None:
            dact = dact + mm(dmid_down, adapters["Wdown"].V.T)
        g, u = saved["gate"], saved["up"]
        du, dg = swiglu_backward(dact, g, u)
        dh1 = dY + mm(du, model.Wup) + mm(dg, model.Wgate)
        ad = adapters["Wo"]
        grads[("Wo", "U")] = ad.alpha * mm(_flat(dh1).T, _flat(saved["mid_Wo"]))
        dmid = ad.alpha * mm(dh1, ad.U)
        grads[("Wo", "V")] = mm(_flat(saved["attn"]).T, _flat(dmid))
    return grads


def merge_lora(model: TransformerBlockSpec, adapters: Mapping[str, LowRankAdapterParams]) -> TransformerBlockSpec:
    return model.replace(**{w: model.get(w) + ad.delta() for w, ad in adapters.items()})


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    kind: Literal["sgd", "adamw"] = "adamw"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())


def _check_finite(grads: Mapping) -> None:
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {key}; step refused")


def step_params(params: Mapping, grads: Mapping, state: OptimizerState, masks: Mapping | None = None) -> None:
    """Update each ``params[key]`` array view in place from ``grads[key]``."""
    _check_finite(grads)
    for key in grads:
        if key not in params:
            raise ArgumentError(f"gradient for unknown parameter {key}")
        if grads[key].shape != params[key].shape:
            raise ShapeError(f"gradient {grads[key].shape} vs parameter {params[key].shape} for {key}")
    state.step += 1
    t = state.step
    b1, b2 = state.betas
    for key, g in grads.items():
        p = params[key]
        lr = state.lr * state.lr_scale.get(key, 1.0)
        mask = None if masks is None else masks.get(key)
        if state.kind == "sgd":
            p -= lr * g
            continue
        if key not in state.m:
            state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            decay = lr * state.weight_decay * p
            p -= decay if mask is None else decay * mask
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)


def step_inplace(model: TransformerBlockSpec, regions: Sequence[TrainableRegion],
                 grads: Mapping[TrainableRegion, np.ndarray], state: OptimizerState) -> None:
    """Apply one optimizer step to the region slices of ``model`` in place."""
    if set(grads) != set(regions):
        raise ArgumentError("gradients do not match the trainable regions")
    step_params({r: r.view(model) for r in regions}, grads, state)


# ---------------------------------------------------------------- training loop


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int | None = None
    max_steps: int | None = None
    lr: float = 1e-2
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    rank: int = 4
    alpha: float = 1.0
    lora_targets: tuple[str, ...] = LORA_TARGETS
    lr_U: float | None = None
    lr_V: float | None = None
    regions: tuple[TrainableRegion, ...] = ()
    trainable: tuple[str, ...] = WEIGHT_ORDER
    sparse_ratio: float = 0.1
    schedule: str = "constant"

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        version = doc.pop("schema_version", 1)
        if version != 1:
            raise ConfigError(f"unsupported train config schema_version {version}")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown train config keys {sorted(extra)}")
        if "regions" in doc:
            doc["regions"] = tuple(TrainableRegion(**r) for r in doc["regions"])
        for key in ("betas", "lora_targets", "trainable"):
            if key in doc:
                doc[key] = tuple(doc[key])
        cfg = cls(**doc)
        if cfg.epochs < 1 or cfg.lr <= 0:
            raise ConfigError("epochs must be >= 1 and lr > 0")
        if cfg.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        return cfg


@dataclass
class TrainData:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim == 2:
            self.X, self.Y = self.X[None], self.Y[None]
        if self.X.shape != self.Y.shape or self.X.ndim != 3:
            raise ShapeError(f"inputs {self.X.shape} and targets {self.Y.shape} must match (seq, T, d)")


@dataclass
class TrainResult:
    method: str
    model: TransformerBlockSpec
    losses: list[float]
    adapters: dict[str, LowRankAdapterParams] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def merged(self) -> TransformerBlockSpec:
        return merge_lora(self.model, self.adapters) if self.adapters else self.model


def spft_masks(model: TransformerBlockSpec, ratio: float, seed: int,
               weights: Sequence[str] = WEIGHT_ORDER) -> dict[str, np.ndarray]:
    """Fixed random masks selecting ``floor(ratio * size)`` entries per weight."""
    if not 0 < ratio <= 1:
        raise ArgumentError(f"ratio {ratio} outside (0, 1]")
    rng = make_rng(seed)
    out = {}
    for w in weights:
        shape = model.weight_shape(w)
        size = shape[0] * shape[1]
        mask = np.zeros(size, dtype=bool)
        mask[rng.choice(size, size=int(math.floor(ratio * size)), replace=False)] = True
        out[w] = mask.reshape(shape)
    return out


class _Stepper:
    """One method's forward/backward/update, shared by the loop and the benchmarks."""

    def __init__(self, method: str, model: TransformerBlockSpec, cfg: TrainConfig):
        if method not in METHODS:
            raise ArgumentError(f"unknown method {method!r}")
        self.method = method
        self.model = model
        self.cfg = cfg
        self.state = OptimizerState(kind=cfg.optimizer, lr=cfg.lr, betas=tuple(cfg.betas),
                                    eps=cfg.eps, weight_decay=cfg.weight_decay)
        self.adapters: dict[str, LowRankAdapterParams] = {}
        self.masks: dict[str, np.ndarray] = {}
        if method == "s2ft":
            self.regions = tuple(cfg.regions)
            validate_regions(model, self.regions)
        elif method == "lora":
            self.adapters = init_lora(model, cfg.rank, cfg.seed, cfg.alpha, cfg.lora_targets)
            for w in self.adapters:
                if cfg.lr_U is not None:
                    self.state.lr_scale[(w, "U")] = cfg.lr_U / cfg.lr
                if cfg.lr_V is not None:
                    self.state.lr_scale[(w, "V")] = cfg.lr_V / cfg.lr
        elif method == "full":
            self.regions = tuple(full_regions(model, cfg.trainable))
        else:
            self.masks = spft_masks(model, cfg.sparse_ratio, cfg.seed)
            self.regions = tuple(full_regions(model))

    def step(self, X: np.ndarray, T: np.ndarray) -> float:
        model = self.model
        if self.method == "s2ft":
            Y, tape = forward_with_tape(model, self.regions, X)
            loss, dY = mse_loss(Y, T)
            if self.regions:
                grads = backward_partial(model, tape, dY)
                step_inplace(model, self.regions, grads, self.state)
        elif self.method == "lora":
            Y, saved = lora_forward(model, self.adapters, X)
            loss, dY = mse_loss(Y, T)
            grads = lora_backward(model, self.adapters, saved, dY)
            params = {}
            for w, ad in self.adapters.items():
                params[(w, "U")] = ad.U
                params[(w, "V")] = ad.V
            step_params(params, grads, self.state)
        elif self.method == "full":
            Y, tape = forward_with_tape(model, self.regions, X)
            loss, dY = mse_loss(Y, T)
            grads = backward_partial(model, tape, dY)
            step_params({r.weight_id: r.view(model) for r in self.regions},
                        {r.weight_id: g for r, g in grads.items()}, self.state)
        else:
            Y, tape = forward_with_tape(model, self.regions, X)
            loss, dY = mse_loss(Y, T)
            grads = backward_partial(model, tape, dY)
            step_params({w: model.get(w) for w in WEIGHT_ORDER},
                        {r.weight_id: g * self.masks[r.weight_id] for r, g in grads.items()},
                        self.state, masks=self.masks)
        return loss


def train_loop(method: str, model: TransformerBlockSpec, data: TrainData, config: TrainConfig) -> TrainResult:
    """Mini-batch training on a copy of ``model``; deterministic given config.seed.

    Methods: ``s2ft`` updates ``config.regions`` (an empty list trains
    nothing), ``lora`` trains unmerged adapters, ``full`` trains the
    weights in ``config.trainable`` densely, and ``spft`` applies fixed
    random masks of density ``config.sparse_ratio`` to dense gradients.

    Each epoch visits the sequences in a seeded random order.  Returns
    the trained model and the per-step loss (measured before the update).
    """
    model = model.copy()
    stepper = _Stepper(method, model, config)
    rng = make_rng(config.seed + 1)
    n = data.X.shape[0]
    bs = config.batch_size or n
    per_epoch = -(-n // bs)
    total = per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    losses: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, bs):
            if config.max_steps is not None and len(losses) >= config.max_steps:
                break
            idx = np.sort(order[lo: lo + bs])
            stepper.state.lr = scheduled_lr(config.lr, config.schedule, len(losses), total)
            loss = stepper.step(data.X[idx], data.Y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"{method}: loss became {loss} at step {len(losses)}")
            losses.append(loss)
    return TrainResult(method=method, model=model, losses=losses,
                       adapters=stepper.adapters, masks=stepper.masks)


def make_stepper(method: str, model: TransformerBlockSpec, config: TrainConfig) -> _Stepper:
    """A single-step trainer bound to ``model`` (mutated in place)."""
    return _Stepper(method, model, config)


# ---------------------------------------------------------------- accounting


@dataclass(frozen=True)
class Accounting:
    method: str
    trainable_params: int
    fwd_flops: int
    bwd_flops: int
    taped_bytes: int
    optimizer_bytes: int

    @property
    def step_flops(self) -> int:
        return self.fwd_flops + self.bwd_flops

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "trainable_params": self.trainable_params,
            "fwd_flops": self.fwd_flops,
            "bwd_flops": self.bwd_flops,
            "step_flops": self.step_flops,
            "taped_bytes": self.taped_bytes,
            "optimizer_bytes": self.optimizer_bytes,
        }


def forward_flops(model: TransformerBlockSpec, batch: int, seq_len: int) -> int:
    """Matmul FLOPs of one block forward: projections plus attention products."""
    d, k, n = model.d, model.k, batch * seq_len
    return 2 * n * (4 * d * d + 3 * d * k) + 4 * batch * seq_len * seq_len * d


def _region_backward_flops(model: TransformerBlockSpec, regions, batch: int, seq_len: int) -> int:
    d, k, n = model.d, model.k, batch * seq_len
    nd = _needs(model, regions)
    total = 0
    for r in regions:
        rows, cols = model.weight_shape(r.weight_id)
        total += 2 * n * r.width * (cols if r.axis == "rows" else rows)
    if nd.ffn is not None:
        a, b = nd.ffn
        total += 2 * n * d * (b - a)
        if nd.need_dh1:
            total += 4 * n * d * k
    if nd.heads is not None:
        a, b = nd.heads
        w = b - a
        total += 2 * n * d * w
        att = 2 * batch * seq_len * seq_len * w
        total += att * (int(nd.dv) + int(nd.dq or nd.dk) + int(nd.dq) + int(nd.dk))
    return total


def _region_tape_bytes(model: TransformerBlockSpec, regions, batch: int, seq_len: int) -> int:
    n = batch * seq_len
    floats = 0
    for name, lo, hi in _tape_keys(model, regions):
        floats += batch * (hi - lo) * seq_len * seq_len if name == "probs" else n * (hi - lo)
    return FLOAT_BYTES * floats


def _moment_bytes(params: int, optimizer: str) -> int:
    return 2 * FLOAT_BYTES * params if optimizer == "adamw" else 0


def accounting(model: TransformerBlockSpec, method: str, spec=None, batch: int = 1,
               seq_len: int = 1, optimizer: str = "adamw",
               lora_targets: Sequence[str] = LORA_TARGETS) -> Accounting:
    """Closed-form cost counters for one training step.

    ``spec`` is a region list or selection mask for s2ft, a rank for
    lora, a weight-name list for full (default all) and a ratio for spft.
    FLOPs count matmul multiply-adds twice; bytes assume float64.
    """
    fwd = forward_flops(model, batch, seq_len)
    n = batch * seq_len
    if method == "s2ft":
        if spec is None:
            raise ArgumentError("s2ft accounting needs regions or a selection mask")
        if hasattr(spec, "mha_heads"):
            regions = regions_for_selection(model, len(spec.mha_heads), len(spec.ffn_channels))
        else:
            regions = list(spec)
        validate_regions(model, regions)
        params = sum(r.size(model) for r in regions)
        return Accounting("s2ft", params, fwd, _region_backward_flops(model, regions, batch, seq_len),
                          _region_tape_bytes(model, regions, batch, seq_len), _moment_bytes(params, optimizer))
    if method == "full":
        regions = full_regions(model, spec or WEIGHT_ORDER)
        params = sum(r.size(model) for r in regions)
        return Accounting("full", params, fwd, _region_backward_flops(model, regions, batch, seq_len),
                          _region_tape_bytes(model, regions, batch, seq_len), _moment_bytes(params, optimizer))
    if method == "spft":
        ratio = float(spec)
        if not 0 < ratio <= 1:
            raise ArgumentError(f"ratio {ratio} outside (0, 1]")
        regions = full_regions(model)
        params = sum(int(math.floor(ratio * r.size(model))) for r in regions)
        # Unstructured masks still need dense gradients and dense moments.
        return Accounting("spft", params, fwd, _region_backward_flops(model, regions, batch, seq_len),
                          _region_tape_bytes(model, regions, batch, seq_len),
                          _moment_bytes(model.num_params(), optimizer))
    if method == "lora":
        r = int(spec)
        params = fwd_extra = bwd = tape = 0
        for t in lora_targets:
            out_dim, in_dim = model.weight_shape(t)
            params += r * (out_dim + in_dim)
            fwd_extra += 2 * n * r * (in_dim + out_dim)
            bwd += 2 * n * r * (2 * out_dim + in_dim)
            tape += n * (in_dim + r)
        if "Wo" in lora_targets:
            bwd += 6 * n * model.d * model.k
            if "Wdown" in lora_targets:
                bwd += 2 * n * r * model.k
            tape += 2 * n * model.k
        return Accounting("lora", params, fwd + fwd_extra, bwd, FLOAT_BYTES * tape,
                          _moment_bytes(params, optimizer))
    raise ArgumentError(f"unknown method {method!r}")
