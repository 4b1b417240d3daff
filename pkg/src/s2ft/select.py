"""Parameter budgets and head/channel selection strategies.

Scores are computed on the consumer side of each coupled structure:
attention heads are scored through the matching column block of Wo and
FFN channels through the matching column of Wdown.

    R  seeded uniform choice
    W  Frobenius norm of the weight slice
    A  norm of the matching activation over a calibration batch
    S  product of the W and A scores
    G  norm of the weight-gradient slice under squared error

Equal scores are broken by ascending index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ArgumentError, ConfigError, ShapeError
from .netspec import TransformerBlockSpec, forward_block
from .rng import make_rng
from .sparsetrain import full_grad_oracle, mse_loss

Strategy = Literal["R", "W", "A", "S", "G"]
Polarity = Literal["largest", "smallest", "n/a"]
STRATEGIES = ("R", "W", "A", "S", "G")


@dataclass(frozen=True)
class SelectionBudget:
    ratio: float
    heads_per_block: int
    ffn_channels_per_block: int

    def trainable_params(self, model: TransformerBlockSpec, widen: bool = False) -> int:
        head, chan = granule_sizes(model, widen)
        return self.heads_per_block * head + self.ffn_channels_per_block * chan


@dataclass(frozen=True)
class SelectionMask:
    mha_heads: tuple[int, ...]
    ffn_channels: tuple[int, ...]
    strategy: str
    polarity: str = "n/a"
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "blocks": [{"heads": list(self.mha_heads), "channels": list(self.ffn_channels)}],
            "strategy": self.strategy,
            "polarity": self.polarity,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SelectionMask":
        if doc.get("schema_version") != 1:
            raise ConfigError(f"unsupported mask schema_version {doc.get('schema_version')}")
        blocks = doc.get("blocks") or []
        if len(blocks) != 1:
            raise ConfigError("mask files describe exactly one block")
        return cls(
            mha_heads=tuple(int(i) for i in blocks[0]["heads"]),
            ffn_channels=tuple(int(i) for i in blocks[0]["channels"]),
            strategy=doc["strategy"],
            polarity=doc.get("polarity", "n/a"),
            seed=doc.get("seed"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SelectionMask":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self, model: TransformerBlockSpec) -> None:
        for name, idx, n in (("head", self.mha_heads, model.h), ("channel", self.ffn_channels, model.k)):
            if len(set(idx)) != len(idx):
                raise ArgumentError(f"duplicate {name} indices")
            if any(not 0 <= i < n for i in idx):
                raise ArgumentError(f"{name} index out of range 0..{n - 1}")


@dataclass
class CalibrationBatch:
    """A small slice of fine-tuning data (about 1% is the usual choice)."""

    inputs: np.ndarray
    targets: np.ndarray | None = None
    fraction_note: str = field(default="~1% of fine-tuning data")

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.size == 0 or self.inputs.ndim not in (2, 3):
            raise ShapeError("calibration inputs must be a non-empty (tokens, d) or (seq, tokens, d) array")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != self.inputs.shape:
                raise ShapeError("calibration targets must match the inputs' shape")


def granule_sizes(model: TransformerBlockSpec, widen: bool = False) -> tuple[int, int]:
    """Trainable entries per selected head and per selected FFN channel.

    Default (Wo and Wdown only): a head is a d x d_h block of Wo and a
    channel is one Wdown column.  Widened, a head also brings d_h rows of
    each of Wq, Wk, Wv, and a channel a row of Wup and of Wgate.
    """
    d, dh = model.d, model.d_h
    if widen:
        return 4 * d * dh, 3 * d
    return d * dh, d


def budget_from_params(params: int, model: TransformerBlockSpec, widen: bool = False) -> SelectionBudget:
    """Largest selection with at most ``params`` trainable entries.

    Half the budget goes to heads (rounded down to whole heads), the rest
    to channels, capped at k; anything left after the cap flows back to
    heads.  Requests beyond full selection are clamped to everything.
    """
    total = model.num_params()
    head, chan = granule_sizes(model, widen)
    params = int(params)
    if params < 0:
        raise ArgumentError("parameter budget must be non-negative")
    heads = min(model.h, (params // 2) // head)
    channels = min(model.k, (params - heads * head) // chan)
    heads = min(model.h, heads + (params - heads * head - channels * chan) // head)
    return SelectionBudget(ratio=params / total, heads_per_block=heads, ffn_channels_per_block=channels)


def budget_from_ratio(ratio: float, model: TransformerBlockSpec, widen: bool = False) -> SelectionBudget:
    if not (isinstance(ratio, (int, float)) and 0 < ratio <= 1):
        raise ArgumentError(f"ratio {ratio} outside (0, 1]")
    target = int(math.floor(ratio * model.num_params() * (1 + 1e-12)))
    b = budget_from_params(target, model, widen)
    return SelectionBudget(ratio=float(ratio), heads_per_block=b.heads_per_block,
                           ffn_channels_per_block=b.ffn_channels_per_block)


def sparsity_for_rank(r: int, d_out: int, d_in: int) -> int:
    """Channels s whose V (d_in x s) matches a rank-r adapter's r*(d_out+d_in) entries."""
    if r < 1 or d_out < 1 or d_in < 1:
        raise ArgumentError("rank and dims must be positive")
    return (r * (d_out + d_in)) // d_in


def lora_param_count(r: int, d_out: int, d_in: int) -> int:
    return r * (d_out + d_in)


def sparse_param_count(s: int, d_in: int) -> int:
    return s * d_in


def _head_block_norms(a: np.ndarray, h: int) -> np.ndarray:
    """Norm of each d_h-wide column block of ``a`` (leading axes flattened)."""
    flat = a.reshape(-1, a.shape[-1])
    return np.sqrt(np.sum(flat.reshape(flat.shape[0], h, -1) ** 2, axis=(0, 2)))


def _col_norms(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(-1, a.shape[-1])
    return np.sqrt(np.sum(flat * flat, axis=0))


def scores(strategy: str, model: TransformerBlockSpec, calib: CalibrationBatch | None = None):
    """(head_scores, channel_scores) for a deterministic strategy."""
    if strategy == "W":
        return _head_block_norms(model.Wo, model.h), _col_norms(model.Wdown)
    if strategy in ("A", "S", "G") and calib is None:
        raise ArgumentError(f"strategy {strategy} needs a calibration batch")
    if strategy == "A":
        _, tr = forward_block(model, calib.inputs)
        return _head_block_norms(tr.attn, model.h), _col_norms(tr.inner)
    if strategy == "S":
        wh, wc = scores("W", model)
        ah, ac = scores("A", model, calib)
        return wh * ah, wc * ac
    if strategy == "G":
        if calib.targets is None:
            raise ArgumentError("strategy G needs calibration targets")
        Y, _ = forward_block(model, calib.inputs)
        _, dY = mse_loss(Y, calib.targets)
        g = full_grad_oracle(model, calib.inputs, dY)
        return _head_block_norms(g["Wo"], model.h), _col_norms(g["Wdown"])
    raise ArgumentError(f"unknown strategy {strategy!r}")


def top_indices(score: np.ndarray, count: int, polarity: str) -> tuple[int, ...]:
    """``count`` indices by score; ties resolved toward the smaller index."""
    idx = np.arange(len(score))
    if polarity == "largest":
        order = np.lexsort((idx, -score))
    elif polarity == "smallest":
        order = np.lexsort((idx, score))
    else:
        raise ArgumentError(f"polarity must be largest or smallest, got {polarity!r}")
    return tuple(sorted(int(i) for i in order[:count]))


def select(strategy: str, polarity: str, model: TransformerBlockSpec, calib: CalibrationBatch | None,
           budget: SelectionBudget, seed: int = 0) -> SelectionMask:
    if not 0 <= budget.heads_per_block <= model.h or not 0 <= budget.ffn_channels_per_block <= model.k:
        raise ArgumentError("budget exceeds the model's heads or channels")
    if strategy == "R":
        rng = make_rng(seed)
        heads = rng.choice(model.h, size=budget.heads_per_block, replace=False)
        chans = rng.choice(model.k, size=budget.ffn_channels_per_block, replace=False)
        return SelectionMask(tuple(sorted(int(i) for i in heads)), tuple(sorted(int(i) for i in chans)),
                             "R", "n/a", seed)
    hs, cs = scores(strategy, model, calib)
    return SelectionMask(
        top_indices(hs, budget.heads_per_block, polarity),
        top_indices(cs, budget.ffn_channels_per_block, polarity),
        strategy,
        polarity,
        None,
    )
