"""Co-permutation of coupled structures.

Selected heads and channels are moved to the front of their shared axis
(selected in ascending order, then the rest in ascending order).  The
same order is applied to the producer rows and the consumer columns, so
the block computes exactly the same function while the trainable part
becomes a leading contiguous slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .depgraph import CoupledStructure
from .errors import ArgumentError, ConfigError, ShapeError
from .linalg import IndexPermutation, permute_axis
from .netspec import TransformerBlockSpec, forward_block
from .select import SelectionMask
from .sparsetrain import TrainableRegion, regions_for_selection


def selected_first(selected: Sequence[int], n: int) -> IndexPermutation:
    chosen = sorted(int(i) for i in selected)
    if len(set(chosen)) != len(chosen):
        raise ArgumentError("duplicate indices in selection")
    if any(not 0 <= i < n for i in chosen):
        raise ArgumentError(f"selection index out of range 0..{n - 1}")
    rest = [i for i in range(n) if i not in set(chosen)]
    return IndexPermutation.from_order(chosen + rest)


@dataclass(frozen=True)
class PermutationPlan:
    """Head order (over h) and channel order (over k) for one block."""

    heads: IndexPermutation
    channels: IndexPermutation
    d_h: int
    n_heads: int
    n_channels: int
    widen: bool = False

    @property
    def head_channels(self) -> IndexPermutation:
        return self.heads.expand(self.d_h)

    def trainable_ranges(self, model: TransformerBlockSpec) -> list[TrainableRegion]:
        return regions_for_selection(model, self.n_heads, self.n_channels, self.widen)

    def inverse(self) -> "PermutationPlan":
        return PermutationPlan(self.heads.inverted(), self.channels.inverted(), self.d_h,
                               self.n_heads, self.n_channels, self.widen)

    def original_indices(self, region: TrainableRegion) -> np.ndarray:
        """Pre-permutation indices of the positions covered by ``region``."""
        if region.weight_id == "Wdown" or (region.weight_id in ("Wup", "Wgate") and region.axis == "rows"):
            order = self.channels.order
        elif region.weight_id == "Wo" and region.axis == "cols" or (
            region.weight_id in ("Wq", "Wk", "Wv") and region.axis == "rows"
        ):
            order = self.head_channels.order
        else:
            raise ArgumentError(f"region {region} is not on a permuted axis")
        return order[region.start: region.end].copy()

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "d_h": self.d_h,
            "head_order": self.heads.order.tolist(),
            "channel_order": self.channels.order.tolist(),
            "n_heads": self.n_heads,
            "n_channels": self.n_channels,
            "widen": self.widen,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PermutationPlan":
        if doc.get("schema_version") != 1:
            raise ConfigError(f"unsupported plan schema_version {doc.get('schema_version')}")
        return cls(
            heads=IndexPermutation.from_order(doc["head_order"]),
            channels=IndexPermutation.from_order(doc["channel_order"]),
            d_h=int(doc["d_h"]),
            n_heads=int(doc["n_heads"]),
            n_channels=int(doc["n_channels"]),
            widen=bool(doc.get("widen", False)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PermutationPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def plan_permutation(mask: SelectionMask, structures: Sequence[CoupledStructure],
                     widen: bool = False) -> PermutationPlan:
    """Build the plan from the block's MhaBasic and FfnBasic structures."""
    mha = [s for s in structures if s.kind == "MhaBasic"]
    ffn = [s for s in structures if s.kind == "FfnBasic"]
    if len(mha) != 1 or len(ffn) != 1:
        raise ArgumentError("expected exactly one MHA and one FFN basic structure")
    mha, ffn = mha[0], ffn[0]
    heads = selected_first(mask.mha_heads, mha.slots)
    channels = selected_first(mask.ffn_channels, ffn.slots)
    return PermutationPlan(heads, channels, mha.granule, len(mask.mha_heads), len(mask.ffn_channels), widen)


def apply_permutation(model: TransformerBlockSpec, plan: PermutationPlan) -> TransformerBlockSpec:
    """New model with head blocks and FFN channels reordered on both sides."""
    if plan.d_h != model.d_h or len(plan.heads) != model.h or len(plan.channels) != model.k:
        raise ShapeError("plan does not match the model's dimensions")
    hp = plan.head_channels
    cp = plan.channels
    return model.replace(
        Wq=permute_axis(model.Wq, hp, "rows"),
        Wk=permute_axis(model.Wk, hp, "rows"),
        Wv=permute_axis(model.Wv, hp, "rows"),
        Wo=permute_axis(model.Wo, hp, "cols"),
        Wup=permute_axis(model.Wup, cp, "rows"),
        Wgate=permute_axis(model.Wgate, cp, "rows"),
        Wdown=permute_axis(model.Wdown, cp, "cols"),
    )


@dataclass(frozen=True)
class InvarianceReport:
    max_abs_diff: float
    passed: bool


def verify_output_invariance(original: TransformerBlockSpec, permuted: TransformerBlockSpec, X,
                             tol: float = 1e-10) -> InvarianceReport:
    if (original.d, original.h, original.k) != (permuted.d, permuted.h, permuted.k):
        raise ShapeError("models have different dimensions")
    y0, _ = forward_block(original, X)
    y1, _ = forward_block(permuted, X)
    diff = float(np.max(np.abs(y0 - y1)))
    return InvarianceReport(diff, diff <= tol)
