"""Unmerged sparse adapters: extract, fuse/unfuse, switch, weighted fusion, parallel apply.

A sparse adapter stores the trained delta of one weight restricted to a
set ``S`` of original (pre-permutation) indices along one axis:

    cols axis:  dW[:, S]  = values          (values is other_len x s)
    rows axis:  dW[S, :]  = values.T

Fusing writes ``base + delta`` into the live weight after saving the
original slice; unfusing restores that slice, which is bit-exact.
Operation reports count the primitive kernels a serving system would
issue, following the usual kernel sequence for each adapter family.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence, Union

import numpy as np

from .errors import ArgumentError, IntegrityError, LookupFailure, ShapeError, StateError
from .netspec import WEIGHT_ORDER, TransformerBlockSpec
from .permute import PermutationPlan, apply_permutation

Axis = Literal["rows", "cols"]
ADAPTER_MAGIC = b"S2AD"
ADAPTER_VERSION = 1
OFF_SUPPORT_TOL = 1e-12


def fingerprint(w: np.ndarray) -> str:
    """64-bit BLAKE2b digest of a weight's float64 bytes, as hex."""
    data = np.ascontiguousarray(w, dtype="<f8").tobytes()
    return hashlib.blake2b(data, digest_size=8).hexdigest()


@dataclass
class SparseAdapter:
    weight_id: str
    indices: np.ndarray
    axis: Axis
    values: np.ndarray
    base_fingerprint: str

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.axis not in ("rows", "cols"):
            raise ArgumentError(f"axis must be rows or cols, got {self.axis!r}")
        if self.indices.ndim != 1 or self.values.ndim != 2:
            raise ShapeError("indices must be 1-D and values 2-D")
        if self.values.shape[1] != len(self.indices):
            raise ShapeError(f"values have {self.values.shape[1]} columns for {len(self.indices)} indices")
        if len(np.unique(self.indices)) != len(self.indices) or np.any(self.indices < 0):
            raise ArgumentError("adapter indices must be distinct and non-negative")

    @property
    def s(self) -> int:
        return len(self.indices)

    @property
    def other_len(self) -> int:
        return self.values.shape[0]

    def _index(self):
        return (self.indices, slice(None)) if self.axis == "rows" else (slice(None), self.indices)

    def _block(self) -> np.ndarray:
        return self.values.T if self.axis == "rows" else self.values

    def check_shape(self, w: np.ndarray) -> None:
        n_axis, other = (w.shape[0], w.shape[1]) if self.axis == "rows" else (w.shape[1], w.shape[0])
        if other != self.other_len or (self.s and self.indices.max() >= n_axis):
            raise ShapeError(f"adapter for {self.weight_id} does not fit weight of shape {w.shape}")

    def dense_delta(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape)
        out[self._index()] = self._block()
        return out

    def apply_to(self, w: np.ndarray) -> np.ndarray:
        """``w`` with the delta scattered in (a new array)."""
        self.check_shape(w)
        out = w.copy()
        out[self._index()] = w[self._index()] + self._block()
        return out

    def num_params(self) -> int:
        return self.values.size


@dataclass
class LoraAdapter:
    """Baseline low-rank adapter ``delta = alpha * U @ V.T``."""

    weight_id: str
    U: np.ndarray
    V: np.ndarray
    alpha: float
    base_fingerprint: str

    def dense_delta(self, shape=None) -> np.ndarray:
        return self.alpha * (self.U @ self.V.T)

    def num_params(self) -> int:
        return self.U.size + self.V.size


AnyAdapter = Union[SparseAdapter, LoraAdapter]


@dataclass
class OpCountReport:
    scenario: str
    counts: dict[str, int]
    operand_dims: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "counts": dict(self.counts),
                "operand_dims": [[op, list(dims)] for op, dims in self.operand_dims]}


def _counter(names: Sequence[str]) -> dict[str, int]:
    base = {"matmul": 0, "add": 0, "scatter_add": 0, "scatter": 0, "gather": 0}
    base.update(Counter(names))
    return base


def extract(fine_tuned: TransformerBlockSpec, base: TransformerBlockSpec, plan: PermutationPlan,
            tol: float = OFF_SUPPORT_TOL) -> list[SparseAdapter]:
    """Sparse adapters for every trainable region of ``plan``.

    ``fine_tuned`` lives in the permuted layout produced by ``plan``;
    ``base`` is the original pre-trained model.  Any change outside the
    trained supports raises IntegrityError.
    """
    if (fine_tuned.d, fine_tuned.h, fine_tuned.k) != (base.d, base.h, base.k):
        raise ShapeError("fine-tuned and base models differ in shape")
    tuned = apply_permutation(fine_tuned, plan.inverse())
    regions = {r.weight_id: r for r in plan.trainable_ranges(base)}
    adapters = []
    for w in WEIGHT_ORDER:
        delta = tuned.get(w) - base.get(w)
        if w not in regions:
            worst = float(np.max(np.abs(delta)))
            if worst > tol:
                raise IntegrityError(f"{w} is frozen but changed by {worst:.3e}")
            continue
        r = regions[w]
        idx = np.sort(plan.original_indices(r))
        off = delta.copy()
        if r.axis == "rows":
            off[idx, :] = 0.0
            values = delta[idx, :].T.copy()
        else:
            off[:, idx] = 0.0
            values = delta[:, idx].copy()
        worst = float(np.max(np.abs(off)))
        if worst > tol:
            raise IntegrityError(f"{w} changed by {worst:.3e} outside its trained support")
        adapters.append(SparseAdapter(w, idx, r.axis, values, fingerprint(base.get(w))))
    return adapters


class AdapterRegistry:
    """Named adapters plus the fuse state of one live model.

    Holds at most one fused adapter per weight and keeps the original
    slice (or whole weight, for low-rank adapters) to restore exactly.
    """

    def __init__(self):
        self.adapters: dict[str, AnyAdapter] = {}
        self.fused: dict[str, str] = {}
        self._saved: dict[str, np.ndarray] = {}

    def register(self, adapter_id: str, adapter: AnyAdapter) -> None:
        if adapter_id in self.adapters:
            raise StateError(f"adapter {adapter_id!r} already registered")
        self.adapters[adapter_id] = adapter

    def get(self, adapter_id: str) -> AnyAdapter:
        try:
            return self.adapters[adapter_id]
        except KeyError:
            raise LookupFailure(f"unknown adapter {adapter_id!r}") from None

    def fused_on(self, weight_id: str) -> str | None:
        return self.fused.get(weight_id)

    def _check_invariants(self) -> None:
        assert set(self.fused) == set(self._saved)

    def fuse(self, model: TransformerBlockSpec, adapter_id: str) -> None:
        ad = self.get(adapter_id)
        w = model.get(ad.weight_id)
        if ad.weight_id in self.fused:
            raise StateError(f"{ad.weight_id} already has {self.fused[ad.weight_id]!r} fused")
        if fingerprint(w) != ad.base_fingerprint:
            raise IntegrityError(f"adapter {adapter_id!r} was extracted against a different base")
        if isinstance(ad, SparseAdapter):
            ad.check_shape(w)
            idx = ad._index()
            self._saved[ad.weight_id] = w[idx].copy()
            w[idx] = w[idx] + ad._block()
        else:
            self._saved[ad.weight_id] = w.copy()
            w += ad.dense_delta()
        self.fused[ad.weight_id] = adapter_id
        self._check_invariants()

    def unfuse(self, model: TransformerBlockSpec, adapter_id: str) -> None:
        ad = self.get(adapter_id)
        if self.fused.get(ad.weight_id) != adapter_id:
            raise StateError(f"adapter {adapter_id!r} is not fused")
        w = model.get(ad.weight_id)
        saved = self._saved.pop(ad.weight_id)
        if isinstance(ad, SparseAdapter):
            w[ad._index()] = saved
        else:
            w[...] = saved
        del self.fused[ad.weight_id]
        self._check_invariants()

    def switch(self, model: TransformerBlockSpec, from_id: str, to_id: str) -> OpCountReport:
        """Unfuse ``from_id`` then fuse ``to_id``; reports the modelled kernels."""
        src, dst = self.get(from_id), self.get(to_id)
        if self.fused.get(src.weight_id) != from_id:
            raise StateError(f"adapter {from_id!r} is not fused")
        if from_id == to_id:
            return OpCountReport("switch", _counter([]))
        ops: list[str] = []
        dims: list[tuple[str, tuple[int, ...]]] = []
        self.unfuse(model, from_id)
        self.fuse(model, to_id)
        for ad in (src, dst):
            if isinstance(ad, SparseAdapter):
                ops.append("scatter_add")
                dims.append(("scatter_add", (ad.other_len, ad.s)))
            else:
                ops += ["matmul", "add"]
                dims.append(("matmul", (ad.U.shape[0], ad.U.shape[1], ad.V.shape[0])))
                dims.append(("add", (ad.U.shape[0], ad.V.shape[0])))
        return OpCountReport("switch", _counter(ops), dims)


def fuse(model: TransformerBlockSpec, adapter_id: str, registry: AdapterRegistry) -> None:
    registry.fuse(model, adapter_id)


def unfuse(model: TransformerBlockSpec, adapter_id: str, registry: AdapterRegistry) -> None:
    registry.unfuse(model, adapter_id)


def switch(model: TransformerBlockSpec, from_id: str, to_id: str, registry: AdapterRegistry) -> OpCountReport:
    return registry.switch(model, from_id, to_id)


def weighted_fuse(adapters: Sequence[SparseAdapter], weights: Sequence[float]) -> SparseAdapter:
    """Composite over the union of supports; overlaps sum the weighted deltas."""
    if not adapters or len(adapters) != len(weights):
        raise ArgumentError("need one weight per adapter")
    first = adapters[0]
    for ad in adapters[1:]:
        if ad.weight_id != first.weight_id or ad.axis != first.axis:
            raise ArgumentError("adapters target different weights or axes")
        if ad.base_fingerprint != first.base_fingerprint:
            raise ArgumentError("adapters were extracted against different bases")
        if ad.other_len != first.other_len:
            raise ShapeError("adapters have different value heights")
    union = np.unique(np.concatenate([ad.indices for ad in adapters]))
    pos = {int(i): j for j, i in enumerate(union)}
    values = np.zeros((first.other_len, len(union)))
    for ad, wt in zip(adapters, weights):
        cols = [pos[int(i)] for i in ad.indices]
        values[:, cols] += float(wt) * ad.values
    return SparseAdapter(first.weight_id, union, first.axis, values, first.base_fingerprint)


def parallel_apply(base_weight: np.ndarray, registry: AdapterRegistry,
                   requests: Sequence[tuple[str, np.ndarray]]) -> tuple[list[np.ndarray], list[OpCountReport]]:
    """Serve many adapters over one shared weight ``W`` (out x in).

    All inputs go through one batched base product; each request then
    adds its own adapter path: a gather of the input slice (cols axis)
    or a scatter into the output slice (rows axis) around one small
    matmul, or the two low-rank matmuls for a LoRA adapter.
    """
    W = np.asarray(base_weight, dtype=np.float64)
    xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for _, x in requests]
    ads = [registry.get(aid) for aid, _ in requests]
    if not requests:
        return [], []
    sizes = [x.shape[0] for x in xs]
    base = np.concatenate(xs, axis=0) @ W.T
    outputs, reports = [], []
    lo = 0
    for ad, x, n, (_, raw) in zip(ads, xs, sizes, requests):
        y = base[lo: lo + n].copy()
        lo += n
        if isinstance(ad, SparseAdapter):
            ad.check_shape(W)
            if ad.axis == "cols":
                xs_sel = x[:, ad.indices]
                y += xs_sel @ ad.values.T
                ops = ["gather", "matmul", "add"]
            else:
                y[:, ad.indices] += x @ ad.values
                ops = ["scatter", "matmul", "add"]
            counts = _counter(ops)
            counts["gather_or_scatter"] = counts.pop("gather") + counts.pop("scatter")
            counts.pop("scatter_add")
            reports.append(OpCountReport("parallel", counts, [("matmul", (n, ad.other_len, ad.s))]))
        else:
            y += ad.alpha * ((x @ ad.V) @ ad.U.T)
            reports.append(OpCountReport("parallel", {"matmul": 2, "add": 1},
                                         [("matmul", (n, ad.V.shape[0], ad.V.shape[1])),
                                          ("matmul", (n, ad.U.shape[1], ad.U.shape[0]))]))
        outputs.append(y[0] if np.asarray(raw).ndim == 1 else y)
    return outputs, reports


def save_adapter(adapter: SparseAdapter, path, plan_ref: str | None = None) -> Path:
    """Binary adapter file plus JSON sidecar.

    Layout (little-endian): magic ``S2AD``, u32 version, u16 id length,
    utf-8 weight id, u8 axis (0 rows, 1 cols), u32 other_len, u32 s,
    s x int32 indices, then values row-major as float64.
    """
    path = Path(path)
    wid = adapter.weight_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ADAPTER_MAGIC)
        fh.write(struct.pack("<IH", ADAPTER_VERSION, len(wid)))
        fh.write(wid)
        fh.write(struct.pack("<BII", 0 if adapter.axis == "rows" else 1, adapter.other_len, adapter.s))
        fh.write(adapter.indices.astype("<i4").tobytes())
        fh.write(np.ascontiguousarray(adapter.values, dtype="<f8").tobytes())
    meta = {"format": "s2ft-adapter", "version": ADAPTER_VERSION, "weight_id": adapter.weight_id,
            "axis": adapter.axis, "s": adapter.s, "other_len": adapter.other_len,
            "base_fingerprint": adapter.base_fingerprint, "plan": plan_ref}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_adapter(path) -> SparseAdapter:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != ADAPTER_MAGIC:
        raise IntegrityError(f"{path}: bad adapter magic")
    version, n = struct.unpack_from("<IH", raw, 4)
    if version != ADAPTER_VERSION:
        raise IntegrityError(f"{path}: unsupported adapter version {version}")
    off = 10
    wid = raw[off: off + n].decode("utf-8")
    off += n
    axis_code, other, s = struct.unpack_from("<BII", raw, off)
    off += 9
    idx = np.frombuffer(raw, dtype="<i4", count=s, offset=off).astype(np.int64)
    off += 4 * s
    if len(raw) - off != 8 * other * s:
        raise IntegrityError(f"{path}: value block has the wrong size")
    values = np.frombuffer(raw, dtype="<f8", offset=off).reshape(other, s).astype(np.float64)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    return SparseAdapter(wid, idx, "rows" if axis_code == 0 else "cols", values, meta["base_fingerprint"])


def fused_forward_delta(adapter: AnyAdapter, x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adapter contribution ``x @ delta.T`` (used as an unmerged-path oracle)."""
    return np.asarray(x) @ adapter.dense_delta(shape).T


def registry_from_dir(root) -> AdapterRegistry:
    """Load every ``*.s2ad`` file in ``root``; ids are the file stems."""
    reg = AdapterRegistry()
    for p in sorted(Path(root).glob("*.s2ad")):
        reg.register(p.stem, load_adapter(p))
    return reg


def lora_adapters_from_params(params: Mapping, base: TransformerBlockSpec) -> list[LoraAdapter]:
    return [LoraAdapter(w, p.U.copy(), p.V.copy(), p.alpha, fingerprint(base.get(w))) for w, p in params.items()]
