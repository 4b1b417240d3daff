"""Model families: a LLaMA-style transformer block and a deep linear chain.

Weights follow the (out_features, in_features) convention, so a linear
layer maps a row-vector batch ``x`` to ``x @ W.T``.  The block is

    h1 = x + O(attn(x))
    y  = h1 + Down(Up(h1) * silu(Gate(h1)))

with per-head scaled dot-product attention and no layer norms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError, ShapeError
from .linalg import mm
from .rng import make_rng

WEIGHT_ORDER = ("Wq", "Wk", "Wv", "Wo", "Wup", "Wgate", "Wdown")
CKPT_MAGIC = b"S2FTCKPT"
CKPT_VERSION = 1


def _check_shape(name: str, w: np.ndarray, shape: tuple[int, int]) -> None:
    if w.shape != shape:
        raise ShapeError(f"{name} has shape {w.shape}, expected {shape}")


@dataclass
class TransformerBlockSpec:
    d: int
    h: int
    k: int
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    Wup: np.ndarray
    Wgate: np.ndarray
    Wdown: np.ndarray
    causal: bool = False

    def __post_init__(self):
        if self.h <= 0 or self.d % self.h != 0:
            raise ConfigError(f"d={self.d} is not divisible by h={self.h}")
        for name in WEIGHT_ORDER:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
            _check_shape(name, getattr(self, name), self.weight_shape(name))

    @property
    def d_h(self) -> int:
        return self.d // self.h

    def weight_shape(self, name: str) -> tuple[int, int]:
        d, k = self.d, self.k
        return {
            "Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d),
            "Wup": (k, d), "Wgate": (k, d), "Wdown": (d, k),
        }[name]

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_ORDER}

    def get(self, name: str) -> np.ndarray:
        if name not in WEIGHT_ORDER:
            raise KeyError(name)
        return getattr(self, name)

    def copy(self) -> "TransformerBlockSpec":
        return self.replace()

    def replace(self, **new_weights) -> "TransformerBlockSpec":
        ws = {n: getattr(self, n).copy() for n in WEIGHT_ORDER}
        ws.update({n: np.array(w, dtype=np.float64) for n, w in new_weights.items()})
        return TransformerBlockSpec(d=self.d, h=self.h, k=self.k, causal=self.causal, **ws)

    def num_params(self) -> int:
        return 4 * self.d * self.d + 3 * self.d * self.k

    def bit_equal(self, other: "TransformerBlockSpec") -> bool:
        return all(
            getattr(self, n).tobytes() == getattr(other, n).tobytes() for n in WEIGHT_ORDER
        )


@dataclass
class DeepLinearNet:
    """``x -> W_L ... W_1 x``; ``layers[0]`` is W_1 with shape (d_1, d_0)."""

    layers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.layers = [np.asarray(w, dtype=np.float64) for w in self.layers]
        if not self.layers:
            raise ConfigError("a deep linear net needs at least one layer")
        for i, w in enumerate(self.layers):
            if w.ndim != 2:
                raise ShapeError(f"layer {i + 1} is not a matrix")
            if i and w.shape[1] != self.layers[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i + 1} expects {w.shape[1]} inputs but layer {i} gives "
                    f"{self.layers[i - 1].shape[0]}"
                )

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].shape[1]] + [w.shape[0] for w in self.layers]

    def above(self, ell: int) -> np.ndarray:
        """Product W_L ... W_{ell+1} (identity of size q when ell == L)."""
        out = np.eye(self.dims[-1])
        for w in reversed(self.layers[ell:]):
            out = out @ w
        return out

    def below(self, ell: int) -> np.ndarray:
        """Product W_{ell-1} ... W_1 (identity of size p when ell == 1)."""
        out = np.eye(self.dims[0])
        for w in self.layers[: ell - 1]:
            out = w @ out
        return out

    def product(self) -> np.ndarray:
        return self.above(0)

    def copy(self) -> "DeepLinearNet":
        return DeepLinearNet([w.copy() for w in self.layers])


@dataclass
class ActivationTrace:
    """Intermediate tensors of one ``forward_block`` call.

    ``attn`` holds the concatenated per-head mixing outputs (head i in
    columns ``i*d_h:(i+1)*d_h``); ``inner`` is the FFN activation
    ``up * silu(gate)`` that feeds the down projection.
    """

    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    attn: np.ndarray
    h1: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    inner: np.ndarray
    y: np.ndarray
    mids: dict = field(default_factory=dict)

    def nbytes(self) -> int:
        total = sum(getattr(self, f.name).nbytes for f in fields(self) if f.name != "mids")
        return total + sum(m.nbytes for m in self.mids.values())


def init_block(d: int, h: int, k: int, seed: int, causal: bool = False) -> TransformerBlockSpec:
    """Gaussian weights with std 1/sqrt(fan_in), drawn in WEIGHT_ORDER."""
    if d <= 0 or h <= 0 or k <= 0:
        raise ConfigError("d, h and k must be positive")
    if d % h:
        raise ConfigError(f"d={d} is not divisible by h={h}")
    rng = make_rng(seed)
    shapes = {"Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d),
              "Wup": (k, d), "Wgate": (k, d), "Wdown": (d, k)}
    ws = {n: rng.standard_normal(shapes[n]) / np.sqrt(shapes[n][1]) for n in WEIGHT_ORDER}
    return TransformerBlockSpec(d=d, h=h, k=k, causal=causal, **ws)


def init_linear_net(dims, seed: int) -> DeepLinearNet:
    dims = [int(x) for x in dims]
    if len(dims) < 2 or min(dims) <= 0:
        raise ConfigError(f"invalid chain dims {dims}")
    rng = make_rng(seed)
    return DeepLinearNet(
        [rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i]) for i in range(len(dims) - 1)]
    )


def init_model(config: dict, seed: int):
    """Build a block (keys d, h, k) or a linear chain (key dims)."""
    if "dims" in config:
        return init_linear_net(config["dims"], seed)
    try:
        return init_block(int(config["d"]), int(config["h"]), int(config["k"]), seed,
                          causal=bool(config.get("causal", False)))
    except KeyError as exc:
        raise ConfigError(f"model config missing {exc}") from None


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z: np.ndarray) -> np.ndarray:
    return z * sigmoid(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def swiglu_backward(dact: np.ndarray, gate: np.ndarray, up: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. ``up`` and ``gate`` of ``up * silu(gate)``."""
    s = sigmoid(gate)
    act = gate * s
    return dact * act, dact * up * (s + act * (1.0 - s))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def split_heads(t: np.ndarray, h: int) -> np.ndarray:
    """(..., T, d) -> (..., h, T, d_h)."""
    *lead, T, d = t.shape
    return np.swapaxes(t.reshape(*lead, T, h, d // h), -3, -2)


def merge_heads(t: np.ndarray) -> np.ndarray:
    """(..., h, T, d_h) -> (..., T, h*d_h)."""
    t = np.swapaxes(t, -3, -2)
    *lead, T, h, dh = t.shape
    return t.reshape(*lead, T, h * dh)


def attention_probs(q: np.ndarray, k: np.ndarray, h: int, causal: bool) -> np.ndarray:
    qh, kh = split_heads(q, h), split_heads(k, h)
    scores = mm(qh, np.swapaxes(kh, -1, -2)) / np.sqrt(q.shape[-1] // h)
    if causal:
        T = scores.shape[-1]
        scores = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, -np.inf)
    return softmax(scores)


def linear(x: np.ndarray, w: np.ndarray, adapter=None, mids: dict | None = None, name: str = ""):
    """``x @ w.T``, plus the unmerged low-rank path ``alpha * (x @ V) @ U.T``.

    ``adapter`` is any object with ``U`` (out x r), ``V`` (in x r) and
    ``alpha``; the rank-r intermediate is stored in ``mids[name]``.
    """
    out = mm(x, w.T)
    if adapter is not None:
        mid = mm(x, adapter.V)
        if mids is not None:
            mids[name] = mid
        out = out + adapter.alpha * mm(mid, adapter.U.T)
    return out


def forward_block(spec: TransformerBlockSpec, X, adapters: dict | None = None):
    """Evaluate the block on ``X`` of shape (tokens, d) or (batch, tokens, d).

    ``adapters`` optionally maps weight names to unmerged low-rank
    adapters; their rank-r intermediates land in ``trace.mids``.
    Returns ``(Y, trace)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim not in (2, 3) or X.shape[-1] != spec.d:
        raise ShapeError(f"input shape {X.shape} incompatible with d={spec.d}")
    ad = adapters or {}
    mids: dict[str, np.ndarray] = {}
    q = linear(X, spec.Wq, ad.get("Wq"), mids, "Wq")
    k = linear(X, spec.Wk, ad.get("Wk"), mids, "Wk")
    v = linear(X, spec.Wv, ad.get("Wv"), mids, "Wv")
    probs = attention_probs(q, k, spec.h, spec.causal)
    attn = merge_heads(mm(probs, split_heads(v, spec.h)))
    h1 = X + linear(attn, spec.Wo, ad.get("Wo"), mids, "Wo")
    gate = linear(h1, spec.Wgate, ad.get("Wgate"), mids, "Wgate")
    up = linear(h1, spec.Wup, ad.get("Wup"), mids, "Wup")
    inner = up * silu(gate)
    y = h1 + linear(inner, spec.Wdown, ad.get("Wdown"), mids, "Wdown")
    trace = ActivationTrace(x=X, q=q, k=k, v=v, probs=probs, attn=attn, h1=h1,
                            gate=gate, up=up, inner=inner, y=y, mids=mids)
    return y, trace


def forward_linear_chain(net: DeepLinearNet, x) -> np.ndarray:
    """Apply the chain to a vector (p,) or to columns of a (p, n) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != net.dims[0]:
        raise ShapeError(f"input has length {x.shape[0]}, net expects {net.dims[0]}")
    out = x
    for w in net.layers:
        out = w @ out
    return out


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(spec: TransformerBlockSpec, path, seed: int | None = None) -> Path:
    """Write the little-endian binary checkpoint plus its JSON sidecar.

    Layout: 8-byte magic ``S2FTCKPT``, then u32 version, d, h, k, causal,
    then Wq, Wk, Wv, Wo, Wup, Wgate, Wdown as row-major float64.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<5I", CKPT_VERSION, spec.d, spec.h, spec.k, int(spec.causal)))
        for name in WEIGHT_ORDER:
            fh.write(np.ascontiguousarray(spec.get(name), dtype="<f8").tobytes())
    meta = {
        "format": "s2ft-checkpoint",
        "version": CKPT_VERSION,
        "d": spec.d, "h": spec.h, "k": spec.k, "causal": spec.causal,
        "seed": seed,
        "weights": [[n, list(spec.weight_shape(n))] for n in WEIGHT_ORDER],
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_checkpoint(path) -> TransformerBlockSpec:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise IntegrityError(f"{path}: bad magic bytes")
    version, d, h, k, causal = struct.unpack_from("<5I", raw, 8)
    if version != CKPT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    offset = 8 + 20
    shapes = {"Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d),
              "Wup": (k, d), "Wgate": (k, d), "Wdown": (d, k)}
    ws = {}
    for name in WEIGHT_ORDER:
        n = shapes[name][0] * shapes[name][1]
        chunk = raw[offset: offset + 8 * n]
        if len(chunk) != 8 * n:
            raise IntegrityError(f"{path}: truncated while reading {name}")
        ws[name] = np.frombuffer(chunk, dtype="<f8").reshape(shapes[name]).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise IntegrityError(f"{path}: {len(raw) - offset} trailing bytes")
    return TransformerBlockSpec(d=d, h=h, k=k, causal=bool(causal), **ws)
