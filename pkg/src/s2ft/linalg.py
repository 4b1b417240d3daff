"""Dense real linear algebra used by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and
ndim 2.  Products go through ``numpy.matmul``; the SVD is a one-sided
(Hestenes) Jacobi iteration with a fixed round-robin pair schedule so
that results do not depend on thread scheduling or LAPACK versions.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError

Axis = Literal["rows", "cols"]

EPS = 2.0 ** -52
JACOBI_TOL = 1e-14
MAX_SWEEPS = 80


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate ``a`` as a finite 2-D float64 array (copying only if needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains NaN or Inf")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


_flop_sink: ContextVar[list | None] = ContextVar("flop_sink", default=None)


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a @ b`` that reports 2*m*n*k FLOPs to an active ``count_flops``."""
    out = a @ b
    sink = _flop_sink.get()
    if sink is not None:
        sink[0] += 2 * out.size * a.shape[-1]
    return out


@contextmanager
def count_flops():
    """Collect matmul FLOPs issued through ``mm``; yields a one-element list."""
    sink = [0]
    token = _flop_sink.set(sink)
    try:
        yield sink
    finally:
        _flop_sink.reset(token)


def chain(*mats, dim: int | None = None) -> np.ndarray:
    """Left-to-right product ``mats[0] @ mats[1] @ ...``.

    With no operands the identity of size ``dim`` is returned.
    """
    if not mats:
        if dim is None:
            raise ArgumentError("empty product needs an explicit dim")
        return np.eye(dim)
    out = as_matrix(mats[0])
    for m in mats[1:]:
        out = matmul(out, m)
    return out


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = left @ diag(singular) @ right_t`` with k = min(m, n)."""

    left: np.ndarray
    singular: np.ndarray
    right_t: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular) @ self.right_t

    def rank(self, tol: float | None = None) -> int:
        if tol is None:
            tol = default_tol(self.left.shape[0], self.right_t.shape[1], self.singular)
        return int(np.sum(self.singular > tol))


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Circle method: n-1 rounds (n even) of n/2 disjoint pairs.
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = idx[i], idx[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return tuple(rounds)


def _complete_basis(q: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace columns listed in ``missing`` by orthonormal completions."""
    q = q.copy()
    m = q.shape[0]
    good = [j for j in range(q.shape[1]) if j not in set(missing.tolist())]
    basis = [q[:, j] for j in good]
    cand = 0
    for j in missing:
        while True:
            if cand >= m:
                raise NumericError("could not complete orthonormal basis")
            v = np.zeros(m)
            v[cand] = 1.0
            cand += 1
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        q[:, j] = v
        basis.append(v)
    return q


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n) if n > 1 else ()
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for ps, qs in rounds:
            up, uq = u[:, ps], u[:, qs]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            act = np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha * beta)
            if not np.any(act):
                continue
            rotated = True
            ps, qs = ps[act], qs[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            up, uq = u[:, ps], u[:, qs]
            u[:, ps] = c * up - s * uq
            u[:, qs] = s * up + c * uq
            vp, vq = v[:, ps], v[:, qs]
            v[:, ps] = c * vp - s * vq
            v[:, qs] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge after {MAX_SWEEPS} sweeps")

    sig = np.sqrt(np.einsum("ij,ij->j", u, u))
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    u = u[:, order]
    v = v[:, order]
    floor = max(m, n) * EPS * (sig[0] if n else 0.0)
    tiny = np.nonzero(sig <= floor)[0] if n else np.array([], dtype=np.intp)
    left = np.zeros_like(u)
    big = sig > floor
    left[:, big] = u[:, big] / sig[big]
    if tiny.size:
        left = _complete_basis(left, tiny)
    return SvdResult(left=left, singular=sig, right_t=v.T.copy())


def svd(a) -> SvdResult:
    """Thin SVD by one-sided Jacobi; singular values sorted descending.

    Raises NumericError if the sweep limit (``MAX_SWEEPS``) is hit.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m >= n:
        return _jacobi_tall(a)
    r = _jacobi_tall(a.T)
    return SvdResult(left=r.right_t.T.copy(), singular=r.singular, right_t=r.left.T.copy())


def default_tol(rows: int, cols: int, singular: np.ndarray) -> float:
    """Rank cutoff ``max(rows, cols) * sigma_max * 2**-52``."""
    smax = float(singular[0]) if len(singular) else 0.0
    return max(rows, cols) * smax * EPS


def truncated_svd(a, r: int) -> np.ndarray:
    """Best rank-``r`` approximation (Eckart-Young)."""
    a = as_matrix(a)
    k = min(a.shape)
    if not isinstance(r, (int, np.integer)) or r < 1 or r > k:
        raise ArgumentError(f"rank {r} outside 1..{k}")
    res = svd(a)
    return (res.left[:, :r] * res.singular[:r]) @ res.right_t[:r]


def pinv(a, tol: float | None = None) -> np.ndarray:
    """Moore-Penrose inverse; singular values <= tol are treated as zero.

    The default tolerance is ``max(rows, cols) * sigma_max * 2**-52``.
    """
    a = as_matrix(a)
    if tol is not None and tol < 0:
        raise ArgumentError("tol must be non-negative")
    res = svd(a)
    if tol is None:
        tol = default_tol(a.shape[0], a.shape[1], res.singular)
    keep = res.singular > tol
    inv = np.zeros_like(res.singular)
    inv[keep] = 1.0 / res.singular[keep]
    return (res.right_t.T * inv) @ res.left.T


def rank(a, tol: float | None = None) -> int:
    a = as_matrix(a)
    if a.size == 0:
        return 0
    return svd(a).rank(tol)


def range_basis(a, tol: float | None = None) -> np.ndarray:
    """Orthonormal basis of the column space (left vectors of non-zero singular values)."""
    a = as_matrix(a)
    res = svd(a)
    return res.left[:, : res.rank(tol)]


def projector(a, tol: float | None = None) -> np.ndarray:
    """Orthogonal projector onto the column space of ``a``."""
    phi = range_basis(a, tol)
    return phi @ phi.T


def sqrt_psd(a) -> np.ndarray:
    """Symmetric square root of a symmetric PSD matrix.

    Uses the right singular vectors, which coincide with eigenvectors
    for PSD input; tiny negative eigenvalues from rounding are absorbed.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError("sqrt_psd needs a square matrix")
    sym = 0.5 * (a + a.T)
    res = svd(sym)
    vecs = res.right_t.T
    return (vecs * np.sqrt(res.singular)) @ vecs.T


def frob(a) -> float:
    return float(np.sqrt(np.sum(np.square(a))))


def max_abs(a) -> float:
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0


@dataclass(frozen=True)
class IndexPermutation:
    """A permutation of ``0..n-1`` together with its inverse.

    ``order[i]`` is the source index that lands at position ``i``.
    """

    order: np.ndarray
    inverse: np.ndarray

    def __post_init__(self):
        n = len(self.order)
        if len(self.inverse) != n:
            raise ShapeError("order and inverse lengths differ")
        if sorted(self.order.tolist()) != list(range(n)):
            raise ArgumentError("order is not a permutation of 0..n-1")
        if not np.array_equal(self.inverse[self.order], np.arange(n)):
            raise ArgumentError("inverse does not invert order")

    @classmethod
    def from_order(cls, order) -> "IndexPermutation":
        order = np.asarray(order, dtype=np.intp)
        if order.ndim != 1:
            raise ShapeError("order must be 1-D")
        if sorted(order.tolist()) != list(range(len(order))):
            raise ArgumentError(f"not a permutation: {order.tolist()}")
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order), dtype=np.intp)
        return cls(order=order, inverse=inv)

    @classmethod
    def identity(cls, n: int) -> "IndexPermutation":
        return cls.from_order(np.arange(n))

    def __len__(self) -> int:
        return len(self.order)

    def inverted(self) -> "IndexPermutation":
        return IndexPermutation(order=self.inverse.copy(), inverse=self.order.copy())

    def expand(self, block: int) -> "IndexPermutation":
        """Lift a permutation of blocks to one over ``block``-wide channels."""
        base = (self.order[:, None] * block + np.arange(block)[None, :]).ravel()
        return IndexPermutation.from_order(base)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.order, np.arange(len(self.order))))


def permute_axis(a, p: IndexPermutation, axis: Axis) -> np.ndarray:
    """``out[i] = a[p.order[i]]`` along the chosen axis (a new C-ordered array)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if axis == "rows":
        if len(p) != a.shape[0]:
            raise ShapeError(f"permutation of length {len(p)} for {a.shape[0]} rows")
        return a[p.order, :]
    if axis == "cols":
        if len(p) != a.shape[1]:
            raise ShapeError(f"permutation of length {len(p)} for {a.shape[1]} cols")
        return np.ascontiguousarray(a[:, p.order])
    raise ArgumentError(f"axis must be 'rows' or 'cols', got {axis!r}")
