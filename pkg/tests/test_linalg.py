import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2ft import linalg as la
from s2ft.errors import ArgumentError, ShapeError


def test_matmul_shape_check():
    with pytest.raises(ShapeError):
        la.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity(rng):
    A, B, C = rng.standard_normal((5, 7)), rng.standard_normal((7, 4)), rng.standard_normal((4, 6))
    left = la.matmul(la.matmul(A, B), C)
    right = la.matmul(A, la.matmul(B, C))
    assert np.linalg.norm(left - right) / np.linalg.norm(left) <= 1e-9


def test_flop_counter():
    a, b = np.ones((3, 4)), np.ones((4, 5))
    with la.count_flops() as box:
        la.mm(a, b)
        la.mm(b.T, a.T)
    assert box[0] == 2 * 3 * 4 * 5 * 2


@pytest.mark.parametrize("shape", [(1, 1), (3, 3), (6, 4), (4, 6), (17, 9), (64, 64)])
def test_svd_matches_numpy(rng, shape):
    a = rng.standard_normal(shape)
    res = la.svd(a)
    ref = np.linalg.svd(a, compute_uv=False)
    assert np.allclose(res.singular[: len(ref)], ref, atol=1e-10 * ref[0])
    recon = (res.left * res.singular) @ res.right_t
    assert np.linalg.norm(recon - a) / np.linalg.norm(a) <= 1e-9
    # orthonormal factors
    k = len(res.singular)
    assert np.allclose(res.left.T @ res.left, np.eye(k), atol=1e-10)
    assert np.allclose(res.right_t @ res.right_t.T, np.eye(k), atol=1e-10)
    assert np.all(np.diff(res.singular) <= 1e-12)


def test_svd_rank_deficient(rng):
    u, v = rng.standard_normal((7, 2)), rng.standard_normal((5, 2))
    a = u @ v.T
    res = la.svd(a)
    assert la.rank(a) == 2
    assert np.linalg.norm((res.left * res.singular) @ res.right_t - a) <= 1e-9 * np.linalg.norm(a)


def test_svd_zero_matrix():
    res = la.svd(np.zeros((3, 2)))
    assert np.all(res.singular == 0)
    assert la.rank(np.zeros((3, 2))) == 0


def test_truncated_svd_examples(rng):
    u, v = rng.standard_normal(5), rng.standard_normal(4)
    outer = np.outer(u, v)
    assert np.max(np.abs(la.truncated_svd(outer, 1) - outer)) <= 1e-10
    assert np.allclose(la.truncated_svd(np.diag([3.0, 2.0, 1.0]), 2), np.diag([3.0, 2.0, 0.0]), atol=1e-12)
    a = rng.standard_normal((6, 5))
    s = np.linalg.svd(a, compute_uv=False)
    err = np.linalg.norm(a - la.truncated_svd(a, 2))
    assert abs(err - np.sqrt(np.sum(s[2:] ** 2))) <= 1e-9


def test_truncated_svd_range():
    with pytest.raises(ArgumentError):
        la.truncated_svd(np.eye(3), 4)
    with pytest.raises(ArgumentError):
        la.truncated_svd(np.eye(3), 0)


def test_pinv_examples(rng):
    assert np.allclose(la.pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    q, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    assert np.allclose(la.pinv(q), q.T, atol=1e-12)
    a = rng.standard_normal((4, 4))
    assert np.max(np.abs(la.pinv(a) - np.linalg.inv(a))) <= 1e-9


@pytest.mark.parametrize("shape,r", [((5, 3), 3), ((3, 5), 2), ((6, 6), 4)])
def test_pinv_penrose_conditions(rng, shape, r):
    a = rng.standard_normal((shape[0], r)) @ rng.standard_normal((r, shape[1]))
    p = la.pinv(a)
    assert np.max(np.abs(a @ p @ a - a)) <= 1e-8
    assert np.max(np.abs(p @ a @ p - p)) <= 1e-8
    assert np.max(np.abs((a @ p).T - a @ p)) <= 1e-8
    assert np.max(np.abs((p @ a).T - p @ a)) <= 1e-8


def test_pinv_of_pinv(rng):
    a = rng.standard_normal((5, 4))
    assert np.linalg.norm(la.pinv(la.pinv(a)) - a) / np.linalg.norm(a) <= 1e-8


def test_projector_and_range(rng):
    a = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 4))
    P = la.projector(a)
    assert np.allclose(P @ P, P, atol=1e-12)
    assert np.allclose(P, P.T, atol=1e-12)
    assert np.allclose(P @ a, a, atol=1e-10)
    assert la.range_basis(a).shape == (6, 2)


def test_sqrt_psd(rng):
    g = rng.standard_normal((5, 3))
    s = g @ g.T
    r = la.sqrt_psd(s)
    assert np.allclose(r @ r, s, atol=1e-10)
    assert np.allclose(r, r.T)


def test_permute_axis_examples(rng):
    a = np.array([[1.0], [2.0], [3.0]])
    p = la.IndexPermutation.from_order([2, 0, 1])
    assert np.array_equal(la.permute_axis(a, p, "rows"), [[3.0], [1.0], [2.0]])
    m = rng.standard_normal((8, 8))
    assert la.permute_axis(m, la.IndexPermutation.identity(8), "cols").tobytes() == m.tobytes()
    q = la.IndexPermutation.from_order(rng.permutation(8))
    for axis in ("rows", "cols"):
        back = la.permute_axis(la.permute_axis(m, q, axis), q.inverted(), axis)
        assert back.tobytes() == m.tobytes()


def test_permute_axis_errors():
    with pytest.raises(ShapeError):
        la.permute_axis(np.ones((3, 2)), la.IndexPermutation.identity(2), "rows")
    with pytest.raises(ArgumentError):
        la.IndexPermutation.from_order([0, 0, 1])
    with pytest.raises(ArgumentError):
        la.permute_axis(np.ones((2, 2)), la.IndexPermutation.identity(2), "diag")


def test_expand_blocks():
    p = la.IndexPermutation.from_order([1, 0]).expand(3)
    assert p.order.tolist() == [3, 4, 5, 0, 1, 2]


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 12), cols=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_svd_reconstruction_property(rows, cols, seed):
    a = np.random.default_rng(seed).standard_normal((rows, cols))
    res = la.svd(a)
    assert np.linalg.norm((res.left * res.singular) @ res.right_t - a) <= 1e-9 * max(np.linalg.norm(a), 1e-300)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 16), seed=st.integers(0, 2**32 - 1))
def test_permutation_roundtrip_property(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n + 1))
    p = la.IndexPermutation.from_order(rng.permutation(n))
    assert la.permute_axis(la.permute_axis(m, p, "rows"), p.inverted(), "rows").tobytes() == m.tobytes()
