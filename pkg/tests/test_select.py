import numpy as np
import pytest

from s2ft.errors import ArgumentError
from s2ft.netspec import init_block
from s2ft.select import (
    CalibrationBatch,
    SelectionBudget,
    SelectionMask,
    budget_from_params,
    budget_from_ratio,
    lora_param_count,
    select,
    sparse_param_count,
    sparsity_for_rank,
    top_indices,
)


def _count_trainable(model, mask, widen=False):
    """Brute-force count of trainable entries from boolean masks."""
    dh = model.d_h
    head_cols = np.zeros(model.d, bool)
    for hd in mask.mha_heads:
        head_cols[hd * dh:(hd + 1) * dh] = True
    chan = np.zeros(model.k, bool)
    chan[list(mask.ffn_channels)] = True
    total = int(np.sum(np.broadcast_to(head_cols[None, :], model.Wo.shape)))
    total += int(np.sum(np.broadcast_to(chan[None, :], model.Wdown.shape)))
    if widen:
        for _ in ("Wq", "Wk", "Wv"):
            total += int(np.sum(np.broadcast_to(head_cols[:, None], model.Wq.shape)))
        for _ in ("Wup", "Wgate"):
            total += int(np.sum(np.broadcast_to(chan[:, None], model.Wup.shape)))
    return total


def test_sparsity_for_rank_example():
    assert sparsity_for_rank(16, 4096, 4096) == 32
    assert lora_param_count(16, 64, 64) == sparse_param_count(32, 64)


def test_ratio_one_selects_everything():
    m = init_block(16, 4, 24, seed=0)
    b = budget_from_ratio(1.0, m)
    assert (b.heads_per_block, b.ffn_channels_per_block) == (4, 24)
    mask = select("R", "n/a", m, None, b, seed=1)
    assert mask.mha_heads == (0, 1, 2, 3) and mask.ffn_channels == tuple(range(24))


@pytest.mark.parametrize("widen", [False, True])
def test_realized_ratio_within_one_granule(widen):
    m = init_block(64, 8, 128, seed=0)
    b = budget_from_ratio(0.125, m, widen=widen)
    mask = select("R", "n/a", m, None, b, seed=3)
    realized = _count_trainable(m, mask, widen)
    assert realized == b.trainable_params(m, widen)
    target = 0.125 * m.num_params()
    head_granule = (4 if widen else 1) * m.d * m.d_h
    assert realized <= target
    assert target - realized <= head_granule


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
def test_ratio_out_of_range(ratio):
    with pytest.raises(ArgumentError):
        budget_from_ratio(ratio, init_block(8, 2, 12, seed=0))


def test_budget_never_exceeds_request():
    m = init_block(16, 4, 24, seed=0)
    for p in range(0, m.num_params() + 200, 7):
        b = budget_from_params(p, m)
        assert b.trainable_params(m) <= p
        assert 0 <= b.heads_per_block <= m.h and 0 <= b.ffn_channels_per_block <= m.k


def test_random_reproducible():
    m = init_block(64, 32, 16, seed=0)
    b = SelectionBudget(0.1, 4, 4)
    a1 = select("R", "n/a", m, None, b, seed=11)
    a2 = select("R", "n/a", m, None, b, seed=11)
    a3 = select("R", "n/a", m, None, b, seed=12)
    assert a1 == a2
    assert a1.mha_heads != a3.mha_heads
    assert len(a1.mha_heads) == 4 and len(set(a1.ffn_channels)) == 4


def test_weight_largest_finds_scaled_channel():
    m = init_block(8, 2, 16, seed=0)
    Wd = m.Wdown.copy()
    Wd[:, 7] *= 100
    m = m.replace(Wdown=Wd)
    mask = select("W", "largest", m, None, SelectionBudget(0.1, 1, 1), seed=0)
    assert mask.ffn_channels == (7,)


def test_activation_polarities_disjoint(rng):
    m = init_block(8, 2, 16, seed=2)
    calib = CalibrationBatch(rng.standard_normal((6, 8)))
    b = SelectionBudget(0.1, 1, 8)
    big = select("A", "largest", m, calib, b)
    small = select("A", "smallest", m, calib, b)
    assert not set(big.ffn_channels) & set(small.ffn_channels)
    assert not set(big.mha_heads) & set(small.mha_heads)


def test_activation_scores_match_direct_sort(rng):
    from s2ft.netspec import forward_block
    m = init_block(8, 2, 16, seed=2)
    X = rng.standard_normal((6, 8))
    _, tr = forward_block(m, X)
    expect = tuple(sorted(np.argsort(-np.linalg.norm(tr.inner, axis=0))[:5]))
    mask = select("A", "largest", m, CalibrationBatch(X), SelectionBudget(0.1, 0, 5))
    assert mask.ffn_channels == expect


def test_weight_times_activation(rng):
    from s2ft.netspec import forward_block
    m = init_block(8, 2, 16, seed=2)
    X = rng.standard_normal((6, 8))
    _, tr = forward_block(m, X)
    s = np.linalg.norm(tr.inner, axis=0) * np.linalg.norm(m.Wdown, axis=0)
    mask = select("S", "largest", m, CalibrationBatch(X), SelectionBudget(0.1, 0, 3))
    assert mask.ffn_channels == tuple(sorted(np.argsort(-s)[:3]))


def test_gradient_strategy_requirements(rng):
    m = init_block(8, 2, 16, seed=2)
    X = rng.standard_normal((6, 8))
    with pytest.raises(ArgumentError):
        select("G", "largest", m, CalibrationBatch(X), SelectionBudget(0.1, 1, 1))
    with pytest.raises(ArgumentError):
        select("A", "largest", m, None, SelectionBudget(0.1, 1, 1))
    mask = select("G", "largest", m, CalibrationBatch(X, rng.standard_normal((6, 8))), SelectionBudget(0.1, 1, 2))
    assert len(mask.mha_heads) == 1 and len(mask.ffn_channels) == 2


def test_deterministic_strategies_pure(rng):
    m = init_block(8, 2, 16, seed=2)
    calib = CalibrationBatch(rng.standard_normal((6, 8)), rng.standard_normal((6, 8)))
    b = SelectionBudget(0.1, 1, 4)
    for strat in ("W", "A", "S", "G"):
        assert select(strat, "largest", m, calib, b, seed=0) == select(strat, "largest", m, calib, b, seed=99)


def test_tie_break_by_index():
    assert top_indices(np.ones(10), 4, "largest") == (0, 1, 2, 3)
    assert top_indices(np.ones(10), 4, "smallest") == (0, 1, 2, 3)
    with pytest.raises(ArgumentError):
        top_indices(np.ones(3), 1, "middle")


def test_mask_roundtrip_and_validate(tmp_path):
    m = init_block(8, 2, 16, seed=0)
    mask = SelectionMask((1,), (3, 5), "W", "largest")
    mask.save(tmp_path / "mask.json")
    assert SelectionMask.load(tmp_path / "mask.json") == mask
    with pytest.raises(ArgumentError):
        SelectionMask((2,), (), "W").validate(m)
    with pytest.raises(ArgumentError):
        SelectionMask((0,), (1, 1), "W").validate(m)
