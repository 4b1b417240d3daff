import numpy as np
import pytest

from s2ft import linalg as la
from s2ft.errors import ArgumentError, PreconditionError
from s2ft.netspec import init_linear_net
from s2ft.rng import make_rng
from s2ft.theory import (
    RegressionTask,
    empirical_risk,
    excess_risk,
    gd_oracle,
    assumption_shift_epsilon,
    make_theorem2_task,
    sample_dataset,
    selection_matrix,
    solve_full,
    solve_full_population,
    solve_lora_min_norm,
    solve_sft_min_norm,
    theorem2_suite,
    theorem2_trial,
)


def _task(B, B_ood=None, noise=1.0, sx=None):
    q, p = B.shape
    return RegressionTask(B, B if B_ood is None else B_ood, np.eye(p) if sx is None else sx,
                          noise * np.eye(q), noise * np.eye(q))


def _sqrt_oracle(S):
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def test_sample_zero_covariances():
    B = np.arange(6.0).reshape(2, 3)
    s = sample_dataset(RegressionTask(B, B, np.zeros((3, 3)), np.eye(2), np.eye(2)), 20, seed=0)
    assert np.all(s.X == 0)
    s = sample_dataset(_task(B, noise=0.0), 20, seed=0)
    assert np.array_equal(s.Y, B @ s.X)


def test_sample_covariance_lln():
    Sx = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 0.5]])
    s = sample_dataset(_task(np.eye(3), sx=Sx), 100_000, seed=1)
    emp = s.X @ s.X.T / s.n
    assert np.linalg.norm(emp - Sx, 2) <= 0.05 * np.linalg.norm(Sx, 2)


def test_non_psd_rejected():
    with pytest.raises(ArgumentError):
        RegressionTask(np.eye(2), np.eye(2), -np.eye(2), np.eye(2), np.eye(2))


def test_zero_label_gap_gives_zero_solutions():
    net = init_linear_net([4, 5, 3], seed=0)
    task = _task(net.product(), noise=0.0)
    for sol in (solve_lora_min_norm(net, task, 1, 2), solve_sft_min_norm(net, task, 1, [0, 3]),
                solve_full(net, task, 1)):
        assert np.max(np.abs(sol.delta)) <= 1e-12
    assert excess_risk(net, None, task) == pytest.approx(0.0, abs=1e-24)


def test_sft_rows_outside_selection_zero():
    net = init_linear_net([4, 6, 3], seed=1)
    task = _task(make_rng(2).standard_normal((3, 4)))
    sol = solve_sft_min_norm(net, task, 1, [1, 4])
    assert np.array_equal(sol.U, selection_matrix(6, [1, 4]))
    off = [i for i in range(6) if i not in (1, 4)]
    assert np.all(sol.delta[off] == 0)


@pytest.mark.parametrize("regime", ["population", "empirical"])
def test_full_rank_and_full_selection_equal_full(regime):
    net = init_linear_net([5, 6, 4, 5], seed=3)
    task = _task(make_rng(3).standard_normal((5, 5)))
    data = task if regime == "population" else sample_dataset(task, 300, seed=4)
    risk = (lambda s: excess_risk(net, s, task)) if regime == "population" else (lambda s: empirical_risk(net, s, data))
    full = risk(solve_full(net, data, 2))
    target_rank = 4
    assert abs(risk(solve_lora_min_norm(net, data, 2, target_rank)) - full) <= 1e-9
    assert abs(risk(solve_sft_min_norm(net, data, 2, range(4))) - full) <= 1e-9


def test_full_population_formula():
    rng = make_rng(5)
    net = init_linear_net([4, 4, 4, 4], seed=5)
    B = net.above(2) @ rng.standard_normal((4, 4)) @ net.below(2)
    assert solve_full_population(net, _task(B), 2) <= 1e-18
    net = init_linear_net([6, 3, 5, 4], seed=6)
    task = _task(rng.standard_normal((4, 6)))
    val = solve_full_population(net, task, 2)
    assert abs(val - excess_risk(net, solve_full(net, task, 2), task)) <= 1e-9
    assert val <= excess_risk(net, None, task) + 1e-12
    for r in range(1, 4):
        assert val <= excess_risk(net, solve_lora_min_norm(net, task, 2, r), task) + 1e-9


def test_excess_risk_quadratic_and_zero():
    net = init_linear_net([3, 4, 3], seed=0)
    D = make_rng(0).standard_normal((3, 3))
    e1 = excess_risk(net, None, _task(net.product() + D))
    e2 = excess_risk(net, None, _task(net.product() + 2 * D))
    assert e2 == pytest.approx(4 * e1, rel=1e-12)
    assert excess_risk(net, None, _task(net.product())) == 0.0


def test_excess_risk_monte_carlo():
    net = init_linear_net([3, 4, 2], seed=1)
    Sx = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, 0.1], [0.0, 0.1, 0.5]])
    task = _task(make_rng(7).standard_normal((2, 3)), noise=0.5, sx=Sx)
    sol = solve_lora_min_norm(net, task, 1, 1)
    s = sample_dataset(task, 1_000_000, seed=11)
    W = sol.adapted_net(net).product()
    per = np.sum((s.Y - W @ s.X) ** 2, axis=0) - np.trace(task.Sigma_eps_id)
    se = per.std(ddof=1) / np.sqrt(len(per))
    assert abs(per.mean() - excess_risk(net, sol, task)) <= 3 * se


def test_epsilon_examples_and_projector_oracle():
    rng = make_rng(8)
    net = init_linear_net([5, 6, 5, 4], seed=8)
    layer, S = 2, [0, 2]
    B = rng.standard_normal((4, 5))
    assert assumption_shift_epsilon(net, _task(B), layer, S) == 0.0
    M = net.above(layer) @ selection_matrix(5, S)
    U, s, _ = np.linalg.svd(M)
    basis = U[:, : int(np.sum(s > 1e-12 * s[0]))]
    outside = (np.eye(4) - basis @ basis.T) @ rng.standard_normal((4, 5))
    assert assumption_shift_epsilon(net, _task(B, B + outside), layer, S) <= 1e-20
    Sx = np.diag([1.0, 2.0, 0.5, 1.5, 1.0])
    shift = rng.standard_normal((4, 5))
    task = _task(B, B + shift, sx=Sx)
    num = np.linalg.norm(basis @ basis.T @ shift @ _sqrt_oracle(Sx)) ** 2
    E = B + shift - net.product()
    den = np.trace(E @ Sx @ E.T)
    assert abs(assumption_shift_epsilon(net, task, layer, S) - num / den) <= 1e-10


def test_epsilon_requires_shared_covariates():
    net = init_linear_net([3, 3, 3], seed=0)
    task = RegressionTask(np.eye(3), np.eye(3), np.eye(3), np.eye(3), np.eye(3), Sigma_x_ood=2 * np.eye(3))
    with pytest.raises(PreconditionError):
        assumption_shift_epsilon(net, task, 1, [0])


def test_gd_oracle_small_instance():
    net = init_linear_net([6, 5, 4], seed=2)
    task = _task(make_rng(3).standard_normal((4, 6)), noise=0.25)
    smp = sample_dataset(task, 200, seed=4)
    for layer in (1, 2):
        cl = solve_lora_min_norm(net, smp, layer, 2)
        gd = gd_oracle(net, smp, layer, "LoRA", r=2)
        assert la.frob(cl.delta - gd.delta) <= 1e-6
        assert abs(empirical_risk(net, cl, smp) - empirical_risk(net, gd, smp)) <= 1e-8
        cs = solve_sft_min_norm(net, smp, layer, [0, 3])
        gs = gd_oracle(net, smp, layer, "S2FT", S=[0, 3])
        assert la.frob(cs.delta - gs.delta) <= 1e-6
        assert abs(empirical_risk(net, cs, smp) - empirical_risk(net, gs, smp)) <= 1e-8


def test_gd_zero_target():
    net = init_linear_net([4, 3, 4], seed=0)
    task = _task(net.product(), noise=0.0)
    smp = sample_dataset(task, 50, seed=0)
    assert la.frob(gd_oracle(net, smp, 1, "S2FT", S=[1]).delta) <= 1e-12
    assert la.frob(gd_oracle(net, smp, 1, "LoRA", r=2).delta) <= 1e-9


def test_lora_beats_random_candidates():
    net = init_linear_net([5, 4, 5], seed=4)
    smp = sample_dataset(_task(make_rng(4).standard_normal((5, 5))), 100, seed=5)
    sol = solve_lora_min_norm(net, smp, 1, 2)
    best = empirical_risk(net, sol, smp)
    rng = make_rng(6)
    for _ in range(200):
        U = sol.U + 0.1 * rng.standard_normal(sol.U.shape)
        V = sol.V + 0.1 * rng.standard_normal(sol.V.shape)
        cand = type(sol)("LoRA", 1, U, V, "empirical", rank=2)
        assert empirical_risk(net, cand, smp) >= best - 1e-12


def test_risk_ordering_population():
    rng = make_rng(9)
    for trial in range(10):
        net = init_linear_net([6, 7, 6, 5], seed=100 + trial)
        task = _task(rng.standard_normal((5, 6)))
        layer = 2
        full = solve_full_population(net, task, layer)
        prev = np.inf
        for r in range(1, 7):
            e = excess_risk(net, solve_lora_min_norm(net, task, layer, r), task)
            assert full <= e + 1e-9 and e <= prev + 1e-9
            prev = e
        order = rng.permutation(6)
        prev = np.inf
        for s in range(1, 7):
            e = excess_risk(net, solve_sft_min_norm(net, task, layer, sorted(order[:s])), task)
            assert e <= prev + 1e-9
            prev = e


def test_empirical_converges_in_n():
    net = init_linear_net([4, 5, 3], seed=12)
    task = _task(make_rng(12).standard_normal((3, 4)))
    S = [0, 2, 4]
    pop = excess_risk(net, solve_sft_min_norm(net, task, 1, S), task)
    medians = []
    for n in (100, 1000, 10000):
        gaps = [excess_risk(net, solve_sft_min_norm(net, sample_dataset(task, n, seed), 1, S), task) - pop
                for seed in range(20)]
        medians.append(np.median(gaps))
    assert medians[0] > medians[1] > medians[2] >= -1e-12


def test_bound_small_suite():
    reports = theorem2_suite(trials=8)
    assert len(reports) == 8 and all(r.passed for r in reports)
    assert [r.scenario for r in reports[:4]] == ["inside", "outside", "generic", "none"]
    none = reports[3]
    assert none.label_shift_sq == 0.0 and none.epsilon_sq == 0.0
    assert none.excess_ood <= none.pretrained_ood + 1e-8
    for r in reports:
        assert [p.s for p in r.sweep] == list(range(1, min(r.rank_sigma_f, 8) + 1))


def test_bound_trial_seed_stable():
    a = theorem2_trial((6, 8, 8, 6), 3, seed=7).to_dict()
    b = theorem2_trial((6, 8, 8, 6), 3, seed=7).to_dict()
    assert a == b


def test_bound_covariate_shift_rejected():
    with pytest.raises(PreconditionError):
        theorem2_trial((4, 5, 4), 0, seed=0, covariate_shift=True)


def test_bound_task_scenarios():
    net = init_linear_net([5, 6, 5], seed=0)
    rng = make_rng(0)
    task = make_theorem2_task(net, 1, rng, "outside", [0, 1])
    assert assumption_shift_epsilon(net, task, 1, [0, 1]) <= 1e-20
    task = make_theorem2_task(net, 1, rng, "inside", [0, 1])
    assert assumption_shift_epsilon(net, task, 1, [0, 1]) > 0
    with pytest.raises(ArgumentError):
        make_theorem2_task(net, 1, rng, "sideways", [0])


def test_sparsity_rank_parity():
    from s2ft.select import sparsity_for_rank
    for d in (8, 16, 64):
        for r in (1, 2, 4):
            s = sparsity_for_rank(r, d, d)
            assert abs(s * d - r * (d + d)) < d
