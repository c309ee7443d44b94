import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evcharge.dispatch import build_gamma
from evcharge.errors import DimensionMismatch, NotSymmetric
from evcharge.qp import AggregateHessian, QpProblem, build_qp, solve_pdipm, verify_psd
from oracles import qp_active_set_min, qp_box_radius, qp_grid_min, random_qp_instance

ORACLE = json.loads((Path(__file__).parent / "data" / "qp_oracle.json").read_text())


def kkt_ok(problem, sol, tol=1e-7):
    grad = problem.quadratic.matvec(sol.x) + problem.linear
    return np.all(sol.x >= -1e-9) and np.all(grad >= -tol) and abs(sol.x @ grad) <= tol * max(1, sol.x.size)


# --- tiny closed-form cases ----------------------------------------------------


def test_interior_optimum():
    # (x - 1)^2 = x^2 - 2x + 1
    sol = solve_pdipm(QpProblem([[2.0]], [-2.0], offset=1.0))
    assert sol.converged
    assert abs(sol.x[0] - 1.0) < 1e-7
    assert abs(sol.objective + 1.0) < 1e-12 + 1e-8


def test_active_bound():
    sol = solve_pdipm(QpProblem([[2.0]], [2.0], offset=1.0))
    assert sol.converged
    assert abs(sol.x[0]) < 1e-8
    assert sol.x[0] >= -1e-9


def test_zero_target_gives_zero():
    prob = build_qp(build_gamma(6, 3), np.zeros(6))
    assert np.all(prob.linear == 0)
    sol = solve_pdipm(prob)
    assert np.all(np.abs(sol.x) < 1e-8)


# --- build_qp and verify_psd -------------------------------------------------


def test_build_qp_identity():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    prob = build_qp(np.eye(4), p)
    assert np.array_equal(prob.quadratic, 2 * np.eye(4))
    assert np.allclose(prob.linear, -2 * p)
    assert prob.offset == pytest.approx(p @ p)


def test_build_qp_four_slot_pattern():
    half = np.asarray(build_qp(build_gamma(4, 2), np.full(4, 0.25)).quadratic) / 2
    assert np.array_equal(half, [[2, 1, 0, 1], [1, 2, 1, 0], [0, 1, 2, 1], [1, 0, 1, 2]])


@pytest.mark.parametrize("h", range(1, 13))
def test_gram_matrix_is_circulant_overlap(h):
    for beta in range(1, h + 1):
        B = np.asarray(build_qp(build_gamma(h, beta), np.full(h, 1 / h)).quadratic)
        for a in range(h):
            for b in range(h):
                lag = min((a - b) % h, (b - a) % h)
                # overlap of two length-beta windows on a circle of h slots
                overlap = sum(
                    1 for s in range(h) if (s - a) % h < beta and (s - b) % h < beta
                )
                assert B[a, b] == 2 * overlap
                if beta + lag <= h:
                    assert overlap == max(beta - lag, 0) + max(beta - (h - lag), 0) * (lag > 0)
        assert verify_psd(B)


def test_build_qp_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        build_qp(np.eye(4), np.ones(3) / 3)


def test_verify_psd_examples():
    assert verify_psd(np.eye(3))
    assert not verify_psd(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotSymmetric):
        verify_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_problem_rejects_asymmetric_quadratic():
    with pytest.raises(NotSymmetric):
        QpProblem([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0])


# --- oracle agreement ----------------------------------------------------------


@pytest.mark.parametrize("inst", ORACLE["instances"], ids=lambda i: f"seed{i['seed']}")
def test_matches_frozen_oracle(inst):
    B, c = np.array(inst["B"]), np.array(inst["c"])
    sol = solve_pdipm(QpProblem(B, c))
    assert sol.converged
    assert np.all(sol.x >= -1e-9)
    assert abs(sol.objective - inst["grid_min"]) <= 1e-4
    assert abs(sol.objective - inst["exact_min"]) <= 1e-8


@pytest.mark.parametrize("seed", [3, 42, 97])
def test_oracle_recomputed_live(seed):
    n = 1 + seed % 4
    B, c = random_qp_instance(seed, n)
    frozen = ORACLE["instances"][seed]
    assert np.allclose(B, frozen["B"]) and np.allclose(c, frozen["c"])
    if n <= 3:
        assert qp_grid_min(B, c, qp_box_radius(B, c)) == pytest.approx(frozen["grid_min"], abs=1e-12)
    assert qp_active_set_min(B, c)[0] == pytest.approx(frozen["exact_min"], abs=1e-12)


@given(seed=st.integers(0, 10_000), h=st.integers(2, 8), beta=st.integers(1, 8))
def test_projected_perturbations_do_not_improve(seed, h, beta):
    beta = min(beta, h)
    p = np.random.default_rng(seed).dirichlet(np.ones(h))
    prob = build_qp(build_gamma(h, beta), p)
    sol = solve_pdipm(prob)
    assert sol.converged
    assert np.all(sol.x >= -1e-9)
    f0 = prob.objective(sol.x)
    # improvements smaller than the solver tolerance are not meaningful
    for i in range(h):
        for step in (1e-4, -1e-4):
            y = sol.x.copy()
            y[i] = max(0.0, y[i] + step)
            assert prob.objective(y) >= f0 - 1e-8


@given(seed=st.integers(0, 10_000), beta=st.integers(1, 96))
def test_objective_consistency_at_full_horizon(seed, beta):
    p = np.random.default_rng(seed).dirichlet(np.ones(96))
    gamma = build_gamma(96, beta)
    prob = build_qp(gamma, p)
    sol = solve_pdipm(prob)
    assert sol.converged and sol.kkt_residual <= 1e-8
    direct = float(np.sum((p - gamma @ sol.x) ** 2))
    assert abs(direct - (prob.objective(sol.x) + prob.offset)) <= 1e-10
    assert abs(sol.objective - prob.objective(sol.x)) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_gap_is_non_increasing(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(24))
    sol = solve_pdipm(build_qp(build_gamma(24, 1 + seed), p))
    gaps = np.array(sol.gap_history)
    assert np.all(np.diff(gaps) <= 1e-12 * gaps[:-1])


def test_iteration_cap_reports_best_iterate():
    p = np.random.default_rng(0).dirichlet(np.ones(12))
    sol = solve_pdipm(build_qp(build_gamma(12, 3), p), max_iter=1)
    assert not sol.converged
    assert sol.status == "max_iterations"
    assert np.all(sol.x >= -1e-9)


# --- bounds and equality rows ------------------------------------------------


def test_aggregate_hessian_matches_dense_with_constraints():
    rng = np.random.default_rng(8)
    n_slots, n_ev = 6, 3
    # x[e, s] for each EV e over slots s, aggregate load sum_e x[e, :]
    groups = np.tile(np.arange(n_slots), n_ev)
    base = rng.uniform(0, 5, n_slots)
    agg = AggregateHessian(groups, n_slots)
    dense = agg.to_dense()
    c = 2.0 * np.tile(base, n_ev)
    eq = np.kron(np.eye(n_ev), np.ones(n_slots))
    rhs = np.array([4.0, 6.0, 2.0])
    upper = np.full(n_slots * n_ev, 2.0)
    sol_a = solve_pdipm(QpProblem(agg, c, upper=upper, eq_matrix=eq, eq_rhs=rhs))
    sol_d = solve_pdipm(QpProblem(dense, c, upper=upper, eq_matrix=eq, eq_rhs=rhs))
    assert sol_a.converged and sol_d.converged
    assert abs(sol_a.objective - sol_d.objective) <= 1e-8
    assert np.allclose(eq @ sol_a.x, rhs, atol=1e-8)
    assert np.all(sol_a.x <= 2.0 + 1e-9) and np.all(sol_a.x >= -1e-9)
    load_a = base + sol_a.x.reshape(n_ev, n_slots).sum(axis=0)
    load_d = base + sol_d.x.reshape(n_ev, n_slots).sum(axis=0)
    assert np.allclose(load_a, load_d, atol=1e-6)


def test_valley_filling_levels_the_load():
    base = np.array([5.0, 1.0, 2.0, 6.0])
    agg = AggregateHessian(np.arange(4), 4)
    sol = solve_pdipm(QpProblem(agg, 2.0 * base, eq_matrix=np.ones((1, 4)), eq_rhs=[4.0]))
    # water level L: sum max(0, L - base) = 4 gives L = 3.5
    assert np.allclose(base + sol.x, [5.0, 3.5, 3.5, 6.0], atol=1e-7)
