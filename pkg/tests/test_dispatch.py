import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evcharge.baseline import CapacityMargin
from evcharge.dispatch import (
    ChargeProbability,
    DemandRequest,
    StartDistributionCache,
    StartProbability,
    WindowedStartProbability,
    accept_reject,
    build_gamma,
    charging_probability,
    feasible_window,
    make_command,
    normalize_window,
    plan_command,
    read_broadcast,
    sample_start_time,
    solve_start_distribution,
    write_broadcast,
)
from evcharge.errors import BadDuration, DegenerateDistribution, InfeasibleDemand
from oracles import gamma_by_simulation


# --- charging probability ------------------------------------------------------


def test_probability_normalizes_margin():
    assert charging_probability([1.0, 1.0, 2.0]).p_cha.tolist() == [0.25, 0.25, 0.5]


def test_probability_zero_margin_is_uniform():
    assert charging_probability(np.zeros(4)).p_cha.tolist() == [0.25] * 4


def test_probability_uniform_margin():
    assert np.allclose(charging_probability(np.full(96, 37.0)).p_cha, 1 / 96)


def test_probability_accepts_margin_object():
    m = CapacityMargin(15, np.r_[np.ones(48), np.zeros(48)], 600.0)
    assert np.allclose(charging_probability(m).p_cha[:48], 1 / 48)


@given(
    zeta=st.lists(st.floats(0, 600), min_size=2, max_size=96).filter(lambda z: sum(z) > 1e-6),
    scale=st.sampled_from([0.5, 2.0, 4.0, 1024.0, 2.0**-10]),
)
def test_probability_is_scale_invariant(zeta, scale):
    a = charging_probability(np.array(zeta)).p_cha
    b = charging_probability(np.array(zeta) * scale).p_cha
    assert np.array_equal(a, b)


# --- occupancy matrix --------------------------------------------------------


def test_gamma_four_slots_two_long():
    expected = [[1, 0, 0, 1], [1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]]
    assert build_gamma(4, 2).tolist() == expected


def test_gamma_extremes():
    assert np.array_equal(build_gamma(7, 1), np.eye(7))
    assert np.array_equal(build_gamma(7, 7), np.ones((7, 7)))


@pytest.mark.parametrize("beta", [0, 5])
def test_gamma_rejects_bad_duration(beta):
    with pytest.raises(BadDuration):
        build_gamma(4, beta)


@pytest.mark.parametrize("h", range(1, 17))
def test_gamma_matches_session_walk(h):
    for beta in range(1, h + 1):
        g = build_gamma(h, beta)
        assert np.array_equal(g, gamma_by_simulation(h, beta))
        assert np.all(g.sum(axis=0) == beta) and np.all(g.sum(axis=1) == beta)
        # circulant: every column is the first column rotated
        for b in range(h):
            assert np.array_equal(g[:, b], np.roll(g[:, 0], b))


# --- start distribution ------------------------------------------------------


def test_unit_duration_reproduces_probability():
    p = np.random.default_rng(1).dirichlet(np.ones(12))
    sol = solve_start_distribution(p, 1)
    assert np.allclose(sol.p_st, p, atol=1e-8)
    assert sol.residual < 1e-14


@pytest.mark.parametrize("beta", [1, 3, 20, 96])
def test_uniform_probability_gives_uniform_starts(beta):
    sol = solve_start_distribution(np.full(96, 1 / 96), beta)
    assert np.allclose(sol.p_st, 1 / (96 * beta), atol=1e-8)
    assert sol.residual < 1e-14


def test_tiny_instance_matches_grid_search():
    p = np.array([0.5, 0.5, 0.0, 0.0])
    gamma = build_gamma(4, 2)
    sol = solve_start_distribution(p, 2)
    # Any start weight above max(p) can be lowered without increasing a
    # residual, so [0, max p]^4 holds a minimizer. Grid the first three
    # coordinates and minimize the last one exactly.
    ticks = np.arange(0.0, 0.5 + 5e-4, 1e-3)
    x2, x3 = np.meshgrid(ticks, ticks, indexing="ij")
    col = gamma[:, 3]
    best = np.inf
    for x1 in ticks:
        head = np.stack([np.full(x2.size, x1), x2.ravel(), x3.ravel()], axis=1)
        partial = head @ gamma[:, :3].T - p
        x4 = np.maximum(0.0, -(partial @ col) / (col @ col))
        best = min(best, float(np.min(np.sum((partial + x4[:, None] * col) ** 2, axis=1))))
    assert abs(sol.residual - best) <= 1e-4
    assert np.all(sol.p_st >= 0)


# --- windowing -----------------------------------------------------------------


def test_window_restriction_and_renormalization():
    p_st = StartProbability([0.1, 0.2, 0.3, 0.2, 0.1, 0.1], 2, 0.0)
    w = normalize_window(p_st, DemandRequest(2, 5, 3.5, 7.0))
    assert w.window == (2, 4)
    assert np.allclose(w.p_nor, [2 / 7, 3 / 7, 2 / 7])
    assert w.slots.tolist() == [2, 3, 4]


def test_window_of_one_is_point_mass():
    p_st = StartProbability(np.full(6, 0.1), 2, 0.0)
    w = normalize_window(p_st, DemandRequest(3, 4, 3.5, 7.0))
    assert w.p_nor.tolist() == [1.0]
    assert w.slots.tolist() == [3]


def test_window_too_short_is_infeasible():
    p_st = StartProbability(np.full(6, 0.1), 4, 0.0)
    with pytest.raises(InfeasibleDemand):
        normalize_window(p_st, DemandRequest(2, 4, 7.0, 7.0))


def test_zero_mass_window_falls_back_to_uniform():
    p_st = StartProbability([1.0, 0.0, 0.0, 0.0, 0.0, 1.0], 1, 0.0)
    w = normalize_window(p_st, DemandRequest(2, 4, 1.0, 7.0))
    assert np.allclose(w.p_nor, 1 / 3)


def test_overnight_window_length():
    d = DemandRequest(77, 30, 35.0, 7.0)
    assert d.duration_slots(15) == 20
    first, last, length = feasible_window(d, 20, 96)
    assert (first, last, length) == (77, 11, (96 - 77 + 1) + (30 - 20 + 1))


def test_duration_rounds_up():
    assert DemandRequest(1, 96, 1.0, 7.0).duration_slots(15) == 1
    assert DemandRequest(1, 96, 3.5, 7.0).duration_slots(15) == 2
    assert DemandRequest(1, 96, 3.6, 7.0).duration_slots(15) == 3


# --- sampling ----------------------------------------------------------------


def test_point_mass_always_returns_its_slot():
    w = WindowedStartProbability((9, 9), [1.0], 96)
    assert {sample_start_time(w, 1000, s) for s in range(50)} == {9}


def test_sampler_is_deterministic_per_seed():
    w = WindowedStartProbability((90, 5), np.full(12, 1 / 12), 96)
    assert [sample_start_time(w, 1000, 7) for _ in range(3)] == [sample_start_time(w, 1000, 7)] * 3


def test_uniform_window_frequencies():
    w = WindowedStartProbability((10, 13), np.full(4, 0.25), 96)
    rng = np.random.default_rng(2024)
    draws = np.array([sample_start_time(w, 1000, rng) for _ in range(100_000)])
    freq = np.bincount(draws - 10, minlength=4) / draws.size
    assert np.all((freq >= 0.24) & (freq <= 0.26))


def test_accept_reject_pool_size_and_support():
    p = np.array([0.0, 0.2, 0.0, 0.8])
    pool = accept_reject(p, 1000, np.random.default_rng(0))
    assert pool.size == 1000
    assert set(np.unique(pool)) <= {1, 3}


def test_accept_reject_rejects_all_zero():
    with pytest.raises(DegenerateDistribution):
        accept_reject(np.zeros(3), 10, np.random.default_rng(0))


# --- commands ----------------------------------------------------------------


def test_command_duration_mismatch():
    with pytest.raises(BadDuration):
        make_command(DemandRequest(1, 96, 35.0), StartProbability(np.ones(96), 3, 0.0))


def test_plan_infeasible_demand():
    prob = ChargeProbability(np.full(96, 1 / 96))
    with pytest.raises(InfeasibleDemand):
        plan_command(DemandRequest(77, 80, 35.0), prob)


@given(
    arrival=st.integers(1, 96),
    departure=st.integers(1, 96),
    energy=st.floats(0.5, 60.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_commands_fit_inside_the_demand_window(arrival, departure, energy, seed):
    rng = np.random.default_rng(seed % 1000)
    prob = charging_probability(rng.uniform(0, 300, 96))
    demand = DemandRequest(arrival, departure, energy, 7.0)
    beta = demand.duration_slots(15)
    if beta > demand.span_slots(96):
        with pytest.raises(InfeasibleDemand):
            plan_command(demand, prob, 200, seed)
        return
    cmd = plan_command(demand, prob, 200, seed)
    assert cmd.duration_slots == beta
    assert cmd.power_kw == 7.0
    offset = (cmd.start_slot - arrival) % 96
    assert offset + beta <= demand.span_slots(96)
    profile = cmd.profile(96)
    assert np.count_nonzero(profile) == beta
    assert set(np.unique(profile)) <= {0.0, 7.0}
    assert cmd.delivered_kwh(15) >= energy - 1e-9
    assert cmd.delivered_kwh(15) - energy < 7.0 * 0.25


def test_cache_reuses_solutions():
    prob = charging_probability(np.random.default_rng(3).uniform(0, 100, 96))
    cache = StartDistributionCache(prob)
    assert cache(20) is cache(20)
    a = plan_command(DemandRequest(77, 30, 35.0), prob, seed=5, cache=cache)
    b = plan_command(DemandRequest(77, 30, 35.0), prob, seed=5)
    assert a == b


def test_broadcast_round_trip(tmp_path):
    m = CapacityMargin(15, np.random.default_rng(4).uniform(0, 600, 96), 600.0)
    write_broadcast(tmp_path / "b.json", m)
    margin, prob = read_broadcast(tmp_path / "b.json")
    assert np.array_equal(margin.zeta_kw, m.zeta_kw)
    assert np.array_equal(prob.p_cha, charging_probability(m).p_cha)
