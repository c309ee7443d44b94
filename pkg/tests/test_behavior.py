import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from evcharge.behavior import (
    ChargingRecord,
    GmmModel,
    allocate_counts,
    em_fit,
    fit_gmm,
    fit_selected,
    load_model,
    log_likelihood,
    read_records,
    sample_lhs,
    sample_lhs_continuous,
    save_model,
    select_component_counts,
    write_records,
)
from evcharge.errors import EmptyDataset, InvalidRecord, ParseError, SingularCovariance


def synthetic(rng, n, mean, std):
    pts = rng.normal(mean, std, size=(n, 3))
    return [
        ChargingRecord(max(1, min(96, int(round(s)))), max(1, int(round(d))), max(0.5, float(e)))
        for s, d, e in pts
    ]


def arrays(rng, n, mean, std):
    return rng.normal(mean, std, size=(n, 3))


# --- records -----------------------------------------------------------------


@pytest.mark.parametrize("args", [(0, 4, 5.0), (1, 0, 5.0), (1, 4, 0.0), (1, 4, -2.0), (1.5, 4, 1.0)])
def test_record_rejects_invalid_fields(args):
    with pytest.raises(InvalidRecord):
        ChargingRecord(*args)


# --- fitting -----------------------------------------------------------------


def test_single_component_is_moment_matching():
    X = arrays(np.random.default_rng(3), 400, [40, 16, 25], [5, 2, 4])
    model = fit_gmm(X, 1, seed=0)
    assert np.allclose(model.means[0], X.mean(axis=0), atol=1e-9)
    assert np.allclose(model.covariances[0], np.cov(X.T, bias=True), rtol=1e-6, atol=1e-8)


def test_two_separated_clusters_are_recovered():
    rng = np.random.default_rng(11)
    a = rng.normal([20, 8, 10], [2.0, 1.0, 1.5], size=(500, 3))
    b = rng.normal([80, 20, 35], [2.0, 1.0, 1.5], size=(500, 3))
    model = fit_gmm(np.vstack([a, b]), 2, seed=0)
    order = np.argsort(model.means[:, 0])
    assert np.all(np.abs(model.means[order[0]] - [20, 8, 10]) < 1.0)
    assert np.all(np.abs(model.means[order[1]] - [80, 20, 35]) < 1.0)
    assert np.allclose(model.weights, 0.5, atol=1e-6)


def test_empty_records_raise():
    with pytest.raises(EmptyDataset):
        fit_gmm([], 1)
    with pytest.raises(EmptyDataset):
        select_component_counts([])


def test_k_above_distinct_records_raises():
    recs = [ChargingRecord(10, 4, 5.0)] * 5 + [ChargingRecord(20, 4, 5.0)] * 5
    with pytest.raises(SingularCovariance):
        fit_gmm(recs, 3)


def test_collapsing_component_raises():
    rng = np.random.default_rng(0)
    spread = rng.normal([60, 20, 30], [10, 5, 6], size=(60, 3))
    stuck = np.tile([[10.0, 4.0, 5.0]], (60, 1))
    with pytest.raises(SingularCovariance):
        fit_gmm(np.vstack([spread, stuck]), 2, seed=0)


@pytest.mark.parametrize("seed", range(20))
def test_em_log_likelihood_is_monotone(seed):
    rng = np.random.default_rng(seed)
    k = 1 + seed % 3
    X = np.vstack([rng.normal(rng.uniform(0, 90, 3), rng.uniform(1, 8, 3), size=(80, 3)) for _ in range(3)])
    res = em_fit(X, k, seed=seed)
    ll = np.array(res.log_likelihoods)
    assert np.all(np.diff(ll) >= -1e-7 * np.abs(ll[1:]))
    assert math.isclose(ll[-1], log_likelihood(res.model, X), rel_tol=1e-8)


@given(seed=st.integers(0, 10_000), k=st.integers(1, 3))
def test_fitted_model_is_valid(seed, k):
    X = np.random.default_rng(seed).normal([50, 20, 30], [15, 6, 8], size=(200, 3))
    model = fit_gmm(X, k, seed=seed)
    assert model.component_count == k
    assert abs(model.weights.sum() - 1.0) <= 1e-9
    assert np.all(model.weights >= 0)
    for cov in model.covariances:
        np.linalg.cholesky(cov + 1e-6 * np.eye(3))
        assert np.allclose(cov, cov.T)


def test_fit_is_deterministic_per_seed():
    X = np.random.default_rng(5).normal([50, 20, 30], [15, 6, 8], size=(200, 3))
    assert fit_gmm(X, 3, seed=7) == fit_gmm(X, 3, seed=7)


# --- likelihood --------------------------------------------------------------


def test_log_likelihood_at_mean_of_unit_normal():
    model = GmmModel([1.0], [[40.0, 16.0, 25.0]], [np.eye(3)])
    assert math.isclose(log_likelihood(model, [ChargingRecord(40, 16, 25.0)]), -1.5 * math.log(2 * math.pi))
    assert round(log_likelihood(model, [ChargingRecord(40, 16, 25.0)]), 4) == -2.7568


def test_log_likelihood_empty_and_duplicated():
    model = GmmModel([0.3, 0.7], [[20, 8, 10], [70, 20, 30]], [np.eye(3) * 4, np.eye(3) * 9])
    recs = synthetic(np.random.default_rng(1), 30, [50, 14, 20], [20, 4, 8])
    assert log_likelihood(model, []) == 0.0
    assert math.isclose(log_likelihood(model, recs + recs), 2 * log_likelihood(model, recs), rel_tol=1e-12)


# --- component selection -----------------------------------------------------


def test_bic_picks_one_component_for_unimodal_data():
    recs = synthetic(np.random.default_rng(2), 600, [60, 40, 25], [6, 4, 4])
    sel = select_component_counts(recs, "BIC", max_k=3)
    assert sel.per_dimension_counts == (1, 1, 1)
    assert sel.total == 1


def test_bic_finds_bimodal_start_marginal():
    rng = np.random.default_rng(4)
    # 19:00 and 22:00 arrivals on a 96-slot day
    starts = np.concatenate([rng.normal(77, 2.0, 400), rng.normal(89, 1.5, 300)])
    durs = rng.normal(40, 4, 700)
    energy = rng.normal(25, 4, 700)
    recs = [ChargingRecord(int(round(s)), max(1, int(round(d))), max(0.5, e)) for s, d, e in zip(starts, durs, energy)]
    sel = select_component_counts(recs, "BIC", max_k=3)
    assert sel.per_dimension_counts == (2, 1, 1)
    res, sel2 = fit_selected(recs, "BIC", max_k=3)
    assert res.model.component_count == sel2.total == 2


@pytest.mark.parametrize("criterion", ["AIC", "BIC", "NLL"])
def test_max_k_one_gives_single_components(criterion):
    recs = synthetic(np.random.default_rng(9), 100, [50, 20, 20], [20, 8, 8])
    sel = select_component_counts(recs, criterion, max_k=1)
    assert sel.per_dimension_counts == (1, 1, 1)


def test_nll_never_prefers_fewer_components_by_much():
    recs = synthetic(np.random.default_rng(6), 300, [50, 20, 20], [20, 8, 8])
    sel = select_component_counts(recs, "NLL", max_k=3)
    for scores in sel.scores.values():
        assert scores[3] <= scores[1] + 1e-6


# --- sampling ----------------------------------------------------------------


def test_lhs_zero_samples():
    model = GmmModel([1.0], [[40, 16, 25]], [np.eye(3)])
    assert sample_lhs(model, 0) == []


def test_lhs_latin_property_on_quartiles():
    model = GmmModel([1.0], [[0.0, 0.0, 0.0]], [np.eye(3)])
    points, comps, _ = sample_lhs_continuous(model, 4, seed=3)
    strata = np.floor(norm.cdf(points) * 4).astype(int)
    for col in strata.T:
        assert sorted(col) == [0, 1, 2, 3]
    assert np.all(comps == 0)


@given(n=st.integers(1, 60), seed=st.integers(0, 2**31 - 1))
def test_lhs_each_stratum_holds_one_draw(n, seed):
    cov = np.array([[4.0, 1.0, 0.5], [1.0, 2.0, 0.3], [0.5, 0.3, 3.0]])
    model = GmmModel([1.0], [[40, 16, 25]], [cov])
    _, _, units = sample_lhs_continuous(model, n, seed=seed)
    for col in units.T:
        assert sorted(np.floor(col * n).astype(int)) == list(range(n))


def test_lhs_mean_converges():
    model = GmmModel([1.0], [[40, 16, 25]], [np.diag([16.0, 4.0, 9.0])])
    recs = sample_lhs(model, 100_000, seed=1)
    arr = np.array([r.as_tuple() for r in recs])
    assert np.all(np.abs(arr.mean(axis=0) - [40, 16, 25]) < 0.5)


def test_lhs_component_counts_follow_weights():
    model = GmmModel([0.25, 0.35, 0.4], [[20, 8, 10], [50, 20, 20], [80, 30, 30]], [np.eye(3)] * 3)
    _, comps, _ = sample_lhs_continuous(model, 10, seed=0)
    assert np.bincount(comps, minlength=3).tolist() == [3, 3, 4]


def test_lhs_discretization_bounds():
    model = GmmModel([1.0], [[2.0, 1.0, 0.2]], [np.diag([25.0, 4.0, 1.0])])
    for r in sample_lhs(model, 500, seed=2):
        assert 1 <= r.start_slot <= 96
        assert r.duration_slots >= 1
        assert r.energy_kwh >= 0.1


@given(n=st.integers(0, 500), w=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6))
def test_allocate_counts_is_largest_remainder(n, w):
    counts = allocate_counts(n, w)
    share = n * np.asarray(w) / np.sum(w)
    assert counts.sum() == n
    assert np.all(np.abs(counts - share) < 1.0)


# --- I/O ---------------------------------------------------------------------


def test_model_json_round_trip(tmp_path):
    X = np.random.default_rng(5).normal([50, 20, 30], [15, 6, 8], size=(200, 3))
    model = fit_gmm(X, 2, seed=1)
    save_model(tmp_path / "m.json", model, seed=1, criterion="BIC")
    loaded, doc = load_model(tmp_path / "m.json")
    assert loaded == model
    assert doc["K"] == 2 and doc["criterion"] == "BIC"


def test_records_csv_round_trip(tmp_path):
    recs = synthetic(np.random.default_rng(0), 25, [50, 20, 20], [20, 8, 8])
    write_records(tmp_path / "r.csv", recs)
    assert read_records(tmp_path / "r.csv") == recs


def test_header_only_csv_is_empty(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("start_slot,duration_slots,energy_kwh\n")
    with pytest.raises(EmptyDataset):
        read_records(path)


def test_malformed_row_reports_its_line(tmp_path):
    rows = ["start_slot,duration_slots,energy_kwh"] + [f"{10 + i},8,12.5" for i in range(15)] + ["12,abc,3.0"]
    path = tmp_path / "r.csv"
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(ParseError) as info:
        read_records(path)
    assert info.value.line == 17
