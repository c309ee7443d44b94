"""Charging-behavior model: a trivariate Gaussian mixture over
(start slot, duration in slots, energy in kWh).

EM runs on standardized records. The covariance floor is applied as an
eigenvalue clip, which is the exact maximizer of the M-step under the
constraint ``Sigma >= floor * I``; EM therefore keeps its monotone-ascent
guarantee with the floor in place.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from ._rng import as_generator
from .errors import EmptyDataset, InvalidRecord, ParseError, SingularCovariance

COVARIANCE_FLOOR = 1e-6
DEFAULT_MAX_ITER = 500
DEFAULT_TOL = 1e-7
COLLAPSE_RESTARTS = 5
MIN_SAMPLED_ENERGY_KWH = 0.1
RECORD_HEADER = ("start_slot", "duration_slots", "energy_kwh")
CRITERIA = ("AIC", "BIC", "NLL")


@dataclass(frozen=True)
class ChargingRecord:
    """One historical charging session (start slot is 1-based)."""

    start_slot: int
    duration_slots: int
    energy_kwh: float

    def __post_init__(self):
        if int(self.start_slot) != self.start_slot or self.start_slot < 1:
            raise InvalidRecord(f"start_slot must be an integer >= 1, got {self.start_slot!r}")
        if int(self.duration_slots) != self.duration_slots or self.duration_slots < 1:
            raise InvalidRecord(f"duration_slots must be an integer >= 1, got {self.duration_slots!r}")
        if not (self.energy_kwh > 0 and math.isfinite(self.energy_kwh)):
            raise InvalidRecord(f"energy_kwh must be positive, got {self.energy_kwh!r}")
        object.__setattr__(self, "start_slot", int(self.start_slot))
        object.__setattr__(self, "duration_slots", int(self.duration_slots))
        object.__setattr__(self, "energy_kwh", float(self.energy_kwh))

    def as_tuple(self):
        return (self.start_slot, self.duration_slots, self.energy_kwh)


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        mu = np.array(self.means, dtype=float)
        cov = np.array(self.covariances, dtype=float)
        k = w.shape[0]
        if mu.ndim == 1:
            mu = mu.reshape(k, -1)
        d = mu.shape[1]
        cov = cov.reshape(k, d, d)
        if k < 1 or mu.shape[0] != k or cov.shape[0] != k:
            raise ValueError("weights, means and covariances must have the same length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex, got {w}")
        if not np.allclose(cov, np.transpose(cov, (0, 2, 1)), rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariances must be symmetric")
        for c in cov:
            np.linalg.cholesky(c)  # raises LinAlgError if not positive definite
        for arr in (w, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def component_count(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GmmModel):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.covariances, other.covariances)
        )

    __hash__ = None

    def to_dict(self):
        return {
            "K": int(self.component_count),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        model = cls(doc["weights"], doc["means"], doc["covariances"])
        if "K" in doc and int(doc["K"]) != model.component_count:
            raise ValueError(f"K={doc['K']} disagrees with {model.component_count} components")
        return model

    def marginal(self, dim):
        """1-D mixture over coordinate ``dim`` as (weights, means, stds)."""
        return self.weights.copy(), self.means[:, dim].copy(), np.sqrt(self.covariances[:, dim, dim])


@dataclass
class EmResult:
    model: GmmModel
    log_likelihoods: list
    converged: bool
    n_iter: int


@dataclass(frozen=True)
class ComponentSelection:
    per_dimension_counts: tuple
    criterion: str
    scores: dict = field(default_factory=dict)

    @property
    def total(self):
        return int(np.prod(self.per_dimension_counts))


def records_to_array(records):
    if isinstance(records, np.ndarray):
        arr = np.asarray(records, dtype=float)
        return arr.reshape(len(arr), -1)
    return np.array([r.as_tuple() for r in records], dtype=float).reshape(len(records), 3)


# --- EM core -----------------------------------------------------------------


def _component_log_pdf(X, mean, cov):
    d = X.shape[1]
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, (X - mean).T)
    maha = np.sum(sol * sol, axis=0)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * math.log(2.0 * math.pi) + log_det + maha)


def _log_joint(X, weights, means, covs):
    k = weights.shape[0]
    out = np.empty((X.shape[0], k))
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    for j in range(k):
        out[:, j] = log_w[j] + _component_log_pdf(X, means[j], covs[j])
    return out


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise SingularCovariance(f"cannot seed {k} components: records have fewer distinct values")
        idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(X, resp, floor, strict):
    n, d = X.shape
    nk = resp.sum(axis=0)
    k = nk.shape[0]
    if strict and np.any(nk < 1.0):
        raise SingularCovariance(f"a component lost its support (effective size {nk.min():.3g})")
    weights = nk / nk.sum()
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((k, d, d))
    for j in range(k):
        diff = X - means[j]
        raw = (resp[:, j, None] * diff).T @ diff / nk[j]
        raw = 0.5 * (raw + raw.T)
        vals, vecs = np.linalg.eigh(raw)
        if strict and vals.min() < floor:
            raise SingularCovariance(
                f"component {j} collapsed: variance {vals.min():.3g} below floor {floor:g}"
            )
        vals = np.maximum(vals, floor)
        cov = (vecs * vals) @ vecs.T
        covs[j] = 0.5 * (cov + cov.T)
    return weights, means, covs


def _em(X, k, rng, max_iter, tol, floor):
    """EM on an (n, d) standardized array. Returns params, trace, converged."""
    strict = k > 1
    centers = _kmeanspp(X, k, rng)
    labels = np.argmin(((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    resp = np.zeros((X.shape[0], k))
    resp[np.arange(X.shape[0]), labels] = 1.0
    weights, means, covs = _m_step(X, resp, floor, strict)
    trace = []
    converged = False
    for it in range(max_iter):
        log_joint = _log_joint(X, weights, means, covs)
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(log_norm.sum())
        trace.append(ll)
        if it > 0 and (ll - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        if it == max_iter - 1:
            break
        resp = np.exp(log_joint - log_norm[:, None])
        weights, means, covs = _m_step(X, resp, floor, strict)
    return weights, means, covs, trace, converged


def _standardize(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (X - center) / scale, center, scale


def em_fit(records, k, seed=0, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL, floor=COVARIANCE_FLOOR):
    """Fit a k-component GMM and return the model plus its EM trace.

    ``log_likelihoods[t]`` is the data log-likelihood (original units) of
    the parameters after t EM updates.
    """
    X = records_to_array(records)
    if X.shape[0] == 0:
        raise EmptyDataset("cannot fit a mixture to zero records")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_distinct = np.unique(X, axis=0).shape[0]
    if k > n_distinct:
        raise SingularCovariance(f"k={k} exceeds the {n_distinct} distinct records")
    Z, center, scale = _standardize(X)
    rng = as_generator(seed)
    for attempt in range(COLLAPSE_RESTARTS):
        try:
            weights, means, covs, trace, converged = _em(Z, k, rng, max_iter, tol, floor)
            break
        except SingularCovariance:
            # a fresh seeding often avoids the collapse; give up after a few
            if attempt == COLLAPSE_RESTARTS - 1:
                raise
    means = means * scale + center
    covs = covs * np.outer(scale, scale)[None, :, :]
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    shift = X.shape[0] * float(np.sum(np.log(scale)))
    trace = [ll - shift for ll in trace]
    weights = weights / weights.sum()
    model = GmmModel(weights, means, covs)
    return EmResult(model=model, log_likelihoods=trace, converged=converged, n_iter=len(trace))


def fit_gmm(records, k, seed=0, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL):
    return em_fit(records, k, seed=seed, max_iter=max_iter, tol=tol).model


def log_likelihood(model: GmmModel, records) -> float:
    """Sum of log mixture densities of ``records`` under ``model``."""
    X = records_to_array(records)
    if X.shape[0] == 0:
        return 0.0
    return float(logsumexp(_log_joint(X, model.weights, model.means, model.covariances), axis=1).sum())


def _n_params(k, d):
    return (k - 1) + k * d + k * d * (d + 1) // 2


def information_score(criterion, ll, k, d, n):
    criterion = criterion.upper()
    if criterion == "BIC":
        return -2.0 * ll + _n_params(k, d) * math.log(n)
    if criterion == "AIC":
        return -2.0 * ll + 2.0 * _n_params(k, d)
    if criterion == "NLL":
        return -ll
    raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")


def select_component_counts(records, criterion="BIC", max_k=4, seed=0) -> ComponentSelection:
    """Pick a component count per coordinate from 1-D mixture fits.

    The joint model then uses the product of the three counts.
    """
    X = records_to_array(records)
    if X.shape[0] == 0:
        raise EmptyDataset("cannot select components for zero records")
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    criterion = criterion.upper()
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    n = X.shape[0]
    counts = []
    scores = {}
    for dim in range(X.shape[1]):
        col = X[:, dim : dim + 1]
        dim_scores = {}
        for k in range(1, max_k + 1):
            try:
                res = em_fit(col, k, seed=seed)
            except SingularCovariance:
                dim_scores[k] = math.inf
                continue
            dim_scores[k] = information_score(criterion, res.log_likelihoods[-1], k, 1, n)
        best = min(dim_scores, key=lambda kk: (dim_scores[kk], kk))
        counts.append(best)
        scores[RECORD_HEADER[dim] if dim < 3 else dim] = dim_scores
    return ComponentSelection(per_dimension_counts=tuple(counts), criterion=criterion, scores=scores)


def fit_selected(records, criterion="BIC", max_k=4, seed=0):
    """Select per-coordinate counts, then fit the joint mixture.

    If the product count collapses, one component fewer is tried until a
    fit succeeds. Returns ``(EmResult, ComponentSelection)``.
    """
    selection = select_component_counts(records, criterion, max_k, seed=seed)
    k = selection.total
    while True:
        try:
            return em_fit(records, k, seed=seed), selection
        except SingularCovariance:
            if k == 1:
                raise
            k -= 1


# --- Latin hypercube sampling -------------------------------------------------


def allocate_counts(n, weights):
    """Largest-remainder apportionment of ``n`` draws; ties go to lower index."""
    weights = np.asarray(weights, dtype=float)
    raw = n * weights / weights.sum()
    base = np.floor(raw).astype(int)
    left = n - int(base.sum())
    frac = raw - base
    order = sorted(range(len(weights)), key=lambda i: (-frac[i], i))
    for i in order[:left]:
        base[i] += 1
    return base


def latin_hypercube(n, d, rng):
    """(n, d) points in [0,1)^d with one point per 1/n stratum of each axis."""
    u = rng.random((n, d))
    perms = np.column_stack([rng.permutation(n) for _ in range(d)]) if n else np.zeros((0, d))
    return (perms + u) / max(n, 1)


def sample_lhs_continuous(model: GmmModel, n, seed=0):
    """Pre-rounding LHS draws.

    Returns ``(points, components, unit)``: the (n, d) samples, each
    sample's component index, and the Latin-hypercube unit coordinates
    that generated it.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = as_generator(seed)
    d = model.dim
    counts = allocate_counts(n, model.weights)
    points = np.empty((n, d))
    units = np.empty((n, d))
    comps = np.empty(n, dtype=int)
    start = 0
    for j, nj in enumerate(counts):
        if nj == 0:
            continue
        unit = latin_hypercube(nj, d, rng)
        z = norm.ppf(unit)
        chol = np.linalg.cholesky(model.covariances[j])
        points[start : start + nj] = model.means[j] + z @ chol.T
        units[start : start + nj] = unit
        comps[start : start + nj] = j
        start += nj
    return points, comps, units


def discretize(points, horizon=96):
    starts = np.clip(np.rint(points[:, 0]), 1, horizon).astype(int)
    durations = np.maximum(np.rint(points[:, 1]), 1).astype(int)
    energies = np.maximum(points[:, 2], MIN_SAMPLED_ENERGY_KWH)
    return [ChargingRecord(int(s), int(b), float(e)) for s, b, e in zip(starts, durations, energies)]


def sample_lhs(model: GmmModel, n, seed=0, horizon=96):
    points, _, _ = sample_lhs_continuous(model, n, seed)
    return discretize(points, horizon)


# --- I/O ---------------------------------------------------------------------


def read_records(path):
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: file is empty") from None
        if tuple(h.strip() for h in header) != RECORD_HEADER:
            raise ParseError(f"expected header {','.join(RECORD_HEADER)}", path, 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", path, line)
            try:
                start, dur, energy = int(row[0]), int(row[1]), float(row[2])
                records.append(ChargingRecord(start, dur, energy))
            except (ValueError, InvalidRecord) as exc:
                raise ParseError(str(exc), path, line) from None
    if not records:
        raise EmptyDataset(f"{path}: no records")
    return records


def write_records(path, records):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow([r.start_slot, r.duration_slots, repr(r.energy_kwh)])


def save_model(path, model: GmmModel, **meta):
    doc = model.to_dict()
    doc.update(meta)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path):
    """Return ``(model, document)`` from a JSON model file."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return GmmModel.from_dict(doc), doc
