"""Margin -> charging probability -> start-time distribution -> command.

Each EV with a B-type pile runs :func:`make_command` locally against the
broadcast margin. All slot arithmetic is on the wrapped day (mod H) with
1-based slot numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import as_generator
from .baseline import CapacityMargin
from .errors import BadDuration, DegenerateDistribution, InfeasibleDemand, SolverFailure
from .qp import DEFAULT_TOL, build_qp, solve_pdipm

DEFAULT_NS = 1000


def _frozen(values):
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ChargeProbability:
    p_cha: np.ndarray

    def __post_init__(self):
        p = _frozen(self.p_cha)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("charging probability must be a distribution")
        object.__setattr__(self, "p_cha", p)

    @property
    def horizon(self):
        return self.p_cha.shape[0]


@dataclass(frozen=True, eq=False)
class StartProbability:
    """Non-negative least-squares start weights for a given duration.

    Not normalized: only the windowed restriction is turned into a
    distribution.
    """

    p_st: np.ndarray
    duration_slots: int
    residual: float

    def __post_init__(self):
        p = _frozen(self.p_st)
        if np.any(p < 0) or self.residual < 0:
            raise ValueError("start weights and residual must be non-negative")
        object.__setattr__(self, "p_st", p)

    @property
    def horizon(self):
        return self.p_st.shape[0]


@dataclass(frozen=True)
class DemandRequest:
    arrival_slot: int
    departure_slot: int
    energy_kwh: float
    rated_kw: float = 7.0

    def __post_init__(self):
        if not self.energy_kwh > 0:
            raise ValueError(f"energy_kwh must be positive, got {self.energy_kwh}")
        if not self.rated_kw > 0:
            raise ValueError(f"rated_kw must be positive, got {self.rated_kw}")
        if self.arrival_slot < 1 or self.departure_slot < 1:
            raise ValueError("slots are 1-based")

    def duration_slots(self, slot_minutes=15):
        """Whole slots at rated power needed to cover the energy (rounded up)."""
        exact = self.energy_kwh / (self.rated_kw * slot_minutes / 60.0)
        return max(1, math.ceil(exact - 1e-9))

    def span_slots(self, horizon):
        """Slots from arrival to departure inclusive on the wrapped day."""
        return (self.departure_slot - self.arrival_slot) % horizon + 1


@dataclass(frozen=True)
class ChargeCommand:
    start_slot: int
    duration_slots: int
    power_kw: float

    def delivered_kwh(self, slot_minutes=15):
        return self.duration_slots * self.power_kw * slot_minutes / 60.0

    def slots(self, horizon):
        """0-based indices of the slots this command charges in."""
        return (self.start_slot - 1 + np.arange(self.duration_slots)) % horizon

    def profile(self, horizon):
        out = np.zeros(horizon)
        out[self.slots(horizon)] = self.power_kw
        return out

    def as_csv(self):
        return f"{self.start_slot},{self.duration_slots},{self.power_kw!r}"


@dataclass(frozen=True, eq=False)
class WindowedStartProbability:
    """Start distribution over feasible starts ``first..last`` (wrapped)."""

    window: tuple
    p_nor: np.ndarray
    horizon: int

    def __post_init__(self):
        p = _frozen(self.p_nor)
        if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("windowed start probability must be a non-empty distribution")
        object.__setattr__(self, "p_nor", p)

    @property
    def slots(self):
        """1-based start slots, in window order."""
        return (self.window[0] - 1 + np.arange(self.p_nor.size)) % self.horizon + 1


def charging_probability(margin) -> ChargeProbability:
    """Normalize the margin; an all-zero margin maps to the uniform vector."""
    zeta = np.asarray(getattr(margin, "zeta_kw", margin), dtype=float)
    total = zeta.sum()
    if total <= 0:
        return ChargeProbability(np.full(zeta.size, 1.0 / zeta.size))
    return ChargeProbability(zeta / total)


def build_gamma(h, beta) -> np.ndarray:
    """Occupancy matrix: entry (a, b) is 1 when a session of ``beta`` slots
    starting at slot b covers slot a (1-based a, b; circular day)."""
    if not 1 <= beta <= h:
        raise BadDuration(f"duration must be in [1, {h}], got {beta}")
    a = np.arange(1, h + 1)[:, None]
    b = np.arange(1, h + 1)[None, :]
    head = a <= beta
    lower = (b <= a) & (b >= a - beta + 1)
    wrap = head & (b >= h - beta + a + 1)
    return (lower | wrap).astype(float)


def solve_start_distribution(p_cha, beta, tol=DEFAULT_TOL) -> StartProbability:
    """Non-negative least squares ``min ||P_cha - G P_st||^2, P_st >= 0``."""
    p = np.asarray(getattr(p_cha, "p_cha", p_cha), dtype=float)
    gamma = build_gamma(p.size, beta)
    sol = solve_pdipm(build_qp(gamma, p), tol=tol)
    if not sol.converged:
        raise SolverFailure(
            f"interior point did not converge for duration {beta} "
            f"(KKT residual {sol.kkt_residual:.3g} after {sol.iterations} iterations)"
        )
    resid = gamma @ sol.x - p
    return StartProbability(sol.x, int(beta), float(resid @ resid))


def feasible_window(demand: DemandRequest, duration_slots, horizon):
    """(first, last, length) of feasible start slots on the wrapped day."""
    span = demand.span_slots(horizon)
    length = span - duration_slots + 1
    if length < 1:
        raise InfeasibleDemand(
            f"{duration_slots} slots needed but only {span} slot(s) between "
            f"arrival {demand.arrival_slot} and departure {demand.departure_slot}"
        )
    first = (demand.arrival_slot - 1) % horizon + 1
    last = (first - 1 + length - 1) % horizon + 1
    return first, last, length


def normalize_window(p_st: StartProbability, demand: DemandRequest) -> WindowedStartProbability:
    horizon = p_st.horizon
    first, last, length = feasible_window(demand, p_st.duration_slots, horizon)
    idx = (first - 1 + np.arange(length)) % horizon
    w = p_st.p_st[idx]
    total = w.sum()
    if total <= 0:
        w = np.full(length, 1.0 / length)
    else:
        w = w / total
    return WindowedStartProbability((first, last), w, horizon)


def accept_reject(p, n_s, rng):
    """Indices into ``p`` collected by acceptance-rejection until ``n_s`` are kept."""
    p = np.asarray(p, dtype=float)
    top = p.max()
    if not top > 0:
        raise DegenerateDistribution("cannot sample from an all-zero distribution")
    accepted = []
    kept = 0
    rate = max(p.mean() / top, 1e-3)
    while kept < n_s:
        batch = int((n_s - kept) / rate * 1.2) + 16
        cand = rng.integers(0, p.size, size=batch)
        level = rng.random(batch) * top
        ok = cand[p[cand] >= level]
        accepted.append(ok)
        kept += ok.size
    return np.concatenate(accepted)[:n_s]


def sample_start_time(p_nor: WindowedStartProbability, n_s=DEFAULT_NS, seed=0) -> int:
    """One start slot: build a pool of ``n_s`` accepted candidates, pick one."""
    if n_s < 1:
        raise ValueError(f"n_s must be >= 1, got {n_s}")
    rng = as_generator(seed)
    pool = accept_reject(p_nor.p_nor, n_s, rng)
    pick = pool[rng.integers(pool.size)]
    return int(p_nor.slots[pick])


def make_command(demand: DemandRequest, p_st: StartProbability, n_s=DEFAULT_NS, seed=0, slot_minutes=15) -> ChargeCommand:
    beta = demand.duration_slots(slot_minutes)
    if beta != p_st.duration_slots:
        raise BadDuration(
            f"start distribution was solved for {p_st.duration_slots} slots, demand needs {beta}"
        )
    windowed = normalize_window(p_st, demand)
    start = sample_start_time(windowed, n_s, seed)
    return ChargeCommand(start, beta, float(demand.rated_kw))


class StartDistributionCache:
    """Memoizes the start distribution per duration for one broadcast."""

    def __init__(self, probability: ChargeProbability, tol=DEFAULT_TOL):
        self.probability = probability
        self.tol = tol
        self._by_beta = {}

    def __call__(self, beta):
        if beta not in self._by_beta:
            self._by_beta[beta] = solve_start_distribution(self.probability, beta, self.tol)
        return self._by_beta[beta]


def plan_command(demand: DemandRequest, probability, n_s=DEFAULT_NS, seed=0, slot_minutes=15, cache=None):
    """Full on-site decision: duration, start distribution, sampled start."""
    horizon = probability.horizon
    beta = demand.duration_slots(slot_minutes)
    if beta > horizon:
        raise InfeasibleDemand(f"{beta} slots exceed the {horizon}-slot day")
    feasible_window(demand, beta, horizon)
    p_st = cache(beta) if cache is not None else solve_start_distribution(probability, beta)
    return make_command(demand, p_st, n_s, seed, slot_minutes)


# --- broadcast document ------------------------------------------------------


def broadcast_document(margin: CapacityMargin) -> dict:
    prob = charging_probability(margin)
    return {
        "slot_minutes": int(margin.slot_minutes),
        "transformer_kva": float(margin.transformer_kva),
        "zeta_kw": margin.zeta_kw.tolist(),
        "p_cha": prob.p_cha.tolist(),
    }


def write_broadcast(path, margin: CapacityMargin):
    Path(path).write_text(json.dumps(broadcast_document(margin), indent=2) + "\n", encoding="utf-8")


def read_broadcast(path):
    """Return ``(margin, probability)`` from a broadcast JSON file."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    margin = CapacityMargin(int(doc["slot_minutes"]), doc["zeta_kw"], float(doc["transformer_kva"]))
    probability = ChargeProbability(doc["p_cha"]) if "p_cha" in doc else charging_probability(margin)
    if probability.horizon != margin.horizon:
        raise ValueError("broadcast margin and probability lengths differ")
    return margin, probability
