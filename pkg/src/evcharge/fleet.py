"""Scenario generation and disordered / centralized / distributed fleet runs.

Times in :class:`ScenarioConfig` are given in 15-minute slots (the
resolution of the demand tables) and converted when ``slot_minutes``
differs.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import behavior
from ._rng import derive_seed, substream
from .baseline import (
    CapacityMargin,
    LoadProfile,
    capacity_margin,
    estimate_group_baseline,
    slots_per_day,
    total_baseline,
)
from .dispatch import (
    DEFAULT_NS,
    ChargeCommand,
    DemandRequest,
    StartDistributionCache,
    charging_probability,
    plan_command,
)
from .errors import InfeasibleDemand, SolverFailure
from .qp import AggregateHessian, QpProblem, solve_pdipm

log = logging.getLogger(__name__)

LEVEL_LOAD_RATE = {"low": 0.28, "medium": 0.47, "high": 0.70}
DEMAND_TYPES = ("homogeneous", "non_homogeneous")
DISORDERED_MODES = ("arrival", "tou")
MODES = ("disordered", "centralized", "distributed")
TABLE_SLOT_MINUTES = 15
VALLEY_PRICE_HOUR = 22.0
PEAK_PRICE_HOUR = 8.0
MIN_DEMAND_KWH = 1.0
CENTRAL_TOL = 1e-9

# Energy demand mixture (weight, mean kWh, std kWh) used when no fitted
# behavior model is supplied.
DEFAULT_ENERGY_MIXTURE = ((0.6, 12.0, 4.0), (0.4, 28.0, 6.0))


@dataclass(frozen=True)
class ScenarioConfig:
    user_count: int = 100
    penetration: float = 0.6
    controllable_fraction: float = 0.5
    disconnection_fraction: float = 1.0
    demand_type: str = "non_homogeneous"
    residential_level: str = "medium"
    residential_rate: float | None = None
    transformer_kva: float = 600.0
    rated_kw: float = 7.0
    slot_minutes: int = 15
    seed: int = 0
    ev_count: int | None = None
    n_s: int = DEFAULT_NS
    disordered_mode: str = "arrival"
    tou_fraction: float = 0.5
    history_days: int = 30
    homogeneous_arrival: int = 77
    homogeneous_departure: int = 30
    homogeneous_energy_kwh: float = 35.0
    arrival_mean: float = 77.0
    arrival_std: float = 8.0
    departure_mean: float = 30.0
    departure_std: float = 4.0
    energy_mixture: tuple = DEFAULT_ENERGY_MIXTURE

    def __post_init__(self):
        for name in ("penetration", "controllable_fraction", "disconnection_fraction", "tou_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.user_count < 0:
            raise ValueError("user_count must be non-negative")
        if not self.transformer_kva > 0 or not self.rated_kw > 0:
            raise ValueError("transformer_kva and rated_kw must be positive")
        if self.demand_type not in DEMAND_TYPES:
            raise ValueError(f"demand_type must be one of {DEMAND_TYPES}")
        if self.residential_level not in LEVEL_LOAD_RATE:
            raise ValueError(f"residential_level must be one of {tuple(LEVEL_LOAD_RATE)}")
        if self.disordered_mode not in DISORDERED_MODES:
            raise ValueError(f"disordered_mode must be one of {DISORDERED_MODES}")
        if self.residential_rate is not None and not self.residential_rate >= 0:
            raise ValueError("residential_rate must be non-negative")
        if self.ev_count is not None and self.ev_count < 0:
            raise ValueError("ev_count must be non-negative")
        slots_per_day(self.slot_minutes)
        mix = tuple(tuple(float(v) for v in comp) for comp in self.energy_mixture)
        if not mix or any(len(c) != 3 or c[0] < 0 or c[2] <= 0 for c in mix):
            raise ValueError("energy_mixture must be (weight, mean, std) triples")
        object.__setattr__(self, "energy_mixture", mix)

    @property
    def horizon(self):
        return slots_per_day(self.slot_minutes)

    @property
    def slot_hours(self):
        return self.slot_minutes / 60.0

    @property
    def ev_total(self):
        if self.ev_count is not None:
            return int(self.ev_count)
        return int(math.floor(self.penetration * self.user_count + 0.5))

    def counts(self):
        """(controllable, disconnected) EV counts by largest remainder."""
        m = self.ev_total
        n_ctrl = int(_largest_remainder(m, [self.controllable_fraction, 1.0 - self.controllable_fraction])[0])
        n_disc = int(_largest_remainder(n_ctrl, [self.disconnection_fraction, 1.0 - self.disconnection_fraction])[0])
        return n_ctrl, n_disc

    def table_slot(self, slot15):
        """Convert a 15-minute-grid slot number to this config's grid."""
        if self.slot_minutes == TABLE_SLOT_MINUTES:
            return int(slot15)
        hours = (slot15 - 1) * TABLE_SLOT_MINUTES / 60.0
        return int(math.floor(hours * 60.0 / self.slot_minutes + 0.5)) % self.horizon + 1

    def to_dict(self):
        doc = dataclasses.asdict(self)
        doc["energy_mixture"] = [list(c) for c in self.energy_mixture]
        return doc

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        doc = dict(doc)
        if "energy_mixture" in doc:
            doc["energy_mixture"] = tuple(tuple(c) for c in doc["energy_mixture"])
        return cls(**doc)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def load_config(path):
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _largest_remainder(n, fractions):
    fractions = np.asarray(fractions, dtype=float)
    if fractions.sum() <= 0:
        return np.zeros(len(fractions), dtype=int)
    return behavior.allocate_counts(n, fractions)


@dataclass(frozen=True)
class EvAgent:
    demand: DemandRequest
    controllable: bool
    connected: bool
    preferred_start: int

    @property
    def runs_locally(self):
        return self.controllable and not self.connected


class Scenario(NamedTuple):
    agents: tuple
    residential: LoadProfile


@dataclass(eq=False)
class SimulationResult:
    mode: str
    residential: LoadProfile
    ev_load: LoadProfile
    total_load: LoadProfile
    per_ev_commands: list
    per_ev_kw: np.ndarray
    per_ev_energy_kwh: np.ndarray
    peak_kw: float
    pvd_kw: float
    overloaded: bool
    transformer_kva: float
    fallbacks: int = 0

    def same_as(self, other):
        return (
            self.mode == other.mode
            and self.total_load == other.total_load
            and self.ev_load == other.ev_load
            and self.per_ev_commands == other.per_ev_commands
            and np.array_equal(self.per_ev_kw, other.per_ev_kw)
            and self.fallbacks == other.fallbacks
        )


# --- residential template ----------------------------------------------------


def _bump(hours, center, width):
    d = np.abs((hours - center + 12.0) % 24.0 - 12.0)
    return np.where(d < width, 0.5 * (1.0 + np.cos(np.pi * d / width)), 0.0)


def residential_shape(horizon):
    """Unit-mean double-peak daily shape.

    Late-morning and early-evening peaks (about 1.4x the mean) with a night
    trough near 0.52x; load falls back toward the mean after 19:00.
    """
    hours = (np.arange(horizon) + 0.5) * 24.0 / horizon
    shape = (
        1.0
        + 0.35 * _bump(hours, 10.5, 4.5)
        + 0.35 * _bump(hours, 17.0, 3.0)
        - 0.50 * _bump(hours, 2.5, 7.0)
    )
    return shape / shape.mean()


def residential_profile(level, transformer_kva=600.0, slot_minutes=15, rate=None) -> LoadProfile:
    """Template scaled so its mean is ``rate * transformer_kva``.

    ``rate`` defaults to the level's mean load rate.
    """
    rate = LEVEL_LOAD_RATE[level] if rate is None else float(rate)
    shape = residential_shape(slots_per_day(slot_minutes))
    return LoadProfile(slot_minutes, shape * rate * transformer_kva)


def scenario_residential(config: ScenarioConfig) -> LoadProfile:
    return residential_profile(
        config.residential_level, config.transformer_kva, config.slot_minutes, config.residential_rate
    )


# --- demand generation -------------------------------------------------------


def _draw_energy(config, n, seed, trial, tag):
    mix = np.array(config.energy_mixture)
    weights = mix[:, 0] / mix[:, 0].sum()
    u = substream(seed, tag, trial, "energy_component").random(n)
    comp = np.minimum(np.searchsorted(np.cumsum(weights), u, side="right"), len(weights) - 1)
    noise = substream(seed, tag, trial, "energy_noise").standard_normal(n)
    return np.maximum(mix[comp, 1] + mix[comp, 2] * noise, MIN_DEMAND_KWH)


def _draw_non_homogeneous(config, n, seed, trial, tag):
    H = config.horizon
    scale = TABLE_SLOT_MINUTES / config.slot_minutes
    arr = substream(seed, tag, trial, "arrival").standard_normal(n)
    dep = substream(seed, tag, trial, "departure").standard_normal(n)
    arrivals = (np.rint((config.arrival_mean - 1 + config.arrival_std * arr) * scale).astype(int)) % H + 1
    departures = np.clip(np.rint((config.departure_mean - 1 + config.departure_std * dep) * scale).astype(int) + 1, 1, H)
    energies = _draw_energy(config, n, seed, trial, tag)
    return arrivals, departures, energies


def _preferred_start(config, demand, defer):
    """Start slot chosen by the driver when charging is uncontrolled."""
    if not defer:
        return demand.arrival_slot
    H = config.horizon
    valley = int(round(VALLEY_PRICE_HOUR * 60 / config.slot_minutes)) + 1
    peak_start = int(round(PEAK_PRICE_HOUR * 60 / config.slot_minutes)) + 1
    if not peak_start <= demand.arrival_slot < valley:
        return demand.arrival_slot
    beta = demand.duration_slots(config.slot_minutes)
    offset = (valley - demand.arrival_slot) % H
    if offset + beta > demand.span_slots(H):
        return demand.arrival_slot
    return valley


def generate_scenario(config: ScenarioConfig, trial=0) -> Scenario:
    """Agents and residential profile for one trial of ``config``.

    Every per-EV quantity is drawn from a stream keyed by (seed, trial) in
    EV order, so EV ``i`` has the same demand for any fleet size.
    """
    m = config.ev_total
    seed = config.seed
    if config.demand_type == "homogeneous":
        arrivals = np.full(m, config.table_slot(config.homogeneous_arrival))
        departures = np.full(m, config.table_slot(config.homogeneous_departure))
        energies = np.full(m, float(config.homogeneous_energy_kwh))
    else:
        arrivals, departures, energies = _draw_non_homogeneous(config, m, seed, trial, "trial")
    n_ctrl, n_disc = config.counts()
    ctrl_key = substream(seed, "trial", trial, "controllable").random(m)
    disc_key = substream(seed, "trial", trial, "disconnected").random(m)
    tou_key = substream(seed, "trial", trial, "tou").random(m)
    controllable = np.zeros(m, dtype=bool)
    controllable[np.argsort(ctrl_key, kind="stable")[:n_ctrl]] = True
    ctrl_idx = np.flatnonzero(controllable)
    disconnected = np.zeros(m, dtype=bool)
    disconnected[ctrl_idx[np.argsort(disc_key[ctrl_idx], kind="stable")[:n_disc]]] = True
    agents = []
    for i in range(m):
        demand = DemandRequest(int(arrivals[i]), int(departures[i]), float(energies[i]), float(config.rated_kw))
        defer = config.disordered_mode == "tou" and tou_key[i] < config.tou_fraction
        agents.append(
            EvAgent(
                demand=demand,
                controllable=bool(controllable[i]),
                connected=bool(controllable[i] and not disconnected[i]),
                preferred_start=_preferred_start(config, demand, defer),
            )
        )
    residential = scenario_residential(config)
    return Scenario(tuple(agents), residential)


# --- concentrator side: behavior model, baseline, margin ----------------------


def synthetic_history(config: ScenarioConfig, n_records, seed):
    """Disordered-charging records drawn from the non-homogeneous demand law."""
    arrivals, _, energies = _draw_non_homogeneous(config, n_records, seed, 0, "history")
    beta = np.maximum(np.ceil(energies / (config.rated_kw * config.slot_hours) - 1e-9), 1).astype(int)
    return [behavior.ChargingRecord(int(a), int(b), float(e)) for a, b, e in zip(arrivals, beta, energies)]


@functools.lru_cache(maxsize=64)
def _behavior_model_cached(config: ScenarioConfig, per_day):
    seed = derive_seed(config.seed, "history")
    records = synthetic_history(config, config.history_days * per_day, seed)
    result, _ = behavior.fit_selected(records, "BIC", max_k=3, seed=seed)
    return result.model


def uncontrollable_count(config: ScenarioConfig):
    n_ctrl, _ = config.counts()
    return config.ev_total - n_ctrl


def behavior_model(config: ScenarioConfig):
    """Mixture fitted to the area's charging history.

    The history holds ``history_days`` days of the uncontrollable group of
    the nominal fleet (at least 10 sessions a day). An ``ev_count`` override
    does not change it, so fleet-size searches reuse one model.
    """
    per_day = max(10, uncontrollable_count(config.replace(ev_count=None)))
    key = ScenarioConfig(
        slot_minutes=config.slot_minutes,
        rated_kw=config.rated_kw,
        seed=config.seed,
        history_days=config.history_days,
        arrival_mean=config.arrival_mean,
        arrival_std=config.arrival_std,
        departure_mean=config.departure_mean,
        departure_std=config.departure_std,
        energy_mixture=config.energy_mixture,
    )
    return _behavior_model_cached(key, per_day)


def scenario_margin(config: ScenarioConfig) -> CapacityMargin:
    """Day-ahead margin the concentrator broadcasts for ``config``.

    The uncontrollable-EV baseline is sampled by LHS from
    :func:`behavior_model`, one record per uncontrollable EV.
    """
    return _scenario_margin_cached(config.replace(n_s=DEFAULT_NS))


@functools.lru_cache(maxsize=256)
def _scenario_margin_cached(config):
    residential = scenario_residential(config)
    n_unc = uncontrollable_count(config)
    if n_unc == 0:
        ev = LoadProfile(config.slot_minutes, np.zeros(config.horizon))
    else:
        samples = behavior.sample_lhs(
            behavior_model(config), n_unc, seed=derive_seed(config.seed, "baseline"), horizon=config.horizon
        )
        ev = estimate_group_baseline(samples, config.slot_minutes, config.horizon)
    return capacity_margin(total_baseline(residential, ev), config.transformer_kva)


class _Broadcast:
    """Margin and start-distribution cache for one config, built on first use."""

    def __init__(self, config):
        self.config = config
        self._cache = None

    @property
    def margin(self):
        return scenario_margin(self.config)

    @property
    def cache(self):
        if self._cache is None:
            self._cache = StartDistributionCache(charging_probability(self.margin))
        return self._cache


# --- simulation --------------------------------------------------------------


def metrics(profile) -> tuple:
    values = np.asarray(getattr(profile, "values_kw", profile), dtype=float)
    peak = float(values.max())
    return peak, float(peak - values.min())


def _disordered_command(agent: EvAgent, slot_minutes):
    d = agent.demand
    return ChargeCommand(agent.preferred_start, d.duration_slots(slot_minutes), float(d.rated_kw))


def _finish(mode, residential, ledger, transformer_kva, fallbacks):
    ev = LoadProfile(residential.slot_minutes, ledger.values)
    total = LoadProfile(residential.slot_minutes, residential.values_kw + ev.values_kw)
    peak, pvd = metrics(total)
    return SimulationResult(
        mode=mode,
        residential=residential,
        ev_load=ev,
        total_load=total,
        per_ev_commands=ledger.commands,
        per_ev_kw=ledger.rows,
        per_ev_energy_kwh=ledger.energies,
        peak_kw=peak,
        pvd_kw=pvd,
        overloaded=bool(peak > transformer_kva),
        transformer_kva=float(transformer_kva),
        fallbacks=fallbacks,
    )


class _Ledger:
    """Per-EV power rows; the EV load is their column sum."""

    def __init__(self, n_agents, horizon, slot_minutes):
        self.rows = np.zeros((n_agents, horizon))
        self.commands = [None] * n_agents
        self.horizon = horizon
        self.slot_hours = slot_minutes / 60.0

    @property
    def values(self):
        return self.rows.sum(axis=0)

    @property
    def energies(self):
        return self.rows.sum(axis=1) * self.slot_hours

    def add_command(self, i, cmd: ChargeCommand):
        self.rows[i] = cmd.profile(self.horizon)
        self.commands[i] = cmd

    def add_profile(self, i, power):
        self.rows[i] = np.maximum(power, 0.0)


def simulate_disordered(agents: Sequence[EvAgent], residential: LoadProfile, transformer_kva=600.0) -> SimulationResult:
    """Every EV charges at rated power from the driver's chosen start."""
    ledger = _Ledger(len(agents), residential.horizon, residential.slot_minutes)
    for i, agent in enumerate(agents):
        ledger.add_command(i, _disordered_command(agent, residential.slot_minutes))
    return _finish("disordered", residential, ledger, transformer_kva, 0)


def _window_slots(demand: DemandRequest, horizon):
    return (demand.arrival_slot - 1 + np.arange(demand.span_slots(horizon))) % horizon


def valley_fill(demands: Sequence[DemandRequest], base_kw, slot_minutes, tol=CENTRAL_TOL):
    """Per-EV continuous power profiles minimizing ``sum_h (base + ev)^2``.

    Each EV charges in [0, rated] inside its arrival..departure window and
    receives exactly its energy demand. Returns an (n_ev, H) array.
    """
    base = np.asarray(base_kw, dtype=float)
    horizon = base.size
    slot_hours = slot_minutes / 60.0
    out = np.zeros((len(demands), horizon))
    if not demands:
        return out
    windows = [_window_slots(d, horizon) for d in demands]
    groups = np.concatenate(windows)
    owner = np.concatenate([np.full(w.size, i) for i, w in enumerate(windows)])
    n = groups.size
    scale = max(1.0, float(base.max()))
    hess = AggregateHessian(groups, horizon)
    linear = 2.0 * base[groups] / scale
    upper = np.array([demands[i].rated_kw for i in owner]) / scale
    eq = np.zeros((len(demands), n))
    eq[owner, np.arange(n)] = 1.0
    rhs = np.array([d.energy_kwh for d in demands]) / (slot_hours * scale)
    sol = solve_pdipm(QpProblem(hess, linear, upper=upper, eq_matrix=eq, eq_rhs=rhs), tol=tol)
    if not sol.converged:
        raise SolverFailure(f"valley filling did not converge (KKT residual {sol.kkt_residual:.3g})")
    power = np.minimum(sol.x * scale, upper * scale)
    np.add.at(out, (owner, groups), power)
    return out


def _feasible_for_central(demand: DemandRequest, horizon, slot_minutes):
    capacity = demand.span_slots(horizon) * demand.rated_kw * slot_minutes / 60.0
    return demand.energy_kwh <= capacity * (1 - 1e-9)


def _central_dispatch(ledger, agents, indices, residential_kw, slot_minutes):
    """Valley-fill the EVs at ``indices`` on top of everything already in
    ``ledger``; EVs whose demand cannot fit their window charge disordered.
    Returns the number of such fallbacks."""
    horizon = residential_kw.size
    chosen, fallback = [], 0
    for i in indices:
        if _feasible_for_central(agents[i].demand, horizon, slot_minutes):
            chosen.append(i)
        else:
            ledger.add_command(i, _disordered_command(agents[i], slot_minutes))
            fallback += 1
    base = residential_kw + ledger.values
    powers = valley_fill([agents[i].demand for i in chosen], base, slot_minutes)
    for row, i in zip(powers, chosen):
        ledger.add_profile(i, row)
    return fallback


def simulate_centralized(agents: Sequence[EvAgent], residential: LoadProfile, transformer_kva=600.0) -> SimulationResult:
    """Uncontrollable EVs charge disordered; every controllable EV is dispatched
    by the concentrator's valley-filling optimization."""
    ledger = _Ledger(len(agents), residential.horizon, residential.slot_minutes)
    ctrl = []
    for i, agent in enumerate(agents):
        if agent.controllable:
            ctrl.append(i)
        else:
            ledger.add_command(i, _disordered_command(agent, residential.slot_minutes))
    fallbacks = _central_dispatch(ledger, agents, ctrl, residential.values_kw, residential.slot_minutes)
    return _finish("centralized", residential, ledger, transformer_kva, fallbacks)


def simulate_distributed(
    agents: Sequence[EvAgent],
    residential: LoadProfile,
    margin: CapacityMargin,
    n_s=DEFAULT_NS,
    seed=0,
    cache: StartDistributionCache | None = None,
) -> SimulationResult:
    """Communication-failure operation.

    Uncontrollable EVs charge disordered. Disconnected B-type EVs each
    sample a command from the broadcast margin (independent stream per
    EV). EVs still connected are then valley-filled by the concentrator on
    top of everything else.
    """
    slot_minutes = residential.slot_minutes
    if cache is None:
        cache = StartDistributionCache(charging_probability(margin))
    ledger = _Ledger(len(agents), residential.horizon, slot_minutes)
    connected, fallbacks = [], 0
    for i, agent in enumerate(agents):
        if not agent.controllable:
            ledger.add_command(i, _disordered_command(agent, slot_minutes))
        elif agent.connected:
            connected.append(i)
        else:
            try:
                cmd = plan_command(agent.demand, cache.probability, n_s, substream(seed, "ev", i), slot_minutes, cache)
            except InfeasibleDemand as exc:
                log.debug("EV %d falls back to disordered charging: %s", i, exc)
                cmd = _disordered_command(agent, slot_minutes)
                fallbacks += 1
            ledger.add_command(i, cmd)
    if connected:
        fallbacks += _central_dispatch(ledger, agents, connected, residential.values_kw, slot_minutes)
    return _finish("distributed", residential, ledger, margin.transformer_kva, fallbacks)


# --- trials ------------------------------------------------------------------


def run_trial(config: ScenarioConfig, trial, modes=MODES, broadcast=None):
    """Run ``modes`` on trial ``trial`` of ``config``; returns {mode: result}."""
    agents, residential = generate_scenario(config, trial)
    out = {}
    for mode in modes:
        if mode == "disordered":
            out[mode] = simulate_disordered(agents, residential, config.transformer_kva)
        elif mode == "centralized":
            out[mode] = simulate_centralized(agents, residential, config.transformer_kva)
        elif mode == "distributed":
            if broadcast is None:
                broadcast = _Broadcast(config)
            if any(a.runs_locally for a in agents):
                margin, cache = broadcast.margin, broadcast.cache
            else:
                # nobody plans locally, so the broadcast is never read
                margin = CapacityMargin(config.slot_minutes, np.zeros(config.horizon), config.transformer_kva)
                cache = None
            seed = derive_seed(config.seed, "trial", trial, "decide")
            out[mode] = simulate_distributed(agents, residential, margin, config.n_s, seed, cache)
        else:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return out


def run_trials(config: ScenarioConfig, n_trials, modes=MODES, keep=1):
    """Trial rows in trial order, plus full results for the first ``keep`` trials."""
    rows, kept = [], []
    broadcast = _Broadcast(config)
    for t in range(n_trials):
        res = run_trial(config, t, modes, broadcast)
        for mode in modes:
            r = res[mode]
            rows.append({"trial": t, "seed": config.seed, "mode": mode, "peak_kw": r.peak_kw,
                         "pvd_kw": r.pvd_kw, "overloaded": r.overloaded, "fallbacks": r.fallbacks})
        if t < keep:
            kept.append(res)
    return rows, kept


def summarize(rows, modes=MODES):
    """Mean peak / PVD per mode and their change relative to disordered."""
    out = {}
    for mode in modes:
        sel = [r for r in rows if r["mode"] == mode]
        if not sel:
            continue
        out[mode] = {
            "trials": len(sel),
            "peak_kw": float(np.mean([r["peak_kw"] for r in sel])),
            "pvd_kw": float(np.mean([r["pvd_kw"] for r in sel])),
            "overload_ratio": float(np.mean([r["overloaded"] for r in sel])),
        }
    ref = out.get("disordered")
    for mode, s in out.items():
        if ref is None or mode == "disordered":
            s["delta_peak_pct"] = None
            s["delta_pvd_pct"] = None
        else:
            s["delta_peak_pct"] = 100.0 * (s["peak_kw"] - ref["peak_kw"]) / ref["peak_kw"]
            s["delta_pvd_pct"] = 100.0 * (s["pvd_kw"] - ref["pvd_kw"]) / ref["pvd_kw"] if ref["pvd_kw"] else 0.0
    return out


def overload_ratio(config: ScenarioConfig, n_trials, seed=None, stop_after=None) -> float:
    """Fraction of distributed-control trials whose peak exceeds the transformer.

    ``stop_after`` ends early once that many overloads are seen (the
    returned ratio is then a lower bound over the trials run so far).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if seed is not None:
        config = config.replace(seed=int(seed))
    broadcast = _Broadcast(config)
    overloads = 0
    for t in range(n_trials):
        res = run_trial(config, t, ("distributed",), broadcast)["distributed"]
        overloads += res.overloaded
        if stop_after is not None and overloads >= stop_after:
            return overloads / n_trials
    return overloads / n_trials


@dataclass(frozen=True)
class MacResult:
    value: int
    at_cap: bool
    cap: int
    evaluations: dict = field(default_factory=dict)

    def __int__(self):
        return self.value


def max_acceptable_capacity(config: ScenarioConfig, overload_tolerance=0.0, seed=None, n_trials=200, cap=None) -> MacResult:
    """Largest EV count whose estimated overload probability is within tolerance.

    Bisection over the fleet size, assuming overload probability grows with
    it. Trials reuse the same per-EV draws across fleet sizes.
    """
    if not 0.0 <= overload_tolerance < 1.0:
        raise ValueError("overload_tolerance must lie in [0, 1)")
    if seed is not None:
        config = config.replace(seed=int(seed))
    cap = 10 * config.user_count if cap is None else int(cap)
    allowed = int(math.floor(overload_tolerance * n_trials + 1e-9))
    evaluations = {}

    def acceptable(m):
        if m not in evaluations:
            ratio = overload_ratio(config.replace(ev_count=m), n_trials, stop_after=allowed + 1)
            evaluations[m] = ratio
        return evaluations[m] * n_trials <= allowed + 1e-9

    if not acceptable(0):
        return MacResult(0, False, cap, evaluations)
    if acceptable(cap):
        return MacResult(cap, True, cap, evaluations)
    lo, hi = 0, cap
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if acceptable(mid):
            lo = mid
        else:
            hi = mid
    return MacResult(lo, False, cap, evaluations)


def coerce_param(name, text):
    """Parse a sweep value for the ScenarioConfig field ``name``."""
    fields = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    if name not in fields or name in ("energy_mixture", "seed"):
        raise ValueError(f"cannot sweep {name!r}")
    default = fields[name].default
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int) or name == "ev_count":
        return int(text)
    if isinstance(default, float) or name == "residential_rate":
        return float(text)
    return str(text)


def sweep(config: ScenarioConfig, param, values, n_trials, modes=MODES, mac=False, mac_trials=200, tolerance=0.0):
    """One summary row per (value, mode); MAC columns are added when ``mac``."""
    rows = []
    for value in values:
        cfg = config.replace(**{param: value})
        trial_rows, _ = run_trials(cfg, n_trials, modes, keep=0)
        summary = summarize(trial_rows, modes)
        extra = {}
        if mac:
            res = max_acceptable_capacity(cfg, tolerance, n_trials=mac_trials)
            extra = {"mac": res.value, "mac_at_cap": res.at_cap}
        for mode in modes:
            rows.append({"param": param, "value": value, "mode": mode, **summary[mode], **extra})
    return rows
