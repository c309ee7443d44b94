"""Day-ahead baseline load and capacity margin.

Slots are 1-based in every public signature; arrays are 0-based.
Sessions that run past the last slot wrap into the start of the day.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .behavior import ChargingRecord
from .errors import BadX, DurationExceedsHorizon, InvalidRecord, MixedResolution, ParseError

log = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440


def slots_per_day(slot_minutes):
    if slot_minutes <= 0 or MINUTES_PER_DAY % slot_minutes:
        raise ValueError(f"slot_minutes must divide {MINUTES_PER_DAY}, got {slot_minutes}")
    return MINUTES_PER_DAY // slot_minutes


def _frozen(values):
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LoadProfile:
    """Per-slot power in kW.

    A full day has ``1440 / slot_minutes`` slots; shorter horizons are
    accepted so toy cases can be built, see :attr:`is_full_day`.
    """

    slot_minutes: int
    values_kw: np.ndarray

    def __post_init__(self):
        slots_per_day(self.slot_minutes)
        arr = _frozen(self.values_kw)
        if arr.size == 0:
            raise ValueError("a profile needs at least one slot")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("profile values must be finite and non-negative")
        object.__setattr__(self, "values_kw", arr)

    @property
    def horizon(self):
        return self.values_kw.shape[0]

    @property
    def is_full_day(self):
        return self.horizon == slots_per_day(self.slot_minutes)

    @property
    def slot_hours(self):
        return self.slot_minutes / 60.0

    def energy_kwh(self):
        return float(self.values_kw.sum() * self.slot_hours)

    def __add__(self, other):
        return total_baseline(self, other)

    def __eq__(self, other):
        if not isinstance(other, LoadProfile):
            return NotImplemented
        return self.slot_minutes == other.slot_minutes and np.array_equal(self.values_kw, other.values_kw)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CapacityMargin:
    slot_minutes: int
    zeta_kw: np.ndarray
    transformer_kva: float
    clamped_slots: tuple = ()

    def __post_init__(self):
        arr = _frozen(self.zeta_kw)
        if np.any(arr < 0) or np.any(arr > self.transformer_kva):
            raise ValueError("margin must lie in [0, transformer_kva]")
        object.__setattr__(self, "zeta_kw", arr)

    @property
    def horizon(self):
        return self.zeta_kw.shape[0]


def session_slots(start_slot, duration_slots, horizon):
    """0-based indices of the slots covered by a session (wrapping)."""
    return (start_slot - 1 + np.arange(duration_slots)) % horizon


def ev_profile_from_record(record: ChargingRecord, slot_minutes=15, horizon_h=None) -> LoadProfile:
    """Constant-power profile that delivers ``record.energy_kwh`` over its slots."""
    horizon = slots_per_day(slot_minutes) if horizon_h is None else int(horizon_h)
    if record.duration_slots > horizon:
        raise DurationExceedsHorizon(
            f"duration {record.duration_slots} slots exceeds the {horizon}-slot horizon"
        )
    if record.start_slot > horizon:
        raise InvalidRecord(f"start slot {record.start_slot} outside 1..{horizon}")
    values = np.zeros(horizon)
    power = record.energy_kwh / (record.duration_slots * slot_minutes / 60.0)
    values[session_slots(record.start_slot, record.duration_slots, horizon)] = power
    return LoadProfile(slot_minutes, values)


def estimate_group_baseline(samples: Sequence[ChargingRecord], slot_minutes=15, horizon_h=None) -> LoadProfile:
    horizon = slots_per_day(slot_minutes) if horizon_h is None else int(horizon_h)
    total = np.zeros(horizon)
    for rec in samples:
        total += ev_profile_from_record(rec, slot_minutes, horizon).values_kw
    return LoadProfile(slot_minutes, total)


def _check_same_grid(profiles):
    first = profiles[0]
    for p in profiles[1:]:
        if p.slot_minutes != first.slot_minutes or p.horizon != first.horizon:
            raise MixedResolution(
                f"profiles disagree: {first.slot_minutes} min x {first.horizon} "
                f"vs {p.slot_minutes} min x {p.horizon}"
            )


def high_x_of_y(daily_profiles: Sequence[LoadProfile], x: int) -> LoadProfile:
    """Average of the ``x`` days with the largest daily energy.

    Ties are broken in favour of the earlier day.
    """
    profiles = list(daily_profiles)
    if not 1 <= x <= len(profiles):
        raise BadX(f"x must be in [1, {len(profiles)}], got {x}")
    _check_same_grid(profiles)
    totals = np.array([p.values_kw.sum() for p in profiles])
    order = np.argsort(-totals, kind="stable")[:x]
    stacked = np.stack([profiles[i].values_kw for i in order])
    return LoadProfile(profiles[0].slot_minutes, stacked.mean(axis=0))


def total_baseline(residential: LoadProfile, ev_group: LoadProfile) -> LoadProfile:
    _check_same_grid([residential, ev_group])
    return LoadProfile(residential.slot_minutes, residential.values_kw + ev_group.values_kw)


def capacity_margin(baseline: LoadProfile, transformer_kva: float) -> CapacityMargin:
    """Headroom ``C1 - baseline`` per slot, clamped at zero."""
    if not transformer_kva > 0:
        raise ValueError(f"transformer_kva must be positive, got {transformer_kva}")
    raw = transformer_kva - baseline.values_kw
    clamped = tuple(int(i) + 1 for i in np.flatnonzero(raw < 0))
    if clamped:
        log.warning(
            "baseline exceeds transformer capacity %.1f kVA in %d slot(s); margin clamped to 0",
            transformer_kva,
            len(clamped),
        )
    return CapacityMargin(baseline.slot_minutes, np.maximum(raw, 0.0), float(transformer_kva), clamped)


# --- CSV I/O -----------------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def write_profile_csv(path, profile: LoadProfile):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "kw"])
        for i, v in enumerate(profile.values_kw, start=1):
            w.writerow([i, _fmt(v)])


def write_margin_csv(path, margin: CapacityMargin):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "zeta_kw"])
        for i, v in enumerate(margin.zeta_kw, start=1):
            w.writerow([i, _fmt(v)])


def _read_slot_series(path, value_col, extra_cols=()):
    """Rows of ``slot,<value_col>`` (optionally keyed by ``day``)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = [f.strip() for f in (reader.fieldnames or [])]
        if "slot" not in fields or value_col not in fields:
            raise ParseError(f"expected columns slot,{value_col}", path, 1)
        reader.fieldnames = fields
        rows = []
        for row in reader:
            line = reader.line_num
            try:
                day = int(row["day"]) if "day" in fields else 0
                rows.append((day, int(row["slot"]), float(row[value_col])))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad value: {exc}", path, line) from None
    if not rows:
        raise ParseError("no data rows", path)
    return rows


def _series_to_days(path, rows, slot_minutes):
    horizon = slots_per_day(slot_minutes)
    days = {}
    for day, slot, value in rows:
        days.setdefault(day, {})[slot] = value
    out = []
    for day in sorted(days):
        slots = days[day]
        if sorted(slots) != list(range(1, horizon + 1)):
            raise MixedResolution(
                f"{path}: day {day} has {len(slots)} slots; expected slots 1..{horizon} "
                f"for {slot_minutes}-minute resolution"
            )
        out.append(np.array([slots[s] for s in range(1, horizon + 1)]))
    return out


def read_profile_csv(path, slot_minutes=15) -> LoadProfile:
    days = read_daily_profiles_csv(path, slot_minutes)
    if len(days) != 1:
        raise ParseError(f"expected a single day, found {len(days)}", path)
    return days[0]


def read_daily_profiles_csv(path, slot_minutes=15):
    """One or more days of ``[day,]slot,kw`` rows."""
    rows = _read_slot_series(path, "kw")
    return [LoadProfile(slot_minutes, v) for v in _series_to_days(path, rows, slot_minutes)]


def read_margin_csv(path, transformer_kva, slot_minutes=15) -> CapacityMargin:
    rows = _read_slot_series(path, "zeta_kw")
    (values,) = _series_to_days(path, rows, slot_minutes)
    return CapacityMargin(slot_minutes, values, float(transformer_kva))
