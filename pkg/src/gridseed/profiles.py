"""Daily load/PV scaling profiles, forecasts and the seasonal year schedule."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid_model import COMMERCIAL, RESIDENTIAL, Network

SEASONS = ("winter", "spring", "summer", "autumn")
WORST = "worst"
TYPICAL = "typical"
N_STEPS = 24

# clear-sky summer peak as a fraction of nameplate; per-season peak relative to
# summer, and day half-length in hours around solar noon
PV_PEAK = 0.8
PV_SEASON_FACTOR = {"summer": 1.0, "spring": 0.95, "autumn": 0.7, "winter": 0.45}
PV_HALF_DAY = {"summer": 8.0, "spring": 7.0, "autumn": 6.0, "winter": 5.0}
SOLAR_NOON = 13
TYPICAL_PV_RATIO = 0.6
LOAD_SEASON_FACTOR = {"winter": 1.0, "autumn": 0.92, "spring": 0.88, "summer": 0.82}
# commercial peak per season (cooling load peaks in summer); typical days
# carry a lower commercial peak than the worst days
COM_SEASON_FACTOR = {"winter": 0.6, "autumn": 0.6, "spring": 0.65, "summer": 1.0}
TYPICAL_COM_RATIO = 0.7

CSV_HEADER = ("hour", "load_res", "load_com", "pv_avail")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class DayProfile:
    load_res: np.ndarray
    load_com: np.ndarray
    pv_avail: np.ndarray

    def __post_init__(self):
        arrays = []
        for name in ("load_res", "load_com", "pv_avail"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            if a.ndim != 1:
                raise ProfileError(f"{name} must be one-dimensional")
            if np.any(a < 0) or np.any(a > 1):
                raise ProfileError(f"{name} has factors outside [0, 1]")
            object.__setattr__(self, name, a)
            arrays.append(a)
        if len({len(a) for a in arrays}) != 1:
            raise ProfileError("profile series have different lengths")

    @property
    def n_steps(self) -> int:
        return len(self.pv_avail)

    def factor(self, profile_class: str) -> np.ndarray:
        if profile_class == RESIDENTIAL:
            return self.load_res
        if profile_class == COMMERCIAL:
            return self.load_com
        raise ProfileError(f"unknown load profile class {profile_class!r}")

    @classmethod
    def zeros(cls, n_steps: int = N_STEPS) -> DayProfile:
        z = np.zeros(n_steps)
        return cls(z, z, z)


@dataclass(frozen=True)
class SeasonPlan:
    season: str
    worst_day: DayProfile
    typical_day: DayProfile
    n_worst: int = 10
    n_typical: int = 80


@dataclass(frozen=True)
class DayAssignment:
    day: int
    season: str
    kind: str


@dataclass(frozen=True)
class StepForecast:
    """Forecast for a single timestep, arrays indexed by bus position / DG order."""

    p_load: np.ndarray
    q_load: np.ndarray
    p_avail: np.ndarray


@dataclass(frozen=True)
class Forecast:
    p_load: np.ndarray  # (n_steps, n_bus)
    q_load: np.ndarray  # (n_steps, n_bus)
    p_avail: np.ndarray  # (n_steps, n_dg)

    @property
    def n_steps(self) -> int:
        return self.p_load.shape[0]

    def step(self, t: int) -> StepForecast:
        return StepForecast(self.p_load[t], self.q_load[t], self.p_avail[t])

    def __iter__(self):
        return (self.step(t) for t in range(self.n_steps))


def load_profiles(path, n_steps: int = N_STEPS) -> list[DayProfile]:
    """Read one or more consecutive days from a ``hour,load_res,load_com,pv_avail`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ProfileError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ProfileError(f"{path}: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        rows = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ProfileError(f"{path}: row {row_no} has {len(row)} columns, expected 4")
            try:
                values = [float(c) for c in row[1:]]
            except ValueError:
                raise ProfileError(f"{path}: row {row_no} has a non-numeric factor") from None
            for name, val in zip(CSV_HEADER[1:], values):
                if not 0.0 <= val <= 1.0:
                    raise ProfileError(f"{path}: row {row_no} {name}={val} outside [0, 1]")
            rows.append(values)
    if not rows or len(rows) % n_steps:
        raise ProfileError(f"{path}: {len(rows)} data rows, expected a multiple of {n_steps}")
    data = np.array(rows)
    return [DayProfile(*data[k:k + n_steps].T) for k in range(0, len(rows), n_steps)]


def save_profiles(path, days: Iterable[DayProfile]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for day in days:
            for h in range(day.n_steps):
                w.writerow([h, repr(float(day.load_res[h])), repr(float(day.load_com[h])),
                            repr(float(day.pv_avail[h]))])


def _clear_sky(season: str, hours: np.ndarray) -> np.ndarray:
    half = PV_HALF_DAY[season]
    x = (hours - SOLAR_NOON) / half
    # exactly zero outside daylight (cos(pi/2) is not)
    shape = np.where(np.abs(x) < 1.0, np.cos(0.5 * math.pi * np.clip(x, -1.0, 1.0)) ** 1.5, 0.0)
    return PV_PEAK * PV_SEASON_FACTOR[season] * shape


def _residential(hours: np.ndarray) -> np.ndarray:
    morning = 0.30 * np.exp(-0.5 * ((hours - 8.0) / 1.5) ** 2)
    evening = 0.62 * np.exp(-0.5 * ((hours - 19.5) / 2.0) ** 2)
    midday = 0.12 * np.exp(-0.5 * ((hours - 13.0) / 2.5) ** 2)
    return 0.33 + morning + midday + evening


def _commercial(hours: np.ndarray) -> np.ndarray:
    # flat-topped bump centred on solar noon
    x = (hours - SOLAR_NOON) / 3.2
    return 0.22 + 0.78 * np.exp(-(x**4))


def synth_profiles(season: str, kind: str, seed: int = 0, n_steps: int = N_STEPS) -> DayProfile:
    """Synthetic hourly profile for a season's worst (clear-sky) or typical day.

    Load noise is the only random element, so identical arguments always
    give identical profiles.
    """
    if season not in SEASONS:
        raise ProfileError(f"unknown season {season!r}")
    if kind not in (WORST, TYPICAL):
        raise ProfileError(f"unknown day kind {kind!r}")
    hours = np.arange(n_steps) * (24.0 / n_steps)
    pv = _clear_sky(season, hours)
    if kind == TYPICAL:
        pv = TYPICAL_PV_RATIO * pv
    key = [seed, SEASONS.index(season), 0 if kind == WORST else 1]
    rng = np.random.default_rng(key)
    scale = LOAD_SEASON_FACTOR[season]
    res = scale * _residential(hours) * (1.0 + 0.03 * rng.uniform(-1.0, 1.0, n_steps))
    com_scale = COM_SEASON_FACTOR[season] * (TYPICAL_COM_RATIO if kind == TYPICAL else 1.0)
    com = com_scale * _commercial(hours) * (1.0 + 0.03 * rng.uniform(-1.0, 1.0, n_steps))
    return DayProfile(np.clip(res, 0.0, 1.0), np.clip(com, 0.0, 1.0), np.clip(pv, 0.0, 1.0))


def default_plans(seed: int = 0, n_steps: int = N_STEPS) -> list[SeasonPlan]:
    return [SeasonPlan(s, synth_profiles(s, WORST, seed, n_steps), synth_profiles(s, TYPICAL, seed, n_steps))
            for s in SEASONS]


def make_forecast(net: Network, day: DayProfile) -> Forecast:
    n_t = day.n_steps
    p_load = np.zeros((n_t, net.n_bus))
    q_load = np.zeros((n_t, net.n_bus))
    for load in net.loads:
        k = net.index[load.bus]
        p = load.s_nom * load.power_factor * day.factor(load.profile_class)
        p_load[:, k] += p
        q_load[:, k] += p * math.tan(math.acos(load.power_factor))
    p_avail = np.outer(day.pv_avail, [g.p_max for g in net.dgs]).reshape(n_t, len(net.dgs))
    return Forecast(p_load, q_load, p_avail)


def expand_year(plans: Sequence[SeasonPlan]) -> list[DayAssignment]:
    """Day-by-day schedule: seasons in calendar order, worst days first within each."""
    by_season = {p.season: p for p in plans}
    if len(plans) != 4 or set(by_season) != set(SEASONS):
        raise ProfileError("expand_year needs exactly one plan for each of the four seasons")
    out: list[DayAssignment] = []
    for season in SEASONS:
        plan = by_season[season]
        for kind, count in ((WORST, plan.n_worst), (TYPICAL, plan.n_typical)):
            first = len(out)
            out.extend(DayAssignment(first + i, season, kind) for i in range(count))
    return out


def plan_day(plans: Sequence[SeasonPlan], season: str, kind: str) -> DayProfile:
    for p in plans:
        if p.season == season:
            return p.worst_day if kind == WORST else p.typical_day
    raise ProfileError(f"no plan for season {season!r}")
