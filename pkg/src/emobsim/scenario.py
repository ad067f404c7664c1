"""Synthetic cities and ground-truth spatio-temporal demand fields."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from . import STEPS_PER_DAY
from .domain import CandidatePool, DemandEvent, PriceField, Station, ValidationError

WEEKDAY, WEEKEND = 0, 1
HOURS_PER_DAY = 24
STEPS_PER_HOUR = STEPS_PER_DAY // HOURS_PER_DAY


@dataclass(frozen=True)
class Constants:
    per_minute_rate: float = 0.5
    speed_kmh: float = 30.0
    detour_factor: float = 1.3
    kappa_cost: float = 1.8
    full_range_km: float = 80.0
    # steps to charge from empty to 80 % at the fast rate
    fast_charge_steps: int = 16
    reposition_radius_km: float = 3.0
    poi_radius_km: float = 1.0
    alloc_low: float = 0.5
    alloc_high: float = 0.7

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValidationError(f"constant {f.name} must be > 0")

    @property
    def fast_rate_km(self) -> float:
        return 0.8 * self.full_range_km / self.fast_charge_steps


@dataclass
class ScenarioConfig:
    city_km: float = 20.0
    n_stations: int = 200
    region_size: int = 20
    n_pois: int = 400
    episode_days: int = 14
    n_hotspots: int = 6
    daily_demand: float = 3000.0
    base_demand_share: float = 0.03
    weekend_factor: float = 0.8
    clustered_share: float = 0.7
    poi_clustered_share: float = 0.7
    price_center_amp: float = 0.8
    min_docks: int = 6
    max_docks: int = 20
    initial_fraction: float = 0.5
    # S_0 is drawn with probability proportional to daily demand ** initial_bias
    initial_bias: float = 1.0
    od_decay_km: float = 2.5
    constants: Constants = field(default_factory=Constants)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        consts = Constants(**d.pop("constants", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(constants=consts, **d)

    def to_dict(self) -> dict:
        return asdict(self)


def _gauss_profile(peaks: list[tuple[float, float, float]], floor: float) -> np.ndarray:
    """Time-of-day profile over 144 steps from (hour, width_h, weight) peaks; sums to 1."""
    hours = (np.arange(STEPS_PER_DAY) + 0.5) / STEPS_PER_HOUR
    p = np.full(STEPS_PER_DAY, floor)
    for h, w, a in peaks:
        p += a * np.exp(-0.5 * ((hours - h) / w) ** 2)
    return p / p.sum()


# (weekday, weekend) profiles by bump kind
PROFILES = {
    "residential": (
        _gauss_profile([(8.0, 1.2, 1.0), (18.5, 1.8, 0.35), (13.0, 3.0, 0.15)], 0.02),
        _gauss_profile([(11.0, 2.5, 0.6), (16.0, 3.0, 0.5)], 0.05),
    ),
    "business": (
        _gauss_profile([(18.0, 1.5, 1.0), (8.5, 1.2, 0.3), (12.5, 1.0, 0.3)], 0.02),
        _gauss_profile([(14.0, 3.0, 1.0)], 0.05),
    ),
    "base": (
        _gauss_profile([(8.0, 1.5, 0.5), (18.0, 1.5, 0.5), (13.0, 3.0, 0.4)], 0.1),
        _gauss_profile([(13.0, 4.0, 1.0)], 0.1),
    ),
}


def _od_time_weights(kind: str, daytype: int, hour: int) -> float:
    """How strongly a hotspot of ``kind`` attracts trips in a given hour."""
    if daytype == WEEKEND:
        return 1.0
    if 6 <= hour < 11:
        return 2.0 if kind == "business" else 0.5
    if 16 <= hour < 21:
        return 2.0 if kind == "residential" else 0.5
    return 1.0


@dataclass(frozen=True, eq=False)
class DemandField:
    """Ground-truth origin intensity and time-dependent OD kernel.

    The intensity is a daily rate at every point spread over the 144 steps
    of a day by per-kind time-of-day profiles.
    """

    bumps: tuple[dict, ...]
    base_rate: float
    weekend_factor: float
    od_decay_km: float
    od_base: float
    scale: float = 1.0

    def daily_rate(self, points, daytype: int = WEEKDAY) -> np.ndarray:
        return self.per_step_rate(points, daytype).sum(axis=0)

    def per_step_rate(self, points, daytype: int) -> np.ndarray:
        """Expected count per step, shape (144, n_points)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.outer(PROFILES["base"][daytype], np.full(len(pts), self.base_rate))
        for b in self.bumps:
            g = b["amp"] * np.exp(-((pts - np.asarray(b["center"])) ** 2).sum(1) / (2 * b["sigma"] ** 2))
            out += np.outer(PROFILES[b["kind"]][daytype], g)
        if daytype == WEEKEND:
            out *= self.weekend_factor
        return out * self.scale

    def origin_intensity(self, step: int, daytype: int, points) -> np.ndarray:
        return self.per_step_rate(points, daytype)[step % STEPS_PER_DAY]

    def attraction(self, points, daytype: int, hour: int) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        a = np.full(len(pts), self.od_base)
        for b in self.bumps:
            g = np.exp(-((pts - np.asarray(b["center"])) ** 2).sum(1) / (2 * b["sigma"] ** 2))
            a += _od_time_weights(b["kind"], daytype, hour) * b["amp"] * g
        return a

    def od_matrix(self, locs: np.ndarray, daytype: int, hour: int) -> np.ndarray:
        """Row-stochastic destination distribution for every origin station."""
        d = np.sqrt(((locs[:, None, :] - locs[None, :, :]) ** 2).sum(-1))
        w = self.attraction(locs, daytype, hour)[None, :] * np.exp(-d / self.od_decay_km)
        np.fill_diagonal(w, 0.0)
        return w / w.sum(axis=1, keepdims=True)

    def to_json(self) -> dict:
        return {
            "bumps": [dict(b) for b in self.bumps],
            "base_rate": self.base_rate,
            "weekend_factor": self.weekend_factor,
            "od_decay_km": self.od_decay_km,
            "od_base": self.od_base,
            "scale": self.scale,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DemandField":
        bumps = tuple(
            {"center": [float(v) for v in b["center"]], "amp": float(b["amp"]),
             "sigma": float(b["sigma"]), "kind": str(b["kind"])}
            for b in d["bumps"]
        )
        return cls(bumps, float(d["base_rate"]), float(d["weekend_factor"]),
                   float(d["od_decay_km"]), float(d["od_base"]), float(d.get("scale", 1.0)))


def daytype_of(day: int) -> int:
    """Days are 1-based and day 1 is a Monday; day 0 (warm-up) is a Sunday."""
    return WEEKEND if (day - 1) % 7 in (5, 6) else WEEKDAY


@dataclass(frozen=True, eq=False)
class Scenario:
    pool: CandidatePool
    demand_field: DemandField
    episode_days: int
    rng_seed: int
    constants: Constants
    initial_active: frozenset[int]
    config: dict
    price_field: PriceField

    def __post_init__(self):
        if self.episode_days < 1:
            raise ValidationError("episode_days must be >= 1")

    @property
    def n(self) -> int:
        return len(self.pool)

    @cached_property
    def dist_km(self) -> np.ndarray:
        locs = self.pool.locs
        d = np.sqrt(((locs[:, None, :] - locs[None, :, :]) ** 2).sum(-1))
        d.setflags(write=False)
        return d

    @cached_property
    def rates(self) -> np.ndarray:
        """Expected demand per (daytype, step, station)."""
        r = np.stack([self.demand_field.per_step_rate(self.pool.locs, dt) for dt in (WEEKDAY, WEEKEND)])
        r.setflags(write=False)
        return r

    @cached_property
    def od_cdf(self) -> np.ndarray:
        """Cumulative OD rows per (daytype, hour), offset by the row index for vectorized search."""
        n = self.n
        out = np.empty((2, HOURS_PER_DAY, n * n))
        for dt in (WEEKDAY, WEEKEND):
            for h in range(HOURS_PER_DAY):
                p = self.demand_field.od_matrix(self.pool.locs, dt, h)
                c = np.cumsum(p, axis=1)
                c[:, -1] = 1.0
                out[dt, h] = (c + np.arange(n)[:, None]).ravel()
        out.setflags(write=False)
        return out

    def od_kernel(self, origin: int, step: int, daytype: int = WEEKDAY) -> np.ndarray:
        return self.demand_field.od_matrix(self.pool.locs, daytype, (step % STEPS_PER_DAY) // STEPS_PER_HOUR)[origin]

    @cached_property
    def poi_cover(self) -> np.ndarray:
        """Boolean (n_stations, n_pois): POI within the coverage radius of the station."""
        pois = self.pool.pois
        if len(pois) == 0:
            return np.zeros((self.n, 0), dtype=bool)
        d = np.sqrt(((self.pool.locs[:, None, :] - pois[None, :, :]) ** 2).sum(-1))
        m = d <= self.constants.poi_radius_km
        m.setflags(write=False)
        return m

    @cached_property
    def trip_km(self) -> np.ndarray:
        return self.dist_km * self.constants.detour_factor

    @cached_property
    def trip_steps(self) -> np.ndarray:
        from .domain import trip_steps

        sp = self.constants.speed_kmh
        m = np.array([[trip_steps(km, sp) if km > 0 else 0 for km in row] for row in self.trip_km], dtype=np.int64)
        m.setflags(write=False)
        return m

    @cached_property
    def price_milli(self) -> np.ndarray:
        from .domain import to_milli

        m = self.trip_steps * to_milli(self.constants.per_minute_rate * 10.0)
        m.setflags(write=False)
        return m

    @cached_property
    def expected_price(self) -> np.ndarray:
        """Average price of a trip starting at each station under the daily OD mix."""
        n = self.n
        price = self.price_milli / 1000.0
        acc = np.zeros(n)
        tot = np.zeros(n)
        rates = self.rates[WEEKDAY]
        for h in range(HOURS_PER_DAY):
            p = self.demand_field.od_matrix(self.pool.locs, WEEKDAY, h)
            wgt = rates[h * STEPS_PER_HOUR:(h + 1) * STEPS_PER_HOUR].sum(0)
            acc += wgt * (p * price).sum(1)
            tot += wgt
        return acc / np.maximum(tot, 1e-12)

    # serialization -----------------------------------------------------------------
    def to_json(self) -> dict:
        c = self.constants
        grid_n = 21
        w, h = self.pool.bounds
        xs = np.linspace(0, w, grid_n)
        ys = np.linspace(0, h, grid_n)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        grid = self.price_field(np.column_stack([gx.ravel(), gy.ravel()])).reshape(grid_n, grid_n)
        return {
            "seed": int(self.rng_seed),
            "episode_days": self.episode_days,
            "bounds": list(self.pool.bounds),
            "constants": asdict(c),
            "config": self.config,
            "stations": [
                {"id": s.id, "loc": list(s.loc), "docks": s.docks, "daily_cost": s.daily_cost}
                for s in self.pool.stations
            ],
            "pois": self.pool.pois.tolist(),
            "price_field": self.price_field.to_json(),
            "price_grid": {"xs": xs.tolist(), "ys": ys.tolist(), "values": grid.tolist()},
            "intensity_spec": self.demand_field.to_json(),
            "od_spec": {
                "decay_km": self.demand_field.od_decay_km,
                "base_attraction": self.demand_field.od_base,
                "hotspot_time_weights": "business x2 06-11h, residential x2 16-21h, x0.5 otherwise",
            },
            "initial_active": sorted(self.initial_active),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        consts = Constants(**d["constants"])
        pf = PriceField.from_json(d["price_field"])
        stations = tuple(
            Station(int(s["id"]), (float(s["loc"][0]), float(s["loc"][1])), int(s["docks"]), float(s["daily_cost"]))
            for s in d["stations"]
        )
        pool = CandidatePool(stations, np.asarray(d["pois"], dtype=float).reshape(-1, 2), pf,
                             tuple(float(b) for b in d["bounds"]))
        return cls(pool, DemandField.from_json(d["intensity_spec"]), int(d["episode_days"]),
                   int(d["seed"]), consts, frozenset(d["initial_active"]), d.get("config", {}), pf)

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_json(json.loads(Path(path).read_text()))

    def with_(self, **changes) -> "Scenario":
        """Copy with some fields replaced (cached arrays are recomputed lazily)."""
        kw = {f: getattr(self, f) for f in ("pool", "demand_field", "episode_days", "rng_seed",
                                            "constants", "initial_active", "config", "price_field")}
        kw.update(changes)
        return Scenario(**kw)


def generate_scenario(config: ScenarioConfig | dict, seed: int) -> Scenario:
    """Build a clustered synthetic city; deterministic in (config, seed)."""
    if isinstance(config, dict):
        config = ScenarioConfig.from_dict(config)
    cfg = config
    if cfg.region_size < 1 or cfg.n_stations % cfg.region_size:
        raise ValidationError(
            f"n_stations={cfg.n_stations} is not divisible by region_size={cfg.region_size}"
        )
    if cfg.episode_days < 1:
        raise ValidationError("episode_days must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7]))
    L = cfg.city_km
    center = np.array([L / 2, L / 2])

    hot = [center + rng.normal(0, L * 0.04, 2)]
    while len(hot) < cfg.n_hotspots:
        hot.append(np.clip(center + rng.normal(0, L * 0.22, 2), L * 0.1, L * 0.9))
    hot = np.array(hot)
    kinds = ["business"] + ["residential" if i % 2 else "business" for i in range(1, cfg.n_hotspots)]
    # the center is the largest, tightest hotspot
    sig = np.concatenate([[L * 0.09], rng.uniform(L * 0.06, L * 0.1, cfg.n_hotspots - 1)])
    weight = np.concatenate([[1.6], rng.uniform(0.6, 1.1, cfg.n_hotspots - 1)])

    def clustered(n, spread, share):
        k = int(round(n * share))
        which = rng.choice(cfg.n_hotspots, size=k, p=weight / weight.sum())
        pts = hot[which] + rng.normal(0, 1, (k, 2)) * (sig[which, None] * spread)
        pts = np.vstack([pts, rng.uniform(0, L, (n - k, 2))])
        return np.clip(pts, 0.0, L)

    locs = clustered(cfg.n_stations, 1.3, cfg.clustered_share)
    locs = locs[rng.permutation(len(locs))]
    pois = clustered(cfg.n_pois, 1.0, cfg.poi_clustered_share)
    docks = rng.integers(cfg.min_docks, cfg.max_docks + 1, cfg.n_stations)

    price = PriceField(
        base=1.0,
        centers=tuple(tuple(map(float, c)) for c in np.vstack([center, hot])),
        amplitudes=tuple(float(a) for a in np.concatenate([[cfg.price_center_amp], 0.8 * weight])),
        widths=tuple(float(w) for w in np.concatenate([[L * 0.25], sig * 1.5])),
    )
    costs = np.round(cfg.constants.kappa_cost * price(locs) * docks, 3)
    stations = tuple(
        Station(i, (float(locs[i, 0]), float(locs[i, 1])), int(docks[i]), float(max(costs[i], 0.001)))
        for i in range(cfg.n_stations)
    )
    pool = CandidatePool(stations, pois, price, (L, L))

    bumps = tuple(
        {"center": [float(hot[i, 0]), float(hot[i, 1])], "amp": float(weight[i]),
         "sigma": float(sig[i]), "kind": kinds[i]}
        for i in range(cfg.n_hotspots)
    )
    field_ = DemandField(bumps, base_rate=1.0, weekend_factor=cfg.weekend_factor,
                         od_decay_km=cfg.od_decay_km, od_base=0.15)
    # scale bump amplitudes and base so the expected weekday total over candidates hits daily_demand
    bump_total = DemandField(bumps, 0.0, 1.0, 1.0, 1.0).daily_rate(locs).sum()
    base_total = float(cfg.n_stations)
    share = cfg.base_demand_share
    amp_scale = (1 - share) * cfg.daily_demand / bump_total
    base_rate = share * cfg.daily_demand / base_total
    bumps = tuple(dict(b, amp=round(b["amp"] * amp_scale, 9)) for b in bumps)
    field_ = DemandField(bumps, round(base_rate, 9), cfg.weekend_factor, cfg.od_decay_km, 0.15 * amp_scale)

    n0 = int(round(cfg.initial_fraction * cfg.n_stations))
    p0 = field_.daily_rate(locs) ** cfg.initial_bias
    initial = frozenset(int(i) for i in rng.choice(cfg.n_stations, size=n0, replace=False, p=p0 / p0.sum()))
    return Scenario(pool, field_, cfg.episode_days, int(seed), cfg.constants, initial, cfg.to_dict(), price)


def sample_demand_arrays(scenario: Scenario, day: int, step: int, rng: np.random.Generator,
                         ) -> tuple[np.ndarray, np.ndarray, int]:
    """Vectorized demand draw for one step.

    Returns (origins, destinations, n_dropped) where dropped draws are those
    whose destination equalled the origin twice in a row.
    """
    dt = daytype_of(day)
    rates = scenario.rates[dt, step]
    counts = rng.poisson(rates)
    total = int(counts.sum())
    if total == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e, 0
    n = scenario.n
    origins = np.repeat(np.arange(n), counts)
    cdf = scenario.od_cdf[dt, step // STEPS_PER_HOUR]
    dests = np.searchsorted(cdf, origins + rng.random(total), side="right") - origins * n
    np.minimum(dests, n - 1, out=dests)
    same = dests == origins
    if same.any():
        idx = np.flatnonzero(same)
        redo = np.searchsorted(cdf, origins[idx] + rng.random(len(idx)), side="right") - origins[idx] * n
        np.minimum(redo, n - 1, out=redo)
        dests[idx] = redo
        keep = dests != origins
        return origins[keep], dests[keep], int((~keep).sum())
    return origins, dests, 0


def sample_demand(scenario: Scenario, day: int, step: int, rng: np.random.Generator) -> list[DemandEvent]:
    """Demand events for ``step`` (0..143) of ``day``; ``DemandEvent.step`` is the global step."""
    if not 0 <= step < STEPS_PER_DAY:
        raise ValueError(f"step {step} outside [0, {STEPS_PER_DAY})")
    o, d, _ = sample_demand_arrays(scenario, day, step, rng)
    k = (day - 1) * STEPS_PER_DAY + step
    return [DemandEvent(k, int(a), int(b)) for a, b in zip(o, d)]
