"""GMV / NV / PM / SC bookkeeping, the episode objective and per-agent rewards."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .domain import DeploymentPlan, from_milli


@dataclass(frozen=True)
class RewardConfig:
    w: float = 1.0
    lam: float = 0.0
    gamma: float = 0.99

    def __post_init__(self):
        if self.w < 0 or self.lam < 0 or not 0.0 <= self.gamma <= 1.0:
            raise ValueError("need w >= 0, lam >= 0 and gamma in [0, 1]")


def satisfied_rate(satisfied: float, total: float) -> float:
    if total <= 0:
        return 1.0
    return min(1.0, satisfied / total)


def poi_coverage(active_mask: np.ndarray, poi_cover: np.ndarray, poi_idx: np.ndarray | None = None) -> float:
    """Fraction of POIs within the coverage radius of some active station."""
    cover = poi_cover if poi_idx is None else poi_cover[:, poi_idx]
    if cover.shape[1] == 0:
        return 0.0
    covered = cover[np.asarray(active_mask, dtype=bool)].any(axis=0)
    return float(covered.mean())


def service_coverage(satisfied: float, total: float, poi_cov: float) -> float:
    """Equal-weight mean of the demand satisfied rate and the POI coverage ratio."""
    return 0.5 * satisfied_rate(satisfied, total) + 0.5 * poi_cov


def profit_margin(gmv: float, cost: float) -> float:
    if gmv > 0:
        return float(np.clip((gmv - cost) / gmv, -1.0, 1.0))
    return 0.0 if cost <= 0 else -1.0


@dataclass(frozen=True)
class DayMetrics:
    day: int
    gmv_milli: int
    cost_milli: int
    demand_satisfied_rate: float
    poi_coverage: float
    sc: float
    pm: float
    satisfied: int = 0
    total_demand: int = 0

    @property
    def nv_milli(self) -> int:
        return self.gmv_milli - self.cost_milli

    @property
    def gmv(self) -> float:
        return from_milli(self.gmv_milli)

    @property
    def cost(self) -> float:
        return from_milli(self.cost_milli)

    @property
    def nv(self) -> float:
        return from_milli(self.nv_milli)

    @property
    def budget_violated(self) -> bool:
        # self-sustaining budget: the day's cost may not exceed the day's GMV
        return self.cost_milli > self.gmv_milli

    def to_json(self) -> dict:
        return {
            "day": self.day, "gmv": self.gmv, "cost": self.cost, "nv": self.nv, "sc": self.sc,
            "pm": self.pm, "demand_satisfied_rate": self.demand_satisfied_rate,
            "poi_coverage": self.poi_coverage, "budget_violated": self.budget_violated,
            "satisfied": self.satisfied, "total_demand": self.total_demand,
        }


def day_metrics(tallies, scenario) -> DayMetrics:
    sat, tot = tallies.total_satisfied, tallies.total_demand
    pc = poi_coverage(tallies.active, scenario.poi_cover)
    gmv, cost = tallies.gmv_total_milli, tallies.cost_milli
    return DayMetrics(
        day=tallies.day, gmv_milli=gmv, cost_milli=cost,
        demand_satisfied_rate=satisfied_rate(sat, tot), poi_coverage=pc,
        sc=service_coverage(sat, tot, pc), pm=profit_margin(gmv, cost),
        satisfied=sat, total_demand=tot,
    )


@dataclass
class EpisodeObjective:
    sc: float
    pm: float
    objective: float
    infeasible: list[bool]


def episode_objective(per_day: Sequence[DayMetrics], w: float) -> EpisodeObjective:
    """Mean daily SC plus ``w`` times the episode profit margin; flags days with cost > GMV."""
    if not per_day:
        return EpisodeObjective(0.0, 0.0, 0.0, [])
    sc = float(np.mean([d.sc for d in per_day]))
    gmv = sum(d.gmv_milli for d in per_day)
    cost = sum(d.cost_milli for d in per_day)
    pm = profit_margin(gmv, cost)
    return EpisodeObjective(sc, pm, sc + w * pm, [d.budget_violated for d in per_day])


@dataclass
class EpisodeReport:
    per_day: list[DayMetrics]
    w: float
    tallies: list = field(default_factory=list, repr=False)
    plan: DeploymentPlan | None = field(default=None, repr=False)

    @property
    def gmv_milli(self) -> int:
        return sum(d.gmv_milli for d in self.per_day)

    @property
    def cost_milli(self) -> int:
        return sum(d.cost_milli for d in self.per_day)

    @property
    def nv_milli(self) -> int:
        return self.gmv_milli - self.cost_milli

    @property
    def GMV(self) -> float:
        return from_milli(self.gmv_milli)

    @property
    def NV(self) -> float:
        return from_milli(self.nv_milli)

    @property
    def cost(self) -> float:
        return from_milli(self.cost_milli)

    @property
    def SC(self) -> float:
        return episode_objective(self.per_day, self.w).sc

    @property
    def PM(self) -> float:
        return episode_objective(self.per_day, self.w).pm

    @property
    def objective(self) -> float:
        return episode_objective(self.per_day, self.w).objective

    @property
    def infeasible_days(self) -> int:
        return sum(d.budget_violated for d in self.per_day)

    def to_json(self) -> dict:
        return {
            "per_day": [d.to_json() for d in self.per_day],
            "episode": {"GMV": self.GMV, "NV": self.NV, "SC": self.SC, "PM": self.PM,
                        "objective": self.objective, "cost": self.cost, "w": self.w,
                        "infeasible_days": self.infeasible_days},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def build_report(scenario, history, w: float = 1.0, plan: DeploymentPlan | None = None) -> EpisodeReport:
    return EpisodeReport([day_metrics(t, scenario) for t in history], w, list(history), plan)


# region-level quantities used by the per-agent reward ----------------------------------


@dataclass(frozen=True)
class RegionMetrics:
    sc: np.ndarray
    pm: np.ndarray
    nv: np.ndarray  # money units


def region_metrics(tallies, membership: np.ndarray, poi_region: np.ndarray, scenario) -> RegionMetrics:
    """Per-region SC, PM and NV; revenue is attributed to the origin station's region.

    ``membership`` is a (N, n_stations) 0/1 matrix, ``poi_region`` the region of each POI.
    """
    m = membership.astype(np.int64)
    demand = m @ tallies.demand
    sat = m @ tallies.satisfied
    gmv = m @ tallies.gmv_milli
    cost_each = np.where(tallies.active, scenario.pool.cost_milli, 0)
    cost = m @ cost_each
    n_regions = len(membership)
    covered = scenario.poi_cover[tallies.active].any(axis=0) if scenario.poi_cover.shape[1] else np.zeros(0, bool)
    pois_per = np.bincount(poi_region, minlength=n_regions)
    cov_per = np.bincount(poi_region, weights=covered.astype(float), minlength=n_regions)
    poi_cov = np.divide(cov_per, pois_per, out=np.zeros(n_regions), where=pois_per > 0)
    rate = np.where(demand > 0, np.minimum(1.0, sat / np.maximum(demand, 1)), 1.0)
    sc = 0.5 * rate + 0.5 * poi_cov
    pm = np.array([profit_margin(g, c) for g, c in zip(gmv, cost)])
    return RegionMetrics(sc, pm, (gmv - cost) / 1000.0)


def agent_reward(prev_sc: float, prev_pm: float, cur_sc: float, cur_pm: float, nv_region: float,
                 config: RewardConfig) -> float:
    """Improvement in SC and PM plus a penalty on negative regional net revenue."""
    return (cur_sc - prev_sc) + config.w * (cur_pm - prev_pm) + config.lam * min(nv_region, 0.0)


def agent_rewards(prev: RegionMetrics, cur: RegionMetrics, config: RewardConfig) -> np.ndarray:
    return (cur.sc - prev.sc) + config.w * (cur.pm - prev.pm) + config.lam * np.minimum(cur.nv, 0.0)
