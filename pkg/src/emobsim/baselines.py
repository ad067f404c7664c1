"""Comparison planners: fixed, revenue-/coverage-greedy churn, one-time and incremental optimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .domain import DeploymentPlan
from .metrics import EpisodeReport
from .scenario import Scenario
from .simulator import DayTallies, Episode

log = logging.getLogger(__name__)

CAPTURE_PER_DOCK = 2.0


@dataclass(frozen=True)
class HistoryStats:
    """Trailing-window per-station statistics from already simulated days."""

    window: int
    demand_mean: np.ndarray  # requested pick-ups per day
    satisfied_mean: np.ndarray
    nv_mean: np.ndarray  # per active day, NaN if never active in the window
    revenue_per_request: float
    last_gmv: float

    @classmethod
    def from_history(cls, history: Sequence[DayTallies], cost_milli: np.ndarray, window: int = 7
                     ) -> "HistoryStats | None":
        if window < 1:
            raise ValueError("window must be >= 1")
        days = list(history)[-window:]
        if not days:
            return None
        dem = np.mean([t.demand for t in days], axis=0)
        sat = np.mean([t.satisfied for t in days], axis=0)
        act = np.array([t.active for t in days])
        nv = np.array([(t.gmv_milli - np.where(t.active, cost_milli, 0)) / 1000.0 for t in days])
        n_act = act.sum(0)
        nv_mean = np.where(n_act > 0, (nv * act).sum(0) / np.maximum(n_act, 1), np.nan)
        req = sum(float(t.demand[t.active].sum()) for t in days)
        gmv = sum(t.gmv_total_milli for t in days) / 1000.0
        return cls(window, dem, sat, nv_mean, gmv / req if req > 0 else 0.0, days[-1].gmv_total_milli / 1000.0)


def plan_fixed(initial, T: int) -> DeploymentPlan:
    """Keep the initial deployment for every day."""
    s = frozenset(initial)
    return DeploymentPlan.from_sets([s] * T, s)


def default_churn(n_stations: int) -> Callable[[np.random.Generator], int]:
    mean = 0.03 * n_stations
    cap = int(0.1 * n_stations)

    def draw(rng: np.random.Generator) -> int:
        return int(min(rng.poisson(mean), cap))

    return draw


def marginal_poi(active: np.ndarray, poi_cover: np.ndarray) -> np.ndarray:
    """POIs a station adds (inactive) or alone covers (active), as a fraction of all POIs."""
    if poi_cover.shape[1] == 0:
        return np.zeros(poi_cover.shape[0])
    cnt = poi_cover[active].sum(0)
    own = poi_cover.astype(np.int64)
    others = cnt[None, :] - own * active[:, None]
    return (poi_cover & (others == 0)).sum(1) / poi_cover.shape[1]


def greedy_scores(kind: str, active: np.ndarray, stats: HistoryStats, scenario: Scenario) -> np.ndarray:
    if kind == "revenue":
        cost = scenario.pool.cost_milli / 1000.0
        potential = stats.demand_mean * stats.revenue_per_request - cost
        return np.where(np.isnan(stats.nv_mean), potential, stats.nv_mean)
    if kind == "coverage":
        tot = stats.demand_mean.sum()
        share = stats.demand_mean / tot if tot > 0 else np.zeros_like(stats.demand_mean)
        return 0.5 * (marginal_poi(active, scenario.poi_cover) + share)
    raise ValueError(f"unknown greedy kind {kind!r}")


def plan_greedy(kind: str, active, stats: HistoryStats | None, churn: int | Callable, rng: np.random.Generator,
                scenario: Scenario, scores: np.ndarray | None = None) -> frozenset[int]:
    """Open the ``n`` best inactive and close the ``n`` worst active stations (ties by id)."""
    act = np.zeros(scenario.n, dtype=bool)
    act[list(active)] = True
    if stats is None and scores is None:
        return frozenset(np.flatnonzero(act).tolist())
    n = churn(rng) if callable(churn) else int(churn)
    if n <= 0:
        return frozenset(np.flatnonzero(act).tolist())
    sc = greedy_scores(kind, act, stats, scenario) if scores is None else np.asarray(scores, float)
    ids = np.arange(scenario.n)
    inactive = ids[~act]
    on = ids[act]
    best_in = inactive[np.lexsort((inactive, -sc[inactive]))][:n]
    worst_on = on[np.lexsort((on, sc[on]))][:n]
    act[best_in] = True
    act[worst_on] = False
    return frozenset(np.flatnonzero(act).tolist())


def coverage_capture_greedy(poi_cover: np.ndarray, demand_est: np.ndarray, capacity: np.ndarray,
                            cost: np.ndarray, budget: float, poi_weight: float = 0.5,
                            demand_weight: float = 0.5, return_gains: bool = False):
    """Budgeted greedy on 0.5 * POI coverage + 0.5 * capped demand capture, by gain per unit cost.

    The result is compared with the best affordable single station and the
    better of the two is kept (the usual guard for cost-benefit greedy).
    """
    n = len(cost)
    P = poi_cover.shape[1]
    cap_dem = np.minimum(np.asarray(demand_est, float), capacity)
    tot_dem = float(np.asarray(demand_est, float).sum())
    dem_gain = demand_weight * cap_dem / tot_dem if tot_dem > 0 else np.zeros(n)
    poi_w = poi_weight / P if P else 0.0

    def value(sel: np.ndarray) -> float:
        v = float(dem_gain[sel].sum())
        if P and sel.any():
            v += poi_w * float(poi_cover[sel].any(0).sum())
        return v

    affordable = cost <= budget
    if not affordable.any():
        log.warning("budget %.3f below the cheapest candidate (%.3f); empty snapshot", budget, cost.min())
        return (frozenset(), []) if return_gains else frozenset()
    chosen = np.zeros(n, dtype=bool)
    covered = np.zeros(P, dtype=bool)
    spent = 0.0
    gains = []
    while True:
        new_cov = (poi_cover & ~covered).sum(1) if P else np.zeros(n)
        gain = dem_gain + poi_w * new_cov
        ok = ~chosen & (spent + cost <= budget + 1e-12) & (gain > 1e-15)
        if not ok.any():
            break
        ratio = np.where(ok, gain / cost, -np.inf)
        best = int(np.flatnonzero(ratio == ratio.max())[0])
        chosen[best] = True
        spent += cost[best]
        gains.append(float(gain[best]))
        if P:
            covered |= poi_cover[best]
    single_vals = np.array([value(np.eye(n, dtype=bool)[i]) if affordable[i] else -np.inf for i in range(n)])
    best_single = int(np.flatnonzero(single_vals == single_vals.max())[0])
    if single_vals[best_single] > value(chosen) + 1e-12:
        chosen = np.zeros(n, dtype=bool)
        chosen[best_single] = True
        gains = [float(single_vals[best_single])]
    out = frozenset(np.flatnonzero(chosen).tolist())
    return (out, gains) if return_gains else out


def plan_one_time(scenario: Scenario, demand_est: np.ndarray, budget: float) -> frozenset[int]:
    """One snapshot maximizing POI coverage and estimated demand capture within ``budget``."""
    return coverage_capture_greedy(scenario.poi_cover, demand_est, CAPTURE_PER_DOCK * scenario.pool.docks,
                                   scenario.pool.cost_milli / 1000.0, budget)


def plan_incremental(scenario: Scenario, stats: HistoryStats, budget_fn: Callable[[HistoryStats], float] | None = None
                     ) -> frozenset[int]:
    """Re-run the one-time optimization with today's statistics; budget defaults to yesterday's GMV."""
    budget = stats.last_gmv if budget_fn is None else budget_fn(stats)
    return plan_one_time(scenario, stats.demand_mean, budget)


# closed-loop planners ------------------------------------------------------------------


class Planner:
    name = "base"

    def reset(self, scenario: Scenario, ep: Episode) -> None:
        self.scenario = scenario

    def next_snapshot(self, ep: Episode) -> frozenset[int]:
        raise NotImplementedError

    def stats(self, ep: Episode, window: int = 7) -> HistoryStats | None:
        hist = ([ep.warmup] if ep.warmup is not None else []) + ep.history
        return HistoryStats.from_history(hist, self.scenario.pool.cost_milli, window)


class FixedPlanner(Planner):
    name = "fd"

    def next_snapshot(self, ep):
        return frozenset(ep.initial)


class GreedyPlanner(Planner):
    def __init__(self, kind: str, churn: Callable | None = None, window: int = 7):
        self.kind = kind
        self.churn = churn
        self.window = window
        self.name = {"revenue": "rev", "coverage": "cov"}[kind]

    def reset(self, scenario, ep):
        super().reset(scenario, ep)
        self._churn = self.churn or default_churn(scenario.n)

    def next_snapshot(self, ep):
        return plan_greedy(self.kind, ep.active, self.stats(ep, self.window), self._churn,
                           ep.planner_rng, self.scenario)


class OneTimePlanner(Planner):
    name = "oo"

    def __init__(self, budget: float | None = None, use_ground_truth: bool = False):
        self.budget = budget
        self.use_ground_truth = use_ground_truth
        self._snap = None

    def reset(self, scenario, ep):
        super().reset(scenario, ep)
        self._snap = None

    def next_snapshot(self, ep):
        if self._snap is None:
            st = self.stats(ep)
            est = (self.scenario.rates[0].sum(0) if self.use_ground_truth or st is None else st.demand_mean)
            # self-sustaining analogue: the FD system's daily GMV, observed on the warm-up day
            budget = self.budget if self.budget is not None else (st.last_gmv if st else np.inf)
            self._snap = plan_one_time(self.scenario, est, budget)
        return self._snap


class IncrementalPlanner(Planner):
    name = "io"

    def __init__(self, window: int = 7, budget_fn: Callable | None = None):
        self.window = window
        self.budget_fn = budget_fn

    def next_snapshot(self, ep):
        st = self.stats(ep, self.window)
        if st is None:
            return frozenset(ep.initial)
        return plan_incremental(self.scenario, st, self.budget_fn)


def make_planner(name: str) -> Planner:
    name = name.lower()
    if name == "fd":
        return FixedPlanner()
    if name == "rev":
        return GreedyPlanner("revenue")
    if name == "cov":
        return GreedyPlanner("coverage")
    if name == "oo":
        return OneTimePlanner()
    if name == "io":
        return IncrementalPlanner()
    raise ValueError(f"unknown baseline planner {name!r}")


def run_planner(scenario: Scenario, planner: Planner, seed: int, w: float = 1.0,
                check_invariants: bool = False) -> EpisodeReport:
    """Run a closed-loop planner for one episode; the realized plan is attached to the report."""
    ep = Episode(scenario, seed, check_invariants)
    ep.start(scenario.initial_active)
    planner.reset(scenario, ep)
    for _ in range(scenario.episode_days):
        ep.step(planner.next_snapshot(ep))
    return ep.report(w)
