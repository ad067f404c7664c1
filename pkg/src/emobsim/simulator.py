"""Day-by-day, 10-minute-step simulation of a station-based EV sharing system."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np

from . import STEPS_PER_DAY
from .domain import (DeploymentPlan, DemandEvent, Order, ValidationError, snapshot_cost_milli,
                     validate_plan)
from .scenario import Scenario, sample_demand_arrays

log = logging.getLogger(__name__)


class Status(IntEnum):
    DOCKED = 0  # parked on a dock, charging whenever below full range
    IN_TRANSIT = 1
    QUEUED = 2  # returned, waiting for a dock near its destination
    RETIRED = 3


REASONS = ("origin_inactive", "dest_inactive", "no_vehicle", "insufficient_range")


@dataclass(frozen=True)
class Rejection:
    reason: str


@dataclass
class DayTallies:
    """Raw per-station counters for one simulated day."""

    day: int
    active: np.ndarray
    cost_milli: int
    demand: np.ndarray
    demand_dest: np.ndarray
    pickups: np.ndarray
    returns: np.ndarray
    satisfied: np.ndarray  # by origin station, credited on completion
    gmv_milli: np.ndarray  # by origin station, credited on completion
    parked_steps: np.ndarray
    range_sum: np.ndarray
    rejected: dict = field(default_factory=lambda: dict.fromkeys(REASONS, 0))
    opened: int = 0
    closed: int = 0
    retired: int = 0

    @classmethod
    def empty(cls, day: int, n: int, active: np.ndarray, cost_milli: int) -> "DayTallies":
        z = lambda dt=np.int64: np.zeros(n, dtype=dt)  # noqa: E731
        return cls(day, active.copy(), cost_milli, z(), z(), z(), z(), z(), z(), z(), z(float))

    @property
    def total_demand(self) -> int:
        return int(self.demand.sum())

    @property
    def total_satisfied(self) -> int:
        return int(self.satisfied.sum())

    @property
    def gmv_total_milli(self) -> int:
        return int(self.gmv_milli.sum())


class SimState:
    """Mutable world state of one episode. Single-threaded."""

    def __init__(self, scenario: Scenario, ops_rng: np.random.Generator):
        self.scenario = scenario
        self.rng = ops_rng
        n = scenario.n
        self.n = n
        self.day = 0
        self.k = 0  # global step, day 0 spans [-144, 0)
        self.active = np.zeros(n, dtype=bool)
        self.docks = scenario.pool.docks
        self.full = scenario.constants.full_range_km
        cap = int(self.docks.sum())
        self.range_km = np.zeros(cap)
        self.status = np.full(cap, Status.RETIRED, dtype=np.int8)
        self.where = np.full(cap, -1, dtype=np.int64)
        self.n_vehicles = 0
        self.at_station: list[list[int]] = [[] for _ in range(n)]
        self.occupancy = np.zeros(n, dtype=np.int64)
        # (arrive_step, seq, vehicle, origin, dest, trip_km, price_milli, depart_step)
        self.pending: list[tuple] = []
        self.queued: list[int] = []
        self._seq = 0
        self.neighbors = np.argsort(scenario.dist_km, axis=1, kind="stable")
        self._near_cache: dict = {}
        # docks freed since the last queue retry (None = everything may have changed)
        self._freed: list[int] | None = None
        self.reach = scenario.dist_km <= scenario.constants.reposition_radius_km
        self.tallies: DayTallies | None = None
        self.fleet_size = 0
        self.retired = 0

    # vehicles ---------------------------------------------------------------------
    def _new_vehicle(self, station: int) -> int:
        vid = self.n_vehicles
        if vid >= len(self.range_km):
            grow = len(self.range_km) or 16
            self.range_km = np.concatenate([self.range_km, np.zeros(grow)])
            self.status = np.concatenate([self.status, np.full(grow, Status.RETIRED, dtype=np.int8)])
            self.where = np.concatenate([self.where, np.full(grow, -1, dtype=np.int64)])
        self.n_vehicles += 1
        self.range_km[vid] = self.full
        self._dock(vid, station)
        self.fleet_size += 1
        return vid

    def _dock(self, vid: int, station: int) -> None:
        self.status[vid] = Status.DOCKED
        self.where[vid] = station
        self.at_station[station].append(vid)
        self.occupancy[station] += 1

    def _undock(self, vid: int, station: int) -> None:
        self.at_station[station].remove(vid)
        self.occupancy[station] -= 1
        if self._freed is not None:
            self._freed.append(station)

    def free_docks(self, station: int) -> int:
        return int(self.docks[station] - self.occupancy[station])

    def _near(self, station: int, radius_km: float | None):
        key = (station, radius_km)
        hit = self._near_cache.get(key)
        if hit is None:
            order = self.neighbors[station]
            order = order[order != station]
            d = self.scenario.dist_km[station, order]
            if radius_km is not None:
                keep = d <= radius_km
                order, d = order[keep], d[keep]
            hit = self._near_cache[key] = (order, d)
        return hit

    def nearest_with_space(self, station: int, radius_km: float | None = None,
                           max_leg_km: float | None = None) -> int:
        """Nearest active station (other than ``station``) with a free dock, or -1."""
        order, d = self._near(station, radius_km)
        ok = self.active[order] & (self.occupancy[order] < self.docks[order])
        k = int(ok.argmax()) if len(ok) else 0
        if not len(ok) or not ok[k]:
            return -1
        if max_leg_km is not None and d[k] * self.scenario.constants.detour_factor > max_leg_km:
            return -1
        return int(order[k])

    # invariants -------------------------------------------------------------------
    def check_invariants(self) -> None:
        st = self.status[: self.n_vehicles]
        live = int((st != Status.RETIRED).sum())
        assert live == self.fleet_size, (live, self.fleet_size)
        docked = int((st == Status.DOCKED).sum())
        in_transit = int((st == Status.IN_TRANSIT).sum())
        queued = int((st == Status.QUEUED).sum())
        assert in_transit == len(self.pending), (in_transit, len(self.pending))
        assert queued == len(self.queued)
        assert docked + in_transit + queued == self.fleet_size
        assert (self.occupancy <= self.docks).all(), "dock overflow"
        assert int(self.occupancy.sum()) == docked
        assert all(len(v) == o for v, o in zip(self.at_station, self.occupancy))
        r = self.range_km[: self.n_vehicles]
        assert (r >= -1e-9).all() and (r <= self.full + 1e-9).all(), "range out of bounds"


def apply_snapshot(state: SimState, active: Iterable[int], rng: np.random.Generator | None = None) -> SimState:
    """Switch the active set at midnight: allocate vehicles to new stations, relocate from closed ones."""
    rng = rng if rng is not None else state.rng
    c = state.scenario.constants
    new = np.zeros(state.n, dtype=bool)
    ids = sorted(int(i) for i in active)
    if ids and (ids[0] < 0 or ids[-1] >= state.n):
        raise ValidationError(f"unknown station id in {ids}")
    new[ids] = True
    opened = np.flatnonzero(new & ~state.active)
    closed = np.flatnonzero(state.active & ~new)
    state.active = new
    state._freed = None
    for s in opened:
        u = rng.uniform(c.alloc_low, c.alloc_high)
        k = int(np.floor(u * state.docks[s]))
        k = min(k, state.free_docks(s))
        for _ in range(k):
            state._new_vehicle(int(s))
    retired = 0
    for s in closed:
        for vid in list(state.at_station[s]):
            state._undock(vid, int(s))
            j = state.nearest_with_space(int(s))
            if j >= 0:
                state._dock(vid, j)
            else:
                state.status[vid] = Status.RETIRED
                state.where[vid] = -1
                state.fleet_size -= 1
                retired += 1
    # vehicles waiting at a destination that just closed are relocated the same way
    if state.queued:
        keep = []
        for vid in state.queued:
            dest = int(state.where[vid])
            if state.active[dest]:
                keep.append(vid)
                continue
            j = state.nearest_with_space(dest)
            if j >= 0:
                state._dock(vid, j)
            else:
                state.status[vid] = Status.RETIRED
                state.where[vid] = -1
                state.fleet_size -= 1
                retired += 1
        state.queued = keep
    if retired:
        log.warning("day %d: %d vehicle(s) retired, no free dock anywhere", state.day, retired)
    state.retired += retired
    if state.tallies is not None:
        state.tallies.opened += len(opened)
        state.tallies.closed += len(closed)
        state.tallies.retired += retired
    return state


def _accept(state: SimState, o: int, d: int, k: int):
    """Fast path of order acceptance; returns a pending-heap entry or a rejection reason."""
    if not state.active[o]:
        return "origin_inactive"
    if not state.active[d]:
        return "dest_inactive"
    vehicles = state.at_station[o]
    if not vehicles:
        return "no_vehicle"
    rk = state.range_km
    best = vehicles[0]
    best_r = rk[best]
    for v in vehicles[1:]:
        r = rk[v]
        if r > best_r or (r == best_r and v < best):
            best, best_r = v, r
    scen = state.scenario
    km = scen.trip_km[o, d]
    if best_r < km:
        return "insufficient_range"
    state._undock(best, o)
    state.status[best] = Status.IN_TRANSIT
    state.where[best] = d
    state._seq += 1
    entry = (k + int(scen.trip_steps[o, d]), state._seq, best, o, d, float(km), int(scen.price_milli[o, d]), k)
    heapq.heappush(state.pending, entry)
    t = state.tallies
    if t is not None:
        t.pickups[o] += 1
    return entry


def try_accept_order(state: SimState, demand: DemandEvent) -> Order | Rejection:
    """Accept iff both ends are active and the origin holds a vehicle with enough range.

    The vehicle with the largest range is taken (lowest id on ties).
    """
    res = _accept(state, demand.origin_id, demand.dest_id, demand.step)
    if isinstance(res, str):
        if state.tallies is not None:
            state.tallies.rejected[res] += 1
        return Rejection(res)
    arrive, _, vid, _, _, km, price, depart = res
    return Order(demand, vid, depart, arrive, km, price)


def _try_place(state: SimState, vid: int, dest: int) -> bool:
    if state.active[dest] and state.occupancy[dest] < state.docks[dest]:
        j = dest
    else:
        c = state.scenario.constants
        j = state.nearest_with_space(dest, c.reposition_radius_km, max_leg_km=float(state.range_km[vid]))
        if j < 0:
            return False
        state.range_km[vid] = max(0.0, state.range_km[vid] - float(state.scenario.trip_km[dest, j]))
    state._dock(vid, j)
    if state.tallies is not None:
        state.tallies.returns[j] += 1
    return True


def _complete(state: SimState, vid: int, o: int, d: int, km: float, price_milli: int) -> None:
    state.range_km[vid] = max(0.0, state.range_km[vid] - km)
    t = state.tallies
    if t is not None:
        t.satisfied[o] += 1
        t.gmv_milli[o] += price_milli
    if not _try_place(state, vid, d):
        state.status[vid] = Status.QUEUED
        state.where[vid] = d
        state.queued.append(vid)


def complete_arrival(state: SimState, order: Order) -> SimState:
    """Return the vehicle of a finished trip; reposition within the radius or queue if the destination is full.

    The order counts as satisfied (and its price enters GMV) here, also when
    the vehicle is repositioned or queued.
    """
    if state.pending:
        state.pending = [e for e in state.pending if e[2] != order.vehicle_id]
        heapq.heapify(state.pending)
    _complete(state, order.vehicle_id, order.demand.origin_id, order.demand.dest_id,
              order.trip_km, order.price_milli)
    return state


def retry_queue(state: SimState) -> None:
    """Retry queued vehicles whose destination could have gained a reachable free dock."""
    freed, state._freed = state._freed, []
    if not state.queued or freed == []:
        return
    hot = state.reach[freed].any(axis=0) if freed is not None else None
    keep = []
    for vid in state.queued:
        dest = int(state.where[vid])
        if (hot is not None and not hot[dest]) or not _try_place(state, vid, dest):
            keep.append(vid)
    state.queued = keep


def process_arrivals(state: SimState) -> None:
    retry_queue(state)
    pending = state.pending
    while pending and pending[0][0] <= state.k:
        e = heapq.heappop(pending)
        _complete(state, e[2], e[3], e[4], e[5], e[6])


def tick_charging(state: SimState) -> SimState:
    """Piecewise-linear charging: fast rate below 80 % of full range, half rate above, capped."""
    nv = state.n_vehicles
    if nv == 0:
        return state
    docked = state.status[:nv] == Status.DOCKED
    r = state.range_km[:nv]
    full = state.full
    fast = state.scenario.constants.fast_rate_km
    gain = np.where(r < 0.8 * full, fast, 0.5 * fast)
    np.minimum(r + gain * docked, full, out=r)
    return state


def _station_stats(state: SimState) -> None:
    t = state.tallies
    t.parked_steps += state.occupancy
    nv = state.n_vehicles
    docked = state.status[:nv] == Status.DOCKED
    if docked.any():
        t.range_sum += np.bincount(state.where[:nv][docked], weights=state.range_km[:nv][docked],
                                   minlength=state.n)


def run_day(state: SimState, active: Iterable[int], demand_rng: np.random.Generator,
            day: int | None = None, check_invariants: bool = False, trace: list | None = None,
            demand=None) -> DayTallies:
    """Apply the day's snapshot then simulate its 144 steps.

    ``demand(day, step) -> (origins, dests)`` replaces sampling from the scenario field.
    """
    scen = state.scenario
    if day is not None:
        state.day = day
    active = frozenset(int(i) for i in active)
    cost = snapshot_cost_milli(active, scen.pool)
    mask = np.zeros(state.n, dtype=bool)
    mask[list(active)] = True
    state.tallies = DayTallies.empty(state.day, state.n, mask, cost)
    apply_snapshot(state, active)
    t = state.tallies
    base = (state.day - 1) * STEPS_PER_DAY
    orig_all, dest_all = [], []
    for step in range(STEPS_PER_DAY):
        state.k = base + step
        if demand is None:
            origins, dests, _ = sample_demand_arrays(scen, state.day, step, demand_rng)
        else:
            origins, dests = (np.asarray(a, dtype=np.int64) for a in demand(state.day, step))
        if len(origins):
            orig_all.append(origins)
            dest_all.append(dests)
            act = state.active
            ok_o = act[origins]
            ok_d = act[dests]
            n_oi = int((~ok_o).sum())
            n_di = int((ok_o & ~ok_d).sum())
            t.rejected["origin_inactive"] += n_oi
            t.rejected["dest_inactive"] += n_di
            both = np.flatnonzero(ok_o & ok_d)
            k = state.k
            rej = t.rejected
            for o, d in zip(origins[both].tolist(), dests[both].tolist()):
                res = _accept(state, o, d, k)
                if isinstance(res, str):
                    rej[res] += 1
                if trace is not None:
                    trace.append(res)
        process_arrivals(state)
        tick_charging(state)
        _station_stats(state)
        if check_invariants:
            state.check_invariants()
    if orig_all:
        o = np.concatenate(orig_all)
        d = np.concatenate(dest_all)
        t.demand += np.bincount(o, minlength=state.n)
        t.demand_dest += np.bincount(d, minlength=state.n)
    state.k = base + STEPS_PER_DAY
    return t


class Episode:
    """Closed-loop episode driver: a warm-up day with S_0, then one call per day."""

    def __init__(self, scenario: Scenario, seed: int, check_invariants: bool = False):
        self.scenario = scenario
        self.seed = int(seed)
        ss = np.random.SeedSequence([self.seed, 0xE5])
        d_ss, o_ss, p_ss = ss.spawn(3)
        self.demand_rng = np.random.default_rng(d_ss)
        self.planner_rng = np.random.default_rng(p_ss)
        self.state = SimState(scenario, np.random.default_rng(o_ss))
        self.check = check_invariants
        self.history: list[DayTallies] = []
        self.warmup: DayTallies | None = None
        self.snapshots: list[frozenset[int]] = []
        self.initial: frozenset[int] | None = None

    @property
    def day(self) -> int:
        return len(self.history)

    @property
    def active(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.state.active).tolist())

    @property
    def last(self) -> DayTallies:
        return self.history[-1] if self.history else self.warmup

    def start(self, initial: Iterable[int]) -> DayTallies:
        self.initial = frozenset(int(i) for i in initial)
        t = run_day(self.state, self.initial, self.demand_rng, day=0, check_invariants=self.check)
        self.warmup = t
        return t

    def step(self, active: Iterable[int]) -> DayTallies:
        active = frozenset(int(i) for i in active)
        t = run_day(self.state, active, self.demand_rng, day=self.day + 1, check_invariants=self.check)
        self.snapshots.append(active)
        self.history.append(t)
        return t

    def plan(self) -> DeploymentPlan:
        return DeploymentPlan.from_sets(self.snapshots, self.initial)

    def report(self, w: float = 1.0):
        from .metrics import build_report

        return build_report(self.scenario, self.history, w=w, plan=self.plan())


def run_episode(scenario: Scenario, plan: DeploymentPlan, seed: int, w: float = 1.0,
                check_invariants: bool = False):
    """Simulate a fixed plan; the day-0 snapshot S_0 is simulated as a warm-up day."""
    errors = validate_plan(plan, scenario.pool)
    if errors:
        raise ValidationError("invalid plan: " + "; ".join(errors), errors)
    ep = Episode(scenario, seed, check_invariants)
    ep.start(plan.initial)
    for snap in plan.snapshots:
        ep.step(snap.active)
    return ep.report(w)
