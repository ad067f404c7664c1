"""Immutable domain types and deployment-plan algebra."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import MINUTES_PER_STEP, STEPS_PER_DAY


class ValidationError(ValueError):
    """Raised when a plan, snapshot or pool is malformed."""

    def __init__(self, message: str, errors: Sequence[str] = ()):
        super().__init__(message)
        self.errors = list(errors) or [message]


def to_milli(amount: float) -> int:
    """Money in integer milli-units (all accounting is exact in this unit)."""
    return int(round(amount * 1000.0))


def from_milli(amount: int) -> float:
    return amount / 1000.0


@dataclass(frozen=True)
class Station:
    id: int
    loc: tuple[float, float]
    docks: int
    daily_cost: float

    def __post_init__(self):
        if self.docks < 1:
            raise ValidationError(f"station {self.id}: docks must be >= 1")
        if not self.daily_cost > 0:
            raise ValidationError(f"station {self.id}: daily_cost must be > 0")


@dataclass(frozen=True)
class PriceField:
    """Property price as a base level plus radial Gaussian bumps."""

    base: float
    centers: tuple[tuple[float, float], ...]
    amplitudes: tuple[float, ...]
    widths: tuple[float, ...]

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(pts), self.base)
        for c, a, w in zip(self.centers, self.amplitudes, self.widths):
            d2 = ((pts - np.asarray(c)) ** 2).sum(axis=1)
            out += a * np.exp(-d2 / (2.0 * w * w))
        return out

    def to_json(self) -> dict:
        return {
            "base": self.base,
            "centers": [list(c) for c in self.centers],
            "amplitudes": list(self.amplitudes),
            "widths": list(self.widths),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PriceField":
        return cls(
            base=float(d["base"]),
            centers=tuple(tuple(float(v) for v in c) for c in d["centers"]),
            amplitudes=tuple(float(a) for a in d["amplitudes"]),
            widths=tuple(float(w) for w in d["widths"]),
        )


@dataclass(frozen=True, eq=False)
class CandidatePool:
    """All deployable sites, plus the POIs and price field of the city."""

    stations: tuple[Station, ...]
    pois: np.ndarray
    price_field: Callable | None = None
    bounds: tuple[float, float] = (float("inf"), float("inf"))
    locs: np.ndarray = field(init=False, repr=False)
    docks: np.ndarray = field(init=False, repr=False)
    cost_milli: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for i, s in enumerate(self.stations):
            if s.id != i:
                raise ValidationError(f"station ids must be 0..n-1, got {s.id} at position {i}")
        locs = np.array([s.loc for s in self.stations], dtype=float).reshape(-1, 2)
        w, h = self.bounds
        if len(locs) and (locs.min() < 0 or (locs[:, 0] > w).any() or (locs[:, 1] > h).any()):
            raise ValidationError("station outside the city bounding box")
        pois = np.asarray(self.pois, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "pois", pois)
        object.__setattr__(self, "locs", locs)
        object.__setattr__(self, "docks", np.array([s.docks for s in self.stations], dtype=np.int64))
        object.__setattr__(
            self, "cost_milli", np.array([to_milli(s.daily_cost) for s in self.stations], dtype=np.int64)
        )
        for a in (self.locs, self.docks, self.cost_milli, self.pois):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.stations)


@dataclass(frozen=True)
class DeploymentSnapshot:
    day: int
    active: frozenset[int]

    def __init__(self, day: int, active: Iterable[int]):
        object.__setattr__(self, "day", int(day))
        object.__setattr__(self, "active", frozenset(int(i) for i in active))


@dataclass(frozen=True)
class DeploymentPlan:
    """Snapshots for days 1..T; ``initial`` is the day-0 deployment S_0."""

    snapshots: tuple[DeploymentSnapshot, ...]
    initial: frozenset[int] | None = None

    def __init__(self, snapshots: Iterable[DeploymentSnapshot], initial: Iterable[int] | None = None):
        snaps = tuple(snapshots)
        object.__setattr__(self, "snapshots", snaps)
        if initial is None:
            init = snaps[0].active if snaps else frozenset()
        else:
            init = frozenset(int(i) for i in initial)
        object.__setattr__(self, "initial", init)

    @property
    def T(self) -> int:
        return len(self.snapshots)

    @classmethod
    def from_sets(cls, sets: Sequence[Iterable[int]], initial: Iterable[int] | None = None) -> "DeploymentPlan":
        return cls([DeploymentSnapshot(t + 1, s) for t, s in enumerate(sets)], initial)

    def to_json(self) -> list[dict]:
        rows = [{"day": 0, "active": sorted(self.initial)}]
        rows += [{"day": s.day, "active": sorted(s.active)} for s in self.snapshots]
        return rows

    @classmethod
    def from_json(cls, rows: list[dict]) -> "DeploymentPlan":
        initial = None
        snaps = []
        for r in rows:
            if int(r["day"]) == 0:
                initial = r["active"]
            else:
                snaps.append(DeploymentSnapshot(r["day"], r["active"]))
        return cls(snaps, initial)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "DeploymentPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DemandEvent:
    step: int
    origin_id: int
    dest_id: int


@dataclass(frozen=True)
class Order:
    demand: DemandEvent
    vehicle_id: int
    depart_step: int
    arrive_step: int
    trip_km: float
    price_milli: int

    @property
    def price(self) -> float:
        return from_milli(self.price_milli)


@dataclass(frozen=True)
class Region:
    id: int
    member_ids: tuple[int, ...]
    hull: tuple[tuple[float, float], ...] = ()


def order_price_milli(per_minute_rate: float, depart_step: int, arrive_step: int) -> int:
    return to_milli(per_minute_rate * MINUTES_PER_STEP) * (arrive_step - depart_step)


def _check_ids(active: Iterable[int], n: int) -> list[int]:
    return sorted(i for i in active if not 0 <= i < n)


def snapshot_cost_milli(snapshot: DeploymentSnapshot | Iterable[int], pool: CandidatePool) -> int:
    active = snapshot.active if isinstance(snapshot, DeploymentSnapshot) else frozenset(snapshot)
    bad = _check_ids(active, len(pool))
    if bad:
        raise ValidationError(f"unknown station id(s) {bad}")
    if not active:
        return 0
    return int(pool.cost_milli[np.fromiter(active, dtype=np.int64)].sum())


def snapshot_cost(snapshot: DeploymentSnapshot | Iterable[int], pool: CandidatePool) -> float:
    """Sum of daily costs over the active stations."""
    return from_milli(snapshot_cost_milli(snapshot, pool))


def plan_cost(plan: DeploymentPlan, pool: CandidatePool) -> float:
    return from_milli(sum(snapshot_cost_milli(s, pool) for s in plan.snapshots))


def snapshot_diff(prev, nxt) -> tuple[frozenset[int], frozenset[int]]:
    """Return (opened, closed) going from ``prev`` to ``nxt``."""
    a = prev.active if isinstance(prev, DeploymentSnapshot) else frozenset(prev)
    b = nxt.active if isinstance(nxt, DeploymentSnapshot) else frozenset(nxt)
    return b - a, a - b


def validate_plan(plan: DeploymentPlan, pool: CandidatePool, T: int | None = None) -> list[str]:
    """Return a list of problems; an empty list means the plan is well formed."""
    errors: list[str] = []
    n = len(pool)
    if T is not None and plan.T != T:
        errors.append(f"plan length {plan.T} != episode length {T}")
    bad = _check_ids(plan.initial or (), n)
    if bad:
        errors.append(f"day 0: unknown station {bad}")
    for i, snap in enumerate(plan.snapshots):
        if snap.day != i + 1:
            errors.append(f"day {snap.day}: non-contiguous days (expected {i + 1})")
        bad = _check_ids(snap.active, n)
        if bad:
            errors.append(f"day {snap.day}: unknown station {bad}")
    return errors


def trip_steps(trip_km: float, speed_kmh: float) -> int:
    minutes = trip_km / speed_kmh * 60.0
    return max(1, int(np.ceil(minutes / MINUTES_PER_STEP - 1e-9)))


def day_of(global_step: int) -> int:
    return global_step // STEPS_PER_DAY
