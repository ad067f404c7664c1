"""Per-region observations built from the live simulation state."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scenario import WEEKEND, Scenario, daytype_of
from .regions import RegionPartition

CANDIDATE_FEATURES = (
    "active", "docks", "daily_cost", "mean_parked", "mean_range", "pred_pickups", "pred_returns",
    "order_value", "x", "y",
)
F = len(CANDIDATE_FEATURES)
EXTRAS = ("prev_sc", "prev_pm", "prev_nv", "day_frac", "weekend")


def obs_dim(M: int) -> int:
    return M * F + 2 * F + len(EXTRAS)


def candidate_features(scenario: Scenario, last, active: np.ndarray, picks: np.ndarray,
                       rets: np.ndarray) -> np.ndarray:
    """Raw (n, F) feature matrix; ``last`` is the most recent DayTallies."""
    n = scenario.n
    L = max(scenario.pool.bounds[0], 1e-9) if np.isfinite(scenario.pool.bounds[0]) else 1.0
    if last is not None:
        parked = last.parked_steps / 144.0
        rng_mean = np.divide(last.range_sum, last.parked_steps, out=np.zeros(n),
                             where=last.parked_steps > 0) / scenario.constants.full_range_km
    else:
        parked = np.zeros(n)
        rng_mean = np.zeros(n)
    pool = scenario.pool
    return np.column_stack([
        active.astype(float), pool.docks.astype(float), pool.cost_milli / 1000.0, parked, rng_mean,
        picks, rets, scenario.expected_price, pool.locs[:, 0] / L, pool.locs[:, 1] / L,
    ])


@dataclass
class Normalizer:
    """z-score statistics frozen before training."""

    cand_mean: np.ndarray
    cand_std: np.ndarray
    nv_scale: float

    @classmethod
    def fit(cls, cand_rows: list[np.ndarray], region_nv: list[np.ndarray]) -> "Normalizer":
        X = np.vstack(cand_rows)
        std = X.std(0)
        std[std < 1e-8] = 1.0
        nv = np.concatenate([np.ravel(v) for v in region_nv]) if region_nv else np.ones(1)
        return cls(X.mean(0), std, float(np.abs(nv).mean()) or 1.0)

    def to_json(self) -> dict:
        return {"cand_mean": self.cand_mean.tolist(), "cand_std": self.cand_std.tolist(),
                "nv_scale": self.nv_scale}

    @classmethod
    def from_json(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["cand_mean"], float), np.asarray(d["cand_std"], float), float(d["nv_scale"]))


def build_observations(cand: np.ndarray, partition: RegionPartition, norm: Normalizer,
                       prev_sc: np.ndarray, prev_pm: np.ndarray, prev_nv: np.ndarray,
                       day: int, T: int) -> np.ndarray:
    """(N, D) observation rows: local candidate block, pooled global summary, scalar extras."""
    z = (cand - norm.cand_mean) / norm.cand_std
    members = partition.members
    local = z[members]  # (N, M, F)
    region_mean = local.mean(1)  # (N, F)
    glob = np.concatenate([region_mean.mean(0), region_mean.max(0)])
    N = len(members)
    extras = np.column_stack([
        prev_sc, prev_pm, np.clip(prev_nv / norm.nv_scale, -10, 10),
        np.full(N, day / max(T, 1)), np.full(N, float(daytype_of(day) == WEEKEND)),
    ])
    return np.hstack([local.reshape(N, -1), np.tile(glob, (N, 1)), extras])
