"""Closed-loop plan generation with the hierarchical controller (MANS)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..domain import DeploymentPlan
from ..metrics import EpisodeReport, RewardConfig, agent_rewards, region_metrics
from ..scenario import Scenario
from ..simulator import Episode
from .features import Normalizer, build_observations, candidate_features, obs_dim
from .gcn import GCNPredictor, MovingAveragePredictor
from .lowlevel import ALPHA, low_level_select, score_candidates
from .policy import PolicyParams, high_level_step, init_params, sample_levels, zero_hidden
from .regions import RegionPartition, partition_regions

log = logging.getLogger(__name__)

DEFAULT_SCALE = (0.0, 0.1, 0.2)
PAPER_SCALES = ((0.0, 0.05, 0.1), (0.0, 0.1, 0.2), (0.0, 0.15, 0.3), (0.0, 0.2, 0.4))


def level_count(fraction: float, M: int) -> int:
    return int(np.floor(fraction * M + 0.5))


@dataclass
class Trajectory:
    obs: np.ndarray  # (T, N, D)
    a_add: np.ndarray  # (T, N)
    a_rem: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray


@dataclass
class Controller:
    """Everything besides the policy weights that plan generation needs."""

    scenario: Scenario
    partition: RegionPartition
    predictor: object
    normalizer: Normalizer
    action_scale: tuple[float, ...] = DEFAULT_SCALE
    eps: float = 0.1
    reward: RewardConfig = field(default_factory=RewardConfig)
    alpha: float = ALPHA
    partition_seed: int = 0

    @property
    def obs_dim(self) -> int:
        return obs_dim(self.partition.M)

    @property
    def region_pois(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.partition.poi_region == i) for i in range(self.partition.N)]

    def new_params(self, seed: int = 0, hidden: int = 64) -> PolicyParams:
        return init_params(self.obs_dim, len(self.action_scale), hidden=hidden, seed=seed, meta=self.meta())

    def meta(self) -> dict:
        pred = self.predictor.to_json() if isinstance(self.predictor, GCNPredictor) else None
        return {
            "scenario_digest": self.scenario.digest(),
            "region_size": self.partition.M,
            "partition_seed": self.partition_seed,
            "action_scale": list(self.action_scale),
            "epsilon": self.eps,
            "alpha": self.alpha,
            "w": self.reward.w,
            "lam": self.reward.lam,
            "gamma": self.reward.gamma,
            "normalizer": self.normalizer.to_json(),
            "predictor": pred,
        }

    @classmethod
    def from_meta(cls, scenario: Scenario, meta: dict) -> "Controller":
        part = partition_regions(scenario.pool, int(meta["region_size"]), seed=int(meta["partition_seed"]))
        if meta.get("predictor"):
            pred = GCNPredictor.for_scenario(scenario, hidden=int(meta["predictor"]["hidden"]),
                                             seed=int(meta["predictor"]["seed"])).load_json(meta["predictor"])
        else:
            pred = MovingAveragePredictor(scenario)
        return cls(scenario, part, pred, Normalizer.from_json(meta["normalizer"]),
                   tuple(meta["action_scale"]), float(meta["epsilon"]),
                   RewardConfig(float(meta["w"]), float(meta["lam"]), float(meta["gamma"])),
                   float(meta["alpha"]), int(meta["partition_seed"]))

    # ---------------------------------------------------------------------------------
    def decide(self, params: PolicyParams, ep: Episode, hidden, prev, rng: np.random.Generator,
               greedy: bool = False, forced_levels=None):
        """One day of joint decisions; returns (snapshot, obs, levels, logp, values, hidden)."""
        scen = self.scenario
        day = ep.day + 1
        hist = [ep.warmup] + ep.history
        active_mask = ep.state.active.copy()
        picks, rets = self.predictor.predict(hist, day, active_mask)
        cand = candidate_features(scen, ep.last, active_mask, picks, rets)
        obs = build_observations(cand, self.partition, self.normalizer, prev.sc, prev.pm, prev.nv,
                                 day, scen.episode_days)
        out = high_level_step(params, obs, hidden)
        if forced_levels is not None:
            a_add, a_rem = (np.asarray(v) for v in forced_levels)
            idx = np.arange(len(a_add))
            logp = np.log(out.p_add[idx, a_add]) + np.log(out.p_rem[idx, a_rem])
        else:
            a_add, a_rem, logp = sample_levels(out, rng, greedy)
        M = self.partition.M
        new_active = set(np.flatnonzero(active_mask).tolist())
        for i, region in enumerate(self.partition.regions):
            ranking, _ = score_candidates(region.member_ids, active_mask, scen.poi_cover,
                                          self.region_pois[i], picks, self.alpha)
            region_active = [s for s in region.member_ids if active_mask[s]]
            n_open = level_count(self.action_scale[a_add[i]], M)
            n_close = level_count(self.action_scale[a_rem[i]], M)
            opened, closed = low_level_select(ranking, n_open, n_close, self.eps, rng, region_active)
            new_active |= opened
            new_active -= closed
        return frozenset(new_active), obs, a_add, a_rem, logp, out.value, out.hidden

    def generate_plan(self, params: PolicyParams, seed: int, mode: str = "sample",
                      check_invariants: bool = False, forced_levels=None
                      ) -> tuple[DeploymentPlan, Trajectory, EpisodeReport]:
        """Interleave daily decisions with simulation; ``mode`` is 'sample' or 'greedy'."""
        if mode not in ("sample", "greedy"):
            raise ValueError(f"unknown rollout mode {mode!r}")
        scen = self.scenario
        ep = Episode(scen, seed, check_invariants)
        ep.start(scen.initial_active)
        member = self.partition.membership
        prev = region_metrics(ep.warmup, member, self.partition.poi_region, scen)
        hidden = zero_hidden(self.partition.N, params.hidden)
        rng = ep.planner_rng
        T = scen.episode_days
        rec = {k: [] for k in ("obs", "a_add", "a_rem", "logp", "values", "rewards")}
        for t in range(T):
            fl = None if forced_levels is None else forced_levels(t)
            snap, obs, a_add, a_rem, logp, value, hidden = self.decide(
                params, ep, hidden, prev, rng, greedy=(mode == "greedy"), forced_levels=fl)
            tallies = ep.step(snap)
            cur = region_metrics(tallies, member, self.partition.poi_region, scen)
            rec["rewards"].append(agent_rewards(prev, cur, self.reward))
            prev = cur
            for k, v in (("obs", obs), ("a_add", a_add), ("a_rem", a_rem), ("logp", logp), ("values", value)):
                rec[k].append(v)
        traj = Trajectory(*(np.asarray(rec[k]) for k in ("obs", "a_add", "a_rem", "logp", "values", "rewards")))
        return ep.plan(), traj, ep.report(self.reward.w)


def generate_plan(params: PolicyParams, controller: Controller, seed: int, mode: str = "sample"):
    return controller.generate_plan(params, seed, mode)


def _baseline_history(scenario: Scenario, name: str, seed: int) -> list:
    from ..baselines import make_planner

    ep = Episode(scenario, seed)
    ep.start(scenario.initial_active)
    planner = make_planner(name)
    planner.reset(scenario, ep)
    for _ in range(scenario.episode_days):
        ep.step(planner.next_snapshot(ep))
    return [ep.warmup] + ep.history


def default_lambda(region_nv: list[np.ndarray]) -> float:
    """1 / mean |regional daily NV|, so the penalty is O(1) per region-day."""
    m = float(np.mean(np.abs(np.concatenate([np.ravel(v) for v in region_nv])))) if region_nv else 0.0
    return 1.0 / m if m > 0 else 0.0


def prepare_controller(scenario: Scenario, region_size: int = 20, partition_seed: int = 0, w: float = 1.0,
                       lam: float | None = None, action_scale=DEFAULT_SCALE, eps: float = 0.1,
                       predictor: str = "gcn", prep_seeds=(100_001, 100_002), gcn_epochs: int = 150
                       ) -> Controller:
    """Partition, demand predictor and feature statistics from baseline rollouts.

    The predictor learns from FD, COV and IO histories (so it sees varied deployments);
    the normalizer and the default λ come from FD alone.
    """
    part = partition_regions(scenario.pool, region_size, seed=partition_seed)
    fd_hist = [_baseline_history(scenario, "fd", s) for s in prep_seeds]
    if predictor == "gcn":
        hists = fd_hist + [_baseline_history(scenario, k, s) for k in ("cov", "io") for s in prep_seeds]
        pred = GCNPredictor.for_scenario(scenario, seed=partition_seed)
        pred.fit(hists, epochs=gcn_epochs)
    elif predictor == "moving_average":
        pred = MovingAveragePredictor(scenario)
    else:
        raise ValueError(f"unknown predictor {predictor!r}")
    rows, nvs = [], []
    for hist in fd_hist:
        for d in range(1, len(hist)):
            picks, rets = pred.predict(hist[:d], hist[d].day, hist[d].active)
            rows.append(candidate_features(scenario, hist[d - 1], hist[d].active, picks, rets))
            nvs.append(region_metrics(hist[d], part.membership, part.poi_region, scenario).nv)
    norm = Normalizer.fit(rows, nvs)
    if lam is None:
        lam = default_lambda(nvs)
    return Controller(scenario, part, pred, norm, tuple(action_scale), eps,
                      RewardConfig(w=w, lam=lam), ALPHA, partition_seed)
