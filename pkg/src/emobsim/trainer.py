"""PPO training over a pool of simulation workers, lambda grid search, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .domain import DeploymentPlan
from .metrics import EpisodeReport, RewardConfig
from .neural.policy import Adam, PolicyParams, PPOBatch, clip_grad_norm, ppo_loss
from .neural.search import Controller

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("plans_evaluated", "mean_objective", "mean_sc", "mean_nv", "infeasible_day_rate")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    K: int = 8  # rollouts per update
    plan_budget: int = 2000
    workers: int = 1
    master_seed: int = 0
    epochs: int = 4
    minibatches: int = 4
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    max_grad_norm: float = 0.5
    hidden: int = 64
    checkpoint_every: int = 25  # updates

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.plan_budget < 0 or self.workers < 1:
            raise ValueError("plan_budget must be >= 0 and workers >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


def job_seed(master_seed: int, job_id: int) -> int:
    """Per-job seed derived as a hash of (master seed, job id)."""
    h = hashlib.sha256(f"{int(master_seed)}:{int(job_id)}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class Rollout:
    job_id: int
    seed: int
    plan: DeploymentPlan
    obs: np.ndarray  # (T, N, D)
    a_add: np.ndarray  # (T, N)
    a_rem: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    report: EpisodeReport

    def __post_init__(self):
        shape = self.a_add.shape
        for name in ("a_rem", "logp", "values", "rewards"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"rollout field {name} has shape {getattr(self, name).shape}, expected {shape}")
        if not np.isfinite(self.rewards).all():
            raise ValueError("non-finite reward in rollout")

    @property
    def obs_hash(self) -> np.ndarray:
        """(T, N) array of short hex digests of each observation row."""
        T, N = self.a_add.shape
        out = np.empty((T, N), dtype=object)
        for t in range(T):
            for i in range(N):
                out[t, i] = hashlib.sha1(np.ascontiguousarray(self.obs[t, i]).tobytes()).hexdigest()[:16]
        return out

    def records(self) -> list[tuple]:
        """Per-day per-region (obs hash, (add, rem) prior, log-prob, value, reward)."""
        hashes = self.obs_hash
        T, N = self.a_add.shape
        return [(hashes[t, i], (int(self.a_add[t, i]), int(self.a_rem[t, i])), float(self.logp[t, i]),
                 float(self.values[t, i]), float(self.rewards[t, i])) for t in range(T) for i in range(N)]


# --------------------------------------------------------------------------- workers
_WORKER: dict = {}


def _init_worker(controller: Controller) -> None:
    logging.disable(logging.WARNING)
    _WORKER["controller"] = controller


def _run_job(controller: Controller, params: PolicyParams, job_id: int, seed: int, mode: str) -> Rollout:
    plan, traj, report = controller.generate_plan(params, seed, mode)
    return Rollout(job_id, seed, plan, traj.obs, traj.a_add, traj.a_rem, traj.logp, traj.values,
                   traj.rewards, report)


def _worker_job(params_bytes: bytes, job_id: int, seed: int, mode: str, fn=None):
    controller = _WORKER["controller"]
    params = PolicyParams.from_bytes(params_bytes)
    if fn is not None:
        return fn(controller, params, job_id, seed)
    return _run_job(controller, params, job_id, seed, mode)


class WorkerPool:
    """W simulation workers; W=1 runs in-process, W>1 uses separate processes.

    Each worker holds its own copy of the controller (and thus the scenario).
    """

    def __init__(self, controller: Controller, workers: int = 1):
        self.controller = controller
        self.workers = max(1, int(workers))
        self._ex = None
        if self.workers > 1:
            self._ex = ProcessPoolExecutor(self.workers, initializer=_init_worker, initargs=(controller,))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self._ex is not None:
            self._ex.shutdown(wait=True, cancel_futures=True)
            self._ex = None

    def run(self, params: PolicyParams, jobs: Sequence[tuple[int, int]], mode: str = "sample",
            fn: Callable | None = None) -> list:
        """Execute (job_id, seed) jobs FIFO; results come back in enqueue order."""
        if not jobs:
            return []
        if self._ex is None:
            out = []
            for job_id, seed in jobs:
                out.append(self._retry_local(params, job_id, seed, mode, fn))
            return out
        blob = params.to_bytes()
        futures = [self._ex.submit(_worker_job, blob, j, s, mode, fn) for j, s in jobs]
        out = []
        for (job_id, seed), fut in zip(jobs, futures):
            try:
                out.append(fut.result())
            except Exception as exc:  # retry once, then abort the batch
                log.warning("job %d failed (%s); retrying once", job_id, exc)
                try:
                    out.append(self._ex.submit(_worker_job, blob, job_id, seed, mode, fn).result())
                except Exception as exc2:
                    for f in futures:
                        f.cancel()
                    raise RuntimeError(f"job {job_id} failed twice; batch aborted") from exc2
        return out

    def _retry_local(self, params, job_id, seed, mode, fn):
        for attempt in (0, 1):
            try:
                if fn is not None:
                    return fn(self.controller, params, job_id, seed)
                return _run_job(self.controller, params, job_id, seed, mode)
            except Exception as exc:
                if attempt:
                    raise RuntimeError(f"job {job_id} failed twice; batch aborted") from exc
                log.warning("job %d failed (%s); retrying once", job_id, exc)


def collect_rollouts(params: PolicyParams, pool: WorkerPool, job_ids: Sequence[int], master_seed: int,
                     mode: str = "sample", fn: Callable | None = None) -> list[Rollout]:
    """``fn(controller, params, job_id, seed) -> Rollout`` replaces plan generation (test harnesses)."""
    jobs = [(int(j), job_seed(master_seed, j)) for j in job_ids]
    return pool.run(params, jobs, mode, fn)


# --------------------------------------------------------------------------- PPO
def compute_advantages(rewards: np.ndarray, values: np.ndarray, gamma: float = 0.99, lam: float = 0.95,
                       normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages and discounted returns over axis 0 (days); episodes end after the last day.

    Returns are the discounted reward-to-go, used as value targets.
    """
    r = np.asarray(rewards, float)
    v = np.asarray(values, float)
    T = r.shape[0]
    adv = np.zeros_like(r)
    ret = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    run = np.zeros(r.shape[1:])
    for t in reversed(range(T)):
        nxt = v[t + 1] if t + 1 < T else 0.0
        delta = r[t] + gamma * nxt - v[t]
        last = delta + gamma * lam * last
        adv[t] = last
        run = r[t] + gamma * run
        ret[t] = run
    if normalize:
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    return adv, ret


def make_batch(rollouts: Sequence[Rollout], gamma: float, lam: float) -> PPOBatch:
    """Stack rollouts along the batch axis; each (rollout, region) pair is one sequence."""
    X = np.concatenate([r.obs for r in rollouts], axis=1)
    cat = lambda name: np.concatenate([getattr(r, name) for r in rollouts], axis=1)  # noqa: E731
    adv, ret = compute_advantages(cat("rewards"), cat("values"), gamma, lam, normalize=True)
    return PPOBatch(X, cat("a_add"), cat("a_rem"), cat("logp"), adv, ret)


def ppo_update(params: PolicyParams, opt: Adam, batch: PPOBatch, config: TrainConfig,
               rng: np.random.Generator) -> dict:
    """Epochs of minibatch clipped-surrogate updates in place; returns averaged stats."""
    B = batch.a_add.shape[1]
    n_mb = max(1, min(config.minibatches, B))
    acc: dict = {}
    skipped = 0
    first = None
    for epoch in range(config.epochs):
        order = rng.permutation(B)
        for cols in np.array_split(order, n_mb):
            with np.errstate(invalid="ignore", over="ignore"):  # non-finite results are handled below
                loss, grads, stats = ppo_loss(params, batch.select(np.sort(cols)), config.clip, config.vf_coef,
                                              config.ent_coef)
            if first is None:
                first = stats["ratio_mean"]
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                log.error("non-finite PPO loss (%s); update skipped", loss)
                skipped += 1
                continue
            stats["grad_norm"] = clip_grad_norm(grads, config.max_grad_norm)
            opt.step(params, grads)
            for k, v in stats.items():
                acc.setdefault(k, []).append(v)
    out = {k: float(np.mean(v)) for k, v in acc.items()}
    out["skipped"] = skipped
    out["first_ratio_mean"] = float(first) if first is not None else 1.0
    return out


# --------------------------------------------------------------------------- training loop
@dataclass
class TrainResult:
    params: PolicyParams
    best_params: PolicyParams
    best_objective: float
    curve: list[dict] = field(default_factory=list)
    update_stats: list[dict] = field(default_factory=list)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=CURVE_COLUMNS, extrasaction="ignore")
        wr.writeheader()
        for row in curve:
            wr.writerow(row)


def train(controller: Controller, config: TrainConfig, out_dir=None, params: PolicyParams | None = None,
          pool: WorkerPool | None = None, progress: Callable | None = None,
          rollout_fn: Callable | None = None, plans_done: int = 0) -> TrainResult:
    """Collect K plans, compute advantages, update; repeat until the plan budget is spent.

    ``plans_done`` continues an earlier run of the same config: job ids (and so
    episode seeds) pick up where it stopped and the budget counts both parts.
    """
    params = params.copy() if params is not None else controller.new_params(config.master_seed, config.hidden)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "checkpoints" / f"ckpt_{plans_done:06d}.bin", params.to_bytes())
        _atomic_write(out / "last.bin", params.to_bytes())
        _atomic_write(out / "best.bin", params.to_bytes())
    opt = Adam(config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, 0x99, plans_done]))
    best, best_obj = params.copy(), -np.inf
    result = TrainResult(params, best, best_obj)
    own_pool = pool is None
    pool = pool or WorkerPool(controller, config.workers)
    done, updates = int(plans_done), 0
    try:
        while done < config.plan_budget:
            k = min(config.K, config.plan_budget - done)
            t0 = time.perf_counter()
            rollouts = collect_rollouts(params, pool, range(done, done + k), config.master_seed, fn=rollout_fn)
            done += k
            objs = np.array([r.report.objective for r in rollouts])
            row = {
                "plans_evaluated": done,
                "mean_objective": float(objs.mean()),
                "mean_sc": float(np.mean([r.report.SC for r in rollouts])),
                "mean_nv": float(np.mean([r.report.NV for r in rollouts])),
                "infeasible_day_rate": float(np.mean([r.report.infeasible_days / len(r.report.per_day)
                                                      for r in rollouts])),
            }
            result.curve.append(row)
            if row["mean_objective"] > best_obj:
                best_obj = row["mean_objective"]
                best = params.copy()  # the weights that generated this batch
                if out is not None:
                    _atomic_write(out / "best.bin", best.to_bytes())
            batch = make_batch(rollouts, config.gamma, config.gae_lambda)
            stats = ppo_update(params, opt, batch, config, rng)
            updates += 1
            stats["collect_s"] = time.perf_counter() - t0
            result.update_stats.append(stats)
            if out is not None:
                _atomic_write(out / "last.bin", params.to_bytes())
                if updates % config.checkpoint_every == 0:
                    _atomic_write(out / "checkpoints" / f"ckpt_{done:06d}.bin", params.to_bytes())
                write_curve(out / "learning_curve.csv", result.curve)
            if progress is not None:
                progress(row, stats)
    finally:
        if own_pool:
            pool.close()
    if out is not None:
        write_curve(out / "learning_curve.csv", result.curve)
    result.params, result.best_params, result.best_objective = params, best, best_obj
    return result


def evaluate_params(controller: Controller, params: PolicyParams, seeds: Sequence[int], mode: str = "greedy",
                    pool: WorkerPool | None = None) -> list[EpisodeReport]:
    """Reports for fixed weights on explicit episode seeds (no learning)."""
    own = pool is None
    pool = pool or WorkerPool(controller, 1)
    try:
        rolls = pool.run(params, [(i, int(s)) for i, s in enumerate(seeds)], mode)
    finally:
        if own:
            pool.close()
    return [r.report for r in rolls]


def lambda_grid(lam0: float, multipliers: Sequence[float] = (0.0, 0.5, 1.0, 2.0)) -> list[float]:
    """Default candidates around the scale-matched λ0; 0 keeps the unpenalized objective in play."""
    return sorted({float(m) * float(lam0) for m in multipliers})


VALIDATION_SEEDS = (200_001, 200_002, 200_003)


def grid_search_lambda(controller: Controller, candidates: Sequence[float], config: TrainConfig,
                       fraction: float = 0.2, max_infeasible: float = 0.05,
                       validation_seeds: Sequence[int] = VALIDATION_SEEDS) -> tuple[float, list[dict]]:
    """Short training run per λ, then a greedy check on held-out seeds.

    Candidates with an infeasible-day rate within ``max_infeasible`` are eligible and the best
    greedy objective wins; if none is eligible the lowest rate wins. Ties go to the smaller λ.
    """
    cands = sorted(float(c) for c in candidates)
    if len(cands) == 1:
        return cands[0], []
    short = replace(config, plan_budget=max(config.K, int(round(config.plan_budget * fraction))))
    rows = []
    for lam in cands:
        ctl = replace(controller, reward=replace(controller.reward, lam=lam))
        res = train(ctl, short)
        reps = evaluate_params(ctl, res.params, validation_seeds, "greedy")
        obj = float(np.mean([r.objective for r in reps]))
        inf = sum(r.infeasible_days for r in reps) / sum(len(r.per_day) for r in reps)
        rows.append({"lam": lam, "final_objective": obj, "infeasible_day_rate": inf,
                     "plans": short.plan_budget, "result": res})
        log.info("lambda %.4g: objective %.4f infeasible %.3f", lam, obj, inf)
    ok = [r for r in rows if r["infeasible_day_rate"] <= max_infeasible]
    if ok:
        best = max(ok, key=lambda r: (round(r["final_objective"], 12), -r["lam"]))
    else:
        best = min(rows, key=lambda r: (r["infeasible_day_rate"], r["lam"]))
    return best["lam"], rows


def train_with_grid(controller: Controller, config: TrainConfig, candidates: Sequence[float] | None = None,
                    out_dir=None, fraction: float = 0.2, progress: Callable | None = None
                    ) -> tuple[Controller, TrainResult, list[dict]]:
    """Pick λ by grid search, then continue the winner's short run to the full plan budget.

    ``candidates`` defaults to ``lambda_grid`` around the controller's current λ.
    Returns the controller carrying the chosen λ, the training result and the grid rows.
    """
    cands = lambda_grid(controller.reward.lam) if candidates is None else list(candidates)
    lam, rows = grid_search_lambda(controller, cands, config, fraction)
    ctl = replace(controller, reward=replace(controller.reward, lam=lam))
    params, done = None, 0
    if rows:
        win = next(r for r in rows if r["lam"] == lam)
        params, done = win["result"].params, min(win["plans"], config.plan_budget)
        params.meta = ctl.meta()
    res = train(ctl, config, out_dir, params=params, progress=progress, plans_done=done)
    if rows:
        res.curve = win["result"].curve + res.curve
        if win["result"].best_objective > res.best_objective:
            res.best_params, res.best_objective = win["result"].best_params, win["result"].best_objective
        if out_dir is not None:
            write_curve(Path(out_dir) / "learning_curve.csv", res.curve)
    return ctl, res, rows

