import functools
from types import SimpleNamespace

import numpy as np
import pytest

import emobsim.trainer as trainer_mod
from emobsim.metrics import DayMetrics, EpisodeReport
from emobsim.neural.policy import PolicyParams, high_level_step, init_params, ppo_loss, sample_levels
from emobsim.neural.search import prepare_controller
from emobsim.trainer import (
    Rollout, TrainConfig, WorkerPool, collect_rollouts, compute_advantages, grid_search_lambda, job_seed,
    lambda_grid, make_batch, ppo_update, train,
)
from emobsim.neural.policy import Adam

BANDIT_DIM = 4


def bandit_job(controller, params, job_id, seed, target=(0, 0), regions=1):
    """One-step bandit: reward 1 when the sampled (add, remove) levels equal ``target``."""
    rng = np.random.default_rng(seed)
    obs = np.full((1, regions, BANDIT_DIM), 0.5)
    out = high_level_step(params, obs[0])
    a, r, logp = sample_levels(out, rng)
    reward = ((a == target[0]) & (r == target[1])).astype(float)
    day = DayMetrics(1, int(reward.mean() * 1000), 0, float(reward.mean()), float(reward.mean()),
                     float(reward.mean()), 0.0)
    return Rollout(job_id, seed, None, obs, a[None], r[None], logp[None], out.value[None], reward[None],
                   EpisodeReport([day], 1.0))


def target_prob(params, target):
    out = high_level_step(params, np.full((1, BANDIT_DIM), 0.5))
    return float(out.p_add[0, target[0]] * out.p_rem[0, target[1]])


@pytest.fixture(scope="module")
def controller(small_scenario):
    return prepare_controller(small_scenario, region_size=10, predictor="moving_average", lam=0.0)


# ----------------------------------------------------------------- advantages
def test_gae_one_step_case():
    r = np.array([[1.0], [2.0], [0.5]])
    v = np.array([[0.3], [0.1], [0.7]])
    adv, ret = compute_advantages(r, v, gamma=0.0, lam=0.95, normalize=False)
    assert np.allclose(adv, r - v) and np.allclose(ret, r)


def test_returns_geometric_example():
    _, ret = compute_advantages(np.ones((3, 1)), np.zeros((3, 1)), 0.99, 0.95, normalize=False)
    assert np.allclose(ret[:, 0], [2.9701, 1.99, 1.0])


def test_gae_by_hand():
    r = np.array([[1.0], [0.0]])
    v = np.array([[0.5], [0.2]])
    adv, _ = compute_advantages(r, v, 0.9, 0.8, normalize=False)
    d1 = 0.0 - 0.2
    d0 = 1.0 + 0.9 * 0.2 - 0.5
    assert np.allclose(adv[:, 0], [d0 + 0.9 * 0.8 * d1, d1])


def test_equal_rewards_exact_values_zero_advantage():
    _, ret = compute_advantages(np.ones((4, 3)), np.zeros((4, 3)), 0.99, 0.95, normalize=False)
    adv, _ = compute_advantages(np.ones((4, 3)), ret, 0.99, 0.95, normalize=True)
    assert np.allclose(adv, 0.0)


def test_normalized_advantages():
    rng = np.random.default_rng(0)
    adv, _ = compute_advantages(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
    assert abs(adv.mean()) < 1e-12 and abs(adv.std() - 1) < 1e-12


# ----------------------------------------------------------------- config, seeds, rollouts
def test_train_config_validation():
    for bad in ({"clip": 0.0}, {"clip": 1.0}, {"K": 0}, {"plan_budget": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    tc = TrainConfig.from_dict({"K": 3, "unknown": 1})
    assert tc.K == 3 and TrainConfig.from_dict(tc.to_dict()) == tc


def test_job_seed_contract():
    assert job_seed(0, 5) == job_seed(0, 5)
    assert len({job_seed(m, j) for m in range(3) for j in range(100)}) == 300
    assert 0 <= job_seed(2**63, 7) < 2**63


def test_rollout_invariants(controller):
    r = bandit_job(None, init_params(BANDIT_DIM, 3, hidden=8), 0, 1)
    assert len(r.records()) == 1 and len(r.records()[0][0]) == 16
    with pytest.raises(ValueError):
        Rollout(0, 0, None, r.obs, r.a_add, r.a_rem, r.logp, r.values, np.array([[np.nan]]), r.report)
    with pytest.raises(ValueError):
        Rollout(0, 0, None, r.obs, r.a_add, r.a_rem, r.logp, np.zeros((2, 1)), r.rewards, r.report)


def test_empty_batch(controller):
    with WorkerPool(controller, 1) as pool:
        assert collect_rollouts(controller.new_params(hidden=8), pool, [], 0) == []


def test_rollout_lengths(controller):
    with WorkerPool(controller, 1) as pool:
        rolls = collect_rollouts(controller.new_params(hidden=8), pool, range(2), 0)
    T, N = controller.scenario.episode_days, controller.partition.N
    assert [r.job_id for r in rolls] == [0, 1]
    assert all(len(r.records()) == T * N and r.rewards.shape == (T, N) for r in rolls)


def test_first_epoch_ratio_is_one(controller):
    p = controller.new_params(seed=1, hidden=8)
    with WorkerPool(controller, 1) as pool:
        rolls = collect_rollouts(p, pool, range(4), 3)
    batch = make_batch(rolls, 0.99, 0.95)
    _, _, st = ppo_loss(p, batch, need_grad=False)
    assert abs(st["ratio_mean"] - 1) < 1e-6 and st["clip_frac"] == 0.0
    # with every ratio 1 the surrogate is the mean advantage
    assert st["policy_loss"] == pytest.approx(-batch.adv.mean(), abs=1e-12)
    stats = ppo_update(p, Adam(), batch, TrainConfig(), np.random.default_rng(0))
    assert abs(stats["first_ratio_mean"] - 1) < 1e-6 and stats["skipped"] == 0


def test_non_finite_loss_skips_update(caplog):
    p = init_params(BANDIT_DIM, 3, hidden=8)
    rolls = [bandit_job(None, p, j, j) for j in range(4)]
    batch = make_batch(rolls, 0.99, 0.95)
    batch.ret[:] = np.inf
    before = p.flat().copy()
    stats = ppo_update(p, Adam(), batch, TrainConfig(), np.random.default_rng(0))
    assert stats["skipped"] > 0 and np.array_equal(before, p.flat())


# ----------------------------------------------------------------- workers
def flaky_job(controller, params, job_id, seed, fails=None):
    if fails is not None and fails.get(job_id, 0) > 0:
        fails[job_id] -= 1
        raise RuntimeError("worker crashed")
    return bandit_job(controller, params, job_id, seed)


def test_failed_job_retried_once():
    p = init_params(BANDIT_DIM, 3, hidden=8)
    pool = WorkerPool(None, 1)
    fails = {2: 1}
    out = pool.run(p, [(j, j) for j in range(4)], fn=functools.partial(flaky_job, fails=fails))
    assert [r.job_id for r in out] == [0, 1, 2, 3]
    with pytest.raises(RuntimeError, match="aborted"):
        pool.run(p, [(j, j) for j in range(4)], fn=functools.partial(flaky_job, fails={1: 2}))


def test_parallel_failed_job_retried():
    p = init_params(BANDIT_DIM, 3, hidden=8)
    with WorkerPool(None, 2) as pool:
        with pytest.raises(RuntimeError, match="aborted"):
            pool.run(p, [(j, j) for j in range(3)], fn=functools.partial(flaky_job, fails={1: 5}))


def test_w1_w4_identical(controller):
    cfg = TrainConfig(K=4, plan_budget=8, hidden=8, master_seed=3)
    a = train(controller, cfg)
    b = train(controller, TrainConfig(**{**cfg.to_dict(), "workers": 4}))
    assert a.curve == b.curve
    assert a.params.to_bytes() == b.params.to_bytes()


# ----------------------------------------------------------------- training loop
def test_budget_zero_initial_checkpoint_only(controller, tmp_path):
    res = train(controller, TrainConfig(plan_budget=0, hidden=8), tmp_path)
    assert [f.name for f in (tmp_path / "checkpoints").iterdir()] == ["ckpt_000000.bin"]
    assert res.curve == [] and PolicyParams.load(tmp_path / "last.bin").to_bytes() == res.params.to_bytes()
    assert (tmp_path / "learning_curve.csv").read_text().strip() == ",".join(trainer_mod.CURVE_COLUMNS)


def test_train_outputs_and_interruption(controller, tmp_path):
    cfg = TrainConfig(K=2, plan_budget=6, hidden=8, checkpoint_every=1)

    def stop(row, stats):
        if row["plans_evaluated"] >= 4:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(controller, cfg, tmp_path, progress=stop)
    last = PolicyParams.load(tmp_path / "last.bin")
    assert last.is_finite() and last.meta["scenario_digest"] == controller.scenario.digest()
    assert sorted(f.name for f in (tmp_path / "checkpoints").iterdir()) == [
        "ckpt_000000.bin", "ckpt_000002.bin", "ckpt_000004.bin"]
    lines = (tmp_path / "learning_curve.csv").read_text().splitlines()
    assert lines[0] == ",".join(trainer_mod.CURVE_COLUMNS) and len(lines) == 3


def run_bandit(target, seed, updates, ent_coef=0.01):
    cfg = TrainConfig(K=8, plan_budget=8 * updates, ent_coef=ent_coef, master_seed=seed)
    p0 = init_params(BANDIT_DIM, 3, hidden=16, seed=seed)
    return train(None, cfg, params=p0, rollout_fn=functools.partial(bandit_job, target=target))


def test_bandit_no_entropy_converges():
    res = run_bandit((2, 1), 0, 200, ent_coef=0.0)
    assert target_prob(res.params, (2, 1)) >= 0.95


def test_hardwired_zero_prior_reward():
    res = run_bandit((0, 0), 1, 200)
    assert target_prob(res.params, (0, 0)) >= 0.9


# ----------------------------------------------------------------- lambda grid
def test_lambda_grid_defaults():
    assert lambda_grid(0.004) == [0.0, 0.002, 0.004, 0.008]


def test_grid_single_candidate(controller):
    assert grid_search_lambda(controller, [0.3], TrainConfig())[0] == 0.3


def fake_grid(monkeypatch, results):
    """Short runs return λ as their params; the greedy check reads (objective, infeasible rate) from ``results``."""
    def _train(ctl, cfg, *a, **k):
        return trainer_mod.TrainResult(ctl.reward.lam, None, 0.0, [])

    def _evaluate(ctl, params, seeds, mode="greedy", pool=None):
        obj, inf = results[params]
        return [SimpleNamespace(objective=obj, infeasible_days=round(inf * 20), per_day=[None] * 20) for _ in seeds]
    monkeypatch.setattr(trainer_mod, "train", _train)
    monkeypatch.setattr(trainer_mod, "evaluate_params", _evaluate)


def test_grid_tie_and_feasibility_rules(controller, monkeypatch):
    fake_grid(monkeypatch, {0.0: (1.0, 0.0), 0.5: (1.0, 0.0), 1.0: (0.9, 0.0)})
    assert grid_search_lambda(controller, [1.0, 0.5, 0.0], TrainConfig())[0] == 0.0
    fake_grid(monkeypatch, {0.0: (1.2, 0.1), 0.5: (1.0, 0.0), 1.0: (1.1, 0.05)})
    best, rows = grid_search_lambda(controller, [0.0, 0.5, 1.0], TrainConfig(plan_budget=100))
    assert best == 1.0 and [r["lam"] for r in rows] == [0.0, 0.5, 1.0]
    assert rows[0]["infeasible_day_rate"] == 0.1


def test_grid_falls_back_to_lowest_infeasible_rate(controller, monkeypatch):
    fake_grid(monkeypatch, {0.0: (1.2, 0.5), 0.5: (1.0, 0.2), 1.0: (0.8, 0.2)})
    assert grid_search_lambda(controller, [0.0, 0.5, 1.0], TrainConfig())[0] == 0.5
