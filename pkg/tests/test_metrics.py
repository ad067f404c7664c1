import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emobsim.baselines import plan_fixed
from emobsim.metrics import (
    DayMetrics, RegionMetrics, RewardConfig, agent_reward, agent_rewards, episode_objective, poi_coverage,
    profit_margin, region_metrics, service_coverage,
)
from emobsim.simulator import Episode, run_episode


def dm(sc, gmv=0, cost=0, day=1):
    return DayMetrics(day, gmv, cost, 0.0, 0.0, sc, profit_margin(gmv, cost))


def test_service_coverage_examples():
    cover = np.ones((2, 4), dtype=bool)
    assert service_coverage(5, 5, poi_coverage(np.array([True, False]), cover)) == 1.0
    assert service_coverage(0, 7, poi_coverage(np.array([False, False]), cover)) == 0.0
    three = np.array([[1, 1, 1, 0]], dtype=bool)
    assert service_coverage(10, 20, poi_coverage(np.array([True]), three)) == 0.625
    assert service_coverage(0, 0, 0.0) == 0.5  # no demand counts as fully served


def test_profit_margin_examples():
    assert profit_margin(100, 40) == 0.6
    assert profit_margin(0, 0) == 0
    assert profit_margin(10, 100) == -1
    assert profit_margin(0, 5) == -1


def test_episode_objective_examples():
    assert episode_objective([dm(0.5), dm(0.5)], 0).objective == 0.5
    obj = episode_objective([dm(0.5, 100_000, 70_000), dm(0.7, 100_000, 70_000)], 1.0)
    assert obj.sc == pytest.approx(0.6) and obj.pm == pytest.approx(0.3) and obj.objective == pytest.approx(0.9)
    assert episode_objective([dm(0.5, 40, 50)], 1).infeasible == [True]


def test_agent_reward_examples():
    cfg = RewardConfig(w=1.0, lam=0.02)
    assert agent_reward(0.5, 0.2, 0.5, 0.2, 3.0, cfg) == 0
    assert agent_reward(0.4, 0.2, 0.5, 0.3, 5.0, cfg) == pytest.approx(0.2)
    assert agent_reward(0.5, 0.2, 0.5, 0.2, -10.0, cfg) == pytest.approx(-0.2)
    prev = RegionMetrics(np.array([0.4, 0.5]), np.array([0.2, 0.2]), np.array([1.0, 1.0]))
    cur = RegionMetrics(np.array([0.5, 0.5]), np.array([0.3, 0.2]), np.array([5.0, -10.0]))
    assert np.allclose(agent_rewards(prev, cur, cfg), [0.2, -0.2])


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(w=-1)
    with pytest.raises(ValueError):
        RewardConfig(gamma=1.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=10), st.randoms())
def test_objective_sc_permutation_invariant(scs, rnd):
    days = [dm(s, 1000, 500, i) for i, s in enumerate(scs)]
    shuffled = list(days)
    rnd.shuffle(shuffled)
    assert episode_objective(days, 1.0).objective == pytest.approx(episode_objective(shuffled, 1.0).objective)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), min_size=30, max_size=30), st.integers(0, 29))
def test_poi_term_monotone(mask, extra):
    cover = np.random.default_rng(0).random((30, 50)) < 0.08
    m = np.array(mask)
    more = m.copy()
    more[extra] = True
    assert poi_coverage(more, cover) >= poi_coverage(m, cover)


def test_report_accounting_and_schema(small_scenario):
    rep = run_episode(small_scenario, plan_fixed(small_scenario.initial_active, small_scenario.episode_days), 0)
    assert rep.nv_milli == rep.gmv_milli - rep.cost_milli
    assert rep.gmv_milli == sum(d.gmv_milli for d in rep.per_day)
    assert all(d.nv_milli == d.gmv_milli - d.cost_milli for d in rep.per_day)
    d = json.loads(rep.dumps())
    assert set(d) >= {"per_day", "episode"}
    assert set(d["episode"]) >= {"GMV", "NV", "SC", "PM", "objective"}
    row_keys = {"day", "gmv", "cost", "nv", "sc", "demand_satisfied_rate", "poi_coverage", "budget_violated"}
    assert all(row_keys <= set(r) for r in d["per_day"])
    assert all(0 <= r["sc"] <= 1 and 0 <= r["demand_satisfied_rate"] <= 1 for r in d["per_day"])


def test_region_metrics_add_up(small_scenario):
    sc = small_scenario
    ep = Episode(sc, 1)
    ep.start(sc.initial_active)
    t = ep.step(sc.initial_active)
    n_reg = sc.n // 10
    member = np.zeros((n_reg, sc.n), dtype=int)
    member[np.arange(sc.n) % n_reg, np.arange(sc.n)] = 1
    poi_region = np.arange(len(sc.pool.pois)) % n_reg
    rm = region_metrics(t, member, poi_region, sc)
    assert rm.nv.sum() == pytest.approx((t.gmv_total_milli - t.cost_milli) / 1000.0)
    assert ((rm.sc >= 0) & (rm.sc <= 1)).all()
    # unchanged deployment with nonnegative NV gives zero reward
    same = agent_rewards(RegionMetrics(rm.sc, rm.pm, np.abs(rm.nv)), RegionMetrics(rm.sc, rm.pm, np.abs(rm.nv)),
                         RewardConfig(lam=1.0))
    assert np.all(same == 0)
