import logging

import numpy as np
import pytest

from emobsim.domain import CandidatePool, Station
from emobsim.scenario import ScenarioConfig, generate_scenario

# closing stations with no free dock anywhere retires vehicles and logs a warning; too chatty for tests
logging.getLogger("emobsim").setLevel(logging.ERROR)


def small_config(**kw) -> ScenarioConfig:
    base = dict(city_km=8.0, n_stations=40, region_size=10, n_pois=80, episode_days=4, n_hotspots=3,
                daily_demand=500.0)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="session")
def small_scenario():
    return generate_scenario(small_config(), 7)


@pytest.fixture(scope="session")
def reference_scenario():
    return generate_scenario(ScenarioConfig(), 1)


def toy_pool(costs, locs=None, docks=None) -> CandidatePool:
    n = len(costs)
    locs = locs if locs is not None else [(float(i), 0.0) for i in range(n)]
    docks = docks if docks is not None else [10] * n
    st = tuple(Station(i, tuple(locs[i]), int(docks[i]), float(costs[i])) for i in range(n))
    return CandidatePool(st, np.zeros((0, 2)), bounds=(max(100.0, n + 1.0), 100.0))


def toy_scenario(locs, docks, costs=None, pois=None, days=1, initial=(), constants=None):
    """Hand-built scenario with a zero demand field (inject demand explicitly)."""
    from emobsim.domain import PriceField
    from emobsim.scenario import Constants, DemandField, Scenario

    n = len(locs)
    costs = costs if costs is not None else [1.0] * n
    st = tuple(Station(i, (float(locs[i][0]), float(locs[i][1])), int(docks[i]), float(costs[i])) for i in range(n))
    pf = PriceField(1.0, (), (), ())
    pool = CandidatePool(st, np.asarray(pois if pois is not None else np.zeros((0, 2)), float), pf, (50.0, 50.0))
    field_ = DemandField((), 0.0, 1.0, 2.0, 1.0)
    return Scenario(pool, field_, days, 0, constants or Constants(), frozenset(initial), {}, pf)


# one verdict line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
