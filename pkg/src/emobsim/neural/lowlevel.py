"""Low-level controller: candidate scoring and epsilon-greedy open/close selection."""
from __future__ import annotations

from typing import Sequence

import numpy as np

ALPHA = 0.5


def score_candidates(members: Sequence[int], active: np.ndarray, poi_cover: np.ndarray,
                     region_pois: np.ndarray, predicted: np.ndarray, alpha: float = ALPHA
                     ) -> tuple[list[int], np.ndarray]:
    """Rank a region's candidates by alpha * POI share + (1 - alpha) * demand share.

    The POI share of a candidate is the number of region POIs it would cover
    that no other active station already covers, over the region's POI
    count. Returns ids sorted by descending score (ties by id) and the scores
    aligned with ``members``.
    """
    members = np.asarray(members, dtype=np.int64)
    n_pois = len(region_pois)
    poi_term = np.zeros(len(members))
    if n_pois:
        cov = poi_cover[:, region_pois]  # (n_stations, P_region)
        act = np.asarray(active, dtype=bool)
        count = cov[act].sum(0)  # how many active stations cover each POI
        for k, s in enumerate(members):
            others = count - (cov[s] if act[s] else 0)
            poi_term[k] = np.count_nonzero(cov[s] & (others == 0)) / n_pois
    dem = np.asarray(predicted, dtype=float)[members]
    total = dem.sum()
    dem_term = dem / total if total > 0 else np.zeros(len(members))
    scores = alpha * poi_term + (1 - alpha) * dem_term
    order = np.lexsort((members, -scores))
    return [int(members[i]) for i in order], scores


def low_level_select(ranking: Sequence[int], n_open: int, n_close: int, eps: float,
                     rng: np.random.Generator, active) -> tuple[set[int], set[int]]:
    """Pick stations to open (best inactive first) and close (worst active first).

    Each pick is greedy with probability 1 - eps and uniform over the
    remaining eligible candidates otherwise.
    """
    act = set(int(a) for a in active)
    inactive = [s for s in ranking if s not in act]
    active_ranked = [s for s in reversed(ranking) if s in act]  # worst first

    def pick(pool: list[int], k: int) -> set[int]:
        k = min(k, len(pool))
        left = list(pool)
        chosen = set()
        for _ in range(k):
            if eps > 0 and rng.random() < eps:
                s = left.pop(int(rng.integers(len(left))))
            else:
                s = left.pop(0)
            chosen.add(s)
        return chosen

    return pick(inactive, n_open), pick(active_ranked, n_close)
