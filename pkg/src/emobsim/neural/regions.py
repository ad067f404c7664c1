"""Balanced spatial partition of the candidate pool into equal-size regions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from sklearn.cluster import KMeans

from ..domain import CandidatePool, Region, ValidationError


@dataclass(frozen=True, eq=False)
class RegionPartition:
    regions: tuple[Region, ...]
    region_of: np.ndarray  # station id -> region id
    poi_region: np.ndarray  # POI index -> region id (region of the nearest candidate)
    centers: np.ndarray

    @property
    def N(self) -> int:
        return len(self.regions)

    @property
    def M(self) -> int:
        return len(self.regions[0].member_ids)

    @property
    def membership(self) -> np.ndarray:
        m = np.zeros((self.N, len(self.region_of)), dtype=np.int8)
        m[self.region_of, np.arange(len(self.region_of))] = 1
        return m

    @property
    def members(self) -> np.ndarray:
        """(N, M) station ids, sorted within each region."""
        return np.array([r.member_ids for r in self.regions], dtype=np.int64)


def _balanced_assign(locs: np.ndarray, centers: np.ndarray, cap: int) -> np.ndarray:
    d = np.sqrt(((locs[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    srt = np.sort(d, axis=1)
    margin = srt[:, 1] - srt[:, 0] if d.shape[1] > 1 else np.zeros(len(locs))
    # points that lose the most by not getting their favourite center go first
    order = np.lexsort((np.arange(len(locs)), -margin))
    load = np.zeros(len(centers), dtype=np.int64)
    out = np.empty(len(locs), dtype=np.int64)
    for i in order:
        for c in np.argsort(d[i], kind="stable"):
            if load[c] < cap:
                out[i] = c
                load[c] += 1
                break
    return out


def _hull(pts: np.ndarray) -> tuple[tuple[float, float], ...]:
    try:
        h = ConvexHull(pts)
        return tuple((float(x), float(y)) for x, y in pts[h.vertices])
    except (QhullError, ValueError):
        return tuple((float(x), float(y)) for x, y in pts)


def partition_regions(pool: CandidatePool, M: int, seed: int = 0, refine_iters: int = 10) -> RegionPartition:
    """k-means seeded centers, then capacity-M greedy assignment refined Lloyd-style."""
    n = len(pool)
    if M < 1 or n % M:
        raise ValidationError(
            f"|pool|={n} is not divisible by region size M={M}; regenerate the scenario with a compatible size"
        )
    N = n // M
    locs = pool.locs
    if N == 1:
        labels = np.zeros(n, dtype=np.int64)
        centers = locs.mean(0, keepdims=True)
    else:
        km = KMeans(n_clusters=N, n_init=10, random_state=seed).fit(locs)
        centers = km.cluster_centers_
        labels = _balanced_assign(locs, centers, M)
        for _ in range(refine_iters):
            centers = np.array([locs[labels == c].mean(0) for c in range(N)])
            new = _balanced_assign(locs, centers, M)
            if (new == labels).all():
                break
            labels = new
        centers = np.array([locs[labels == c].mean(0) for c in range(N)])
    # canonical region order: by center x then y, so ids do not depend on k-means label order
    order = np.lexsort((centers[:, 1], centers[:, 0]))
    remap = np.empty(N, dtype=np.int64)
    remap[order] = np.arange(N)
    labels = remap[labels]
    centers = centers[order]
    regions = tuple(
        Region(i, tuple(int(s) for s in np.flatnonzero(labels == i)), _hull(locs[labels == i]))
        for i in range(N)
    )
    if len(pool.pois):
        dp = ((pool.pois[:, None, :] - locs[None, :, :]) ** 2).sum(-1)
        poi_region = labels[dp.argmin(1)]
    else:
        poi_region = np.zeros(0, dtype=np.int64)
    return RegionPartition(regions, labels, poi_region, centers)
