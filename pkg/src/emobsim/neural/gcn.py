"""Next-day pick-up/return demand forecasting on the candidate graph."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..scenario import WEEKDAY, WEEKEND, Scenario, daytype_of

WINDOW = 3
N_FEATURES = 2 * WINDOW + 3


def candidate_graph(locs: np.ndarray, radius_km: float = 2.0, k_fallback: int = 4) -> np.ndarray:
    """Symmetric adjacency: pairs within ``radius_km``; isolated nodes get their k nearest."""
    d = np.sqrt(((locs[:, None, :] - locs[None, :, :]) ** 2).sum(-1))
    a = (d <= radius_km).astype(float)
    np.fill_diagonal(a, 0.0)
    for i in np.flatnonzero(a.sum(1) == 0):
        nn = [j for j in np.argsort(d[i], kind="stable") if j != i][:k_fallback]
        a[i, nn] = a[nn, i] = 1.0
    return a


def normalized_adjacency(a: np.ndarray) -> np.ndarray:
    a = a + np.eye(len(a))
    dinv = 1.0 / np.sqrt(a.sum(1))
    return a * dinv[:, None] * dinv[None, :]


def prior_counts(scenario: Scenario, day: int) -> tuple[np.ndarray, np.ndarray]:
    """Expected pick-up/return demand per station from the scenario's own intensity field."""
    dt = daytype_of(day)
    rates = scenario.rates[dt]
    picks = rates.sum(0)
    rets = np.zeros(scenario.n)
    for h in range(24):
        p = scenario.demand_field.od_matrix(scenario.pool.locs, dt, h)
        rets += rates[h * 6:(h + 1) * 6].sum(0) @ p
    return picks, rets


def _window(history: Sequence, attr: str) -> np.ndarray:
    days = [getattr(t, attr) for t in history[-WINDOW:]]
    while len(days) < WINDOW:
        days.insert(0, days[0])
    return np.stack(days[::-1], axis=1).astype(float)  # most recent first


class MovingAveragePredictor:
    """Mean of the last three days' requested pick-ups and returns."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario

    def predict(self, history: Sequence, day: int, active=None) -> tuple[np.ndarray, np.ndarray]:
        if not history:
            return prior_counts(self.scenario, day)
        return _window(history, "demand").mean(1), _window(history, "demand_dest").mean(1)


@dataclass
class GCNPredictor:
    """Two-layer graph convolution regressor on the candidate graph.

    Inputs per node: last three days of requested pick-ups and returns, the
    active flag, dock count and the weekend flag of the predicted day.
    """

    adj: np.ndarray
    docks: np.ndarray
    scale: float = 1.0
    hidden: int = 32
    seed: int = 0
    params: dict = field(default_factory=dict)
    scenario: Scenario | None = field(default=None, repr=False)

    @classmethod
    def for_scenario(cls, scenario: Scenario, hidden: int = 32, seed: int = 0) -> "GCNPredictor":
        adj = normalized_adjacency(candidate_graph(scenario.pool.locs))
        p = cls(adj, scenario.pool.docks.astype(float), hidden=hidden, seed=seed, scenario=scenario)
        p.init_params()
        return p

    def init_params(self) -> None:
        rng = np.random.default_rng(self.seed)
        h = self.hidden
        self.params = {
            "W1": rng.normal(0, np.sqrt(1.0 / N_FEATURES), (2 * N_FEATURES, h)),
            "b1": np.zeros(h),
            "W2": rng.normal(0, 0.01 * np.sqrt(0.5 / h), (2 * h, 2)),
            "b2": np.zeros(2),
        }

    def features(self, history: Sequence, day: int, active=None) -> np.ndarray:
        n = len(self.docks)
        picks = _window(history, "demand") / self.scale
        rets = _window(history, "demand_dest") / self.scale
        act = history[-1].active.astype(float) if active is None else np.asarray(active, float)
        weekend = np.full((n, 1), float(daytype_of(day) == WEEKEND))
        return np.hstack([picks, rets, act[:, None], (self.docks / 20.0)[:, None], weekend])

    def _forward(self, X):
        p = self.params
        # each layer sees the neighbourhood average and the node's own input
        AX = np.hstack([self.adj @ X, X])
        Z1 = AX @ p["W1"] + p["b1"]
        H = np.maximum(Z1, 0.0)
        AH = np.hstack([self.adj @ H, H])
        # residual on the window mean, so an untrained net is the moving-average forecast
        base = np.column_stack([X[:, :WINDOW].mean(1), X[:, WINDOW:2 * WINDOW].mean(1)])
        Y = base + AH @ p["W2"] + p["b2"]
        return Y, (AX, Z1, H, AH)

    def predict(self, history: Sequence, day: int, active=None) -> tuple[np.ndarray, np.ndarray]:
        if not history:
            if self.scenario is None:
                raise ValueError("cold start needs the scenario prior")
            return prior_counts(self.scenario, day)
        Y, _ = self._forward(self.features(history, day, active))
        Y = np.maximum(Y, 0.0) * self.scale
        return Y[:, 0], Y[:, 1]

    def loss_and_grads(self, X: np.ndarray, T: np.ndarray) -> tuple[float, dict]:
        p = self.params
        Y, (AX, Z1, H, AH) = self._forward(X)
        diff = Y - T
        loss = float((diff ** 2).mean())
        dY = 2.0 * diff / diff.size
        g = {"W2": AH.T @ dY, "b2": dY.sum(0)}
        dAH = dY @ p["W2"].T
        h = dAH.shape[1] // 2
        dH = self.adj.T @ dAH[:, :h] + dAH[:, h:]
        dZ1 = dH * (Z1 > 0)
        g["W1"] = AX.T @ dZ1
        g["b1"] = dZ1.sum(0)
        return loss, g

    def fit(self, histories: Sequence[Sequence], epochs: int = 300, lr: float = 1e-2,
            zero_share: float = 0.1) -> list[float]:
        """Train on consecutive-day windows drawn from simulated histories (warm-up day included)."""
        samples = []
        for hist in histories:
            for d in range(1, len(hist)):
                samples.append((hist[:d], hist[d]))
        if not samples:
            raise ValueError("need at least two simulated days of history")
        self.scale = float(np.mean([t.demand.mean() for _, t in samples])) or 1.0
        data = [(self.features(h, t.day), np.column_stack([t.demand, t.demand_dest]) / self.scale)
                for h, t in samples]
        n = len(self.docks)
        n_zero = int(round(zero_share * len(data)))
        for i in range(n_zero):
            X = np.zeros((n, N_FEATURES))
            X[:, 2 * WINDOW] = data[i % len(data)][0][:, 2 * WINDOW]
            X[:, 2 * WINDOW + 1] = self.docks / 20.0
            data.append((X, np.zeros((n, 2))))
        rng = np.random.default_rng(self.seed + 1)
        m = {k: np.zeros_like(v) for k, v in self.params.items()}
        v2 = {k: np.zeros_like(v) for k, v in self.params.items()}
        b1, b2, eps = 0.9, 0.999, 1e-8
        curve, step = [], 0
        for _ in range(epochs):
            tot = 0.0
            for i in rng.permutation(len(data)):
                loss, g = self.loss_and_grads(*data[i])
                tot += loss
                step += 1
                for k in self.params:
                    m[k] = b1 * m[k] + (1 - b1) * g[k]
                    v2[k] = b2 * v2[k] + (1 - b2) * g[k] ** 2
                    mh = m[k] / (1 - b1 ** step)
                    vh = v2[k] / (1 - b2 ** step)
                    self.params[k] -= lr * mh / (np.sqrt(vh) + eps)
            curve.append(tot / len(data))
        return curve

    def to_json(self) -> dict:
        return {"scale": self.scale, "hidden": self.hidden, "seed": self.seed,
                "params": {k: v.tolist() for k, v in self.params.items()}}

    def load_json(self, d: dict) -> "GCNPredictor":
        self.scale = float(d["scale"])
        self.params = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        return self


def predict_demand(predictor, history: Sequence, day: int, active=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-candidate expected next-day pick-up and return counts."""
    return predictor.predict(history, day, active)


__all__ = ["GCNPredictor", "MovingAveragePredictor", "candidate_graph", "normalized_adjacency",
           "predict_demand", "prior_counts", "WEEKDAY"]
