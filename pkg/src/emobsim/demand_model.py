"""GP regression of per-step demand rates from simulated history."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import STEPS_PER_DAY

log = logging.getLogger(__name__)

SPACE_SCALE_KM = 1.5
TIME_SCALE_H = 2.0
NOISE_VAR = 0.1
MAX_INDUCING = 512
JITTER = 1e-6


def rbf(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unit-variance RBF kernel on pre-scaled inputs."""
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-0.5 * np.maximum(d2, 0.0))


def _scaled(points: np.ndarray, hours: np.ndarray) -> np.ndarray:
    return np.column_stack([points / SPACE_SCALE_KM, np.asarray(hours, float) / TIME_SCALE_H])


def solve_psd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Cholesky solve; retries once with diagonal jitter when A is numerically singular."""
    try:
        return cho_solve(cho_factor(A, lower=True), B)
    except LinAlgError:
        warnings.warn("degenerate kernel matrix, adding jitter 1e-6", RuntimeWarning, stacklevel=2)
        A = A + JITTER * np.eye(len(A))
        return cho_solve(cho_factor(A, lower=True), B)


@dataclass
class FittedDemandModel:
    inducing: np.ndarray
    weights: np.ndarray
    sigma_inv: np.ndarray
    y_mean: float
    y_scale: float

    def predict(self, points, hours) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean rate per step and its variance at (point, hour-of-day) pairs.

        A single point or a single hour is broadcast against the other argument.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        hours = np.atleast_1d(np.asarray(hours, dtype=float))
        m = max(len(pts), len(hours))
        if len(pts) == 1:
            pts = np.repeat(pts, m, axis=0)
        hours = np.broadcast_to(hours, (m,))
        Ks = rbf(_scaled(pts, hours), self.inducing)
        mean = self.y_mean + self.y_scale * (Ks @ self.weights)
        var = np.einsum("ij,jk,ik->i", Ks, self.sigma_inv, Ks) * self.y_scale ** 2
        return mean, np.maximum(var, 0.0)


def fit_demand_model(history: np.ndarray, locs: np.ndarray, *, noise_var: float = NOISE_VAR,
                     max_inducing: int = MAX_INDUCING, seed: int = 0) -> FittedDemandModel:
    """Fit a subset-of-regressors GP to per-station per-step demand counts.

    ``history`` has shape (days, 144, n_stations). Counts are averaged per
    (station, hour) and standardized; the prior mean is the empirical mean.
    """
    history = np.asarray(history, dtype=float)
    if history.ndim != 3 or history.shape[0] < 2 or history.shape[1] != STEPS_PER_DAY:
        raise ValueError("history must have shape (days>=2, 144, n_stations)")
    locs = np.asarray(locs, dtype=float).reshape(-1, 2)
    days, steps, n = history.shape
    hourly = history.reshape(days, 24, steps // 24, n).mean(axis=(0, 2))  # (24, n)
    hours = np.repeat(np.arange(24) + 0.5, n)
    pts = np.tile(locs, (24, 1))
    y = hourly.ravel()
    X = _scaled(pts, hours)

    y_mean = float(y.mean())
    y_scale = float(y.std()) or 1.0
    r = (y - y_mean) / y_scale

    if len(X) > max_inducing:
        idx = np.sort(np.random.default_rng(seed).choice(len(X), max_inducing, replace=False))
        Z = X[idx]
    else:
        Z = X
    Kmm = rbf(Z, Z)
    Kmn = rbf(Z, X)
    A = Kmm + (Kmn @ Kmn.T) / noise_var
    sigma_inv = solve_psd(A, np.eye(len(Z)))
    weights = sigma_inv @ (Kmn @ r) / noise_var
    return FittedDemandModel(Z, weights, sigma_inv, y_mean, y_scale)
