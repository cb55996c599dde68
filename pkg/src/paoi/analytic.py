"""Closed-form peak-age and age formulas for multi-class M/G/1 and M/G/1/1 queues.

All functions take a :class:`~paoi.core.SystemModel` plus a rate vector and
return numpy arrays indexed by class position (class id minus one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InstabilityError, ModelError, SystemModel, as_rates

# Loads within this distance of 1 are rejected: 1/(1 - rho) loses all precision there.
DELTA_STAB = 1e-9


@dataclass(frozen=True)
class UtilizationProfile:
    rho: float
    waiting: float  # Pollaczek-Khinchine mean wait; inf when unstable

    @property
    def stable(self) -> bool:
        return self.rho < 1.0 - DELTA_STAB


@dataclass(frozen=True)
class GG1Stats:
    """Interarrival moments of a single class."""

    rate: float
    mean_interarrival: float
    second_moment_interarrival: float

    @classmethod
    def poisson(cls, rate: float) -> "GG1Stats":
        return cls(rate, 1.0 / rate, 2.0 / rate**2)

    @classmethod
    def periodic(cls, rate: float) -> "GG1Stats":
        return cls(rate, 1.0 / rate, 1.0 / rate**2)


def utilization(model: SystemModel, rates) -> UtilizationProfile:
    lam = as_rates(model, rates)
    rho = float(lam @ model.x)
    if rho >= 1.0 - DELTA_STAB:
        return UtilizationProfile(rho, math.inf)
    # numerator accumulated in full before the single division
    return UtilizationProfile(rho, float(lam @ model.y) / (2.0 * (1.0 - rho)))


def _stable_profile(model: SystemModel, lam) -> UtilizationProfile:
    prof = utilization(model, lam)
    if not prof.stable:
        raise InstabilityError(prof.rho)
    return prof


def paoi_mg1(model: SystemModel, rates) -> np.ndarray:
    """Peak age per class in the FCFS M/G/1 queue: 1/lambda_n + x_n + W."""
    lam = as_rates(model, rates)
    prof = _stable_profile(model, lam)
    return 1.0 / lam + model.x + prof.waiting


def paoi_mg11(model: SystemModel, rates) -> np.ndarray:
    """Peak age per class in the bufferless M/G/1/1 queue.

    Valid for any positive rates; the load may exceed one because arrivals
    that find the server busy are discarded.
    """
    lam = as_rates(model, rates)
    return model.x + (1.0 + float(lam @ model.x)) / lam


def z_matrix(model: SystemModel, rates) -> np.ndarray:
    """Expected time until the next class-i completion, starting when a class-j service begins.

    Entry ``[j, i]`` is obtained by solving, for each target class ``i``, the
    first-step linear system ``Z_ii = x_i`` and
    ``Z_ji = x_j + 1/L + sum_k (lambda_k / L) Z_ki`` for ``j != i`` where
    ``L = sum(lambda)``.
    """
    lam = as_rates(model, rates)
    x = model.x
    n = model.n
    total = lam.sum()
    probs = lam / total
    z = np.empty((n, n))
    for i in range(n):
        mat = np.eye(n) - np.tile(probs, (n, 1))
        rhs = x + 1.0 / total
        mat[i] = 0.0
        mat[i, i] = 1.0
        rhs[i] = x[i]
        z[:, i] = np.linalg.solve(mat, rhs)
    return z


def paoi_mg11_via_z(model: SystemModel, rates) -> np.ndarray:
    """M/G/1/1 peak age assembled from the Z first-step quantities (independent route)."""
    lam = as_rates(model, rates)
    total = lam.sum()
    z = z_matrix(model, lam)
    return model.x + 1.0 / total + (lam / total) @ z


def _mm1_rho(lam: float, mu: float) -> float:
    if lam <= 0 or mu <= 0:
        raise ModelError("rates must be positive")
    rho = lam / mu
    if rho >= 1.0 - DELTA_STAB:
        raise InstabilityError(rho)
    return rho


def paoi_mm1(lam: float, mu: float) -> float:
    rho = _mm1_rho(lam, mu)
    return (1.0 + 1.0 / rho + rho / (1.0 - rho)) / mu


def aoi_mm1(lam: float, mu: float) -> float:
    """Time-average age of the single-class FCFS M/M/1 queue."""
    rho = _mm1_rho(lam, mu)
    return (1.0 + 1.0 / rho + rho * rho / (1.0 - rho)) / mu


def conservation_residual(model: SystemModel, rates, paoi) -> tuple[float, float]:
    """Residuals of the two rate-weighted peak-age conservation laws.

    ``r_mg1`` checks ``sum(lambda*A) = N + rho + sum(lambda)*W`` and is NaN when
    the load is unstable; ``r_mg11`` checks ``sum(lambda*A) = N + (N+1)*rho``.
    Each residual is only meaningful for ages from the matching formula.
    """
    lam = as_rates(model, rates)
    weighted = float(lam @ np.asarray(paoi, dtype=float))
    prof = utilization(model, lam)
    n = model.n
    r_mg1 = weighted - (n + prof.rho + lam.sum() * prof.waiting) if prof.stable else math.nan
    r_mg11 = weighted - (n + (n + 1) * prof.rho)
    return r_mg1, r_mg11


def pairwise_relation_residual(model: SystemModel, rates, paoi) -> np.ndarray:
    """Matrix of residuals of the pairwise age relation for the model's discipline.

    M/G/1: ``(1/l_n - 1/l_m) - ((A_n - x_n) - (A_m - x_m))``.
    M/G/1/1: ``l_n (A_n - x_n) - l_m (A_m - x_m)``.
    """
    lam = as_rates(model, rates)
    excess = np.asarray(paoi, dtype=float) - model.x
    if model.discipline == "MG1":
        inv = 1.0 / lam
        return (inv[:, None] - inv[None, :]) - (excess[:, None] - excess[None, :])
    scaled = lam * excess
    return scaled[:, None] - scaled[None, :]


def paoi_gap(model: SystemModel, rates) -> np.ndarray:
    """M/G/1/1 peak age minus M/G/1 peak age, per class."""
    lam = as_rates(model, rates)
    prof = _stable_profile(model, lam)
    return prof.rho / lam - prof.waiting


def b_surrogate(model: SystemModel, rates) -> np.ndarray:
    """Upper surrogate ``2 max(1/lambda_n + x_n, W)``; lies between A_n and 2 A_n."""
    lam = as_rates(model, rates)
    prof = _stable_profile(model, lam)
    return 2.0 * np.maximum(1.0 / lam + model.x, prof.waiting)


def lemma1_bounds(stats: GG1Stats, paoi: float) -> tuple[float, float]:
    """Interval that must contain the average age of a single-class G/G/1 queue."""
    lam = stats.rate
    m1, m2 = stats.mean_interarrival, stats.second_moment_interarrival
    lower = paoi - 1.5 * lam * m2 - lam * m1 * m1
    upper = paoi + 0.5 * lam * m2
    return lower, upper
