"""(epsilon, delta)-differential privacy for segment density and speed data.

Adjacent data sets differ by one vehicle trajectory. A vehicle changes a
segment density by ``1/l`` while present, for about ``t_avg`` steps per
sensor, and at worst passes all ``n_p_max`` sensors at different times in the
two data sets, which bounds the L2 sensitivity of the density stream. The
speed bound follows from the linear (gamma = 1) equilibrium relation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .arz import ArzParams
from .sensing import DENSITY, MeasurementBatch


def gaussian_tail(x: float) -> float:
    """Standard normal upper tail ``Q(x)``."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def gaussian_tail_inverse(delta: float, tol: float = 1e-13) -> float:
    """``K`` with ``Q(K) = delta`` for ``delta`` in (0, 0.5].

    Newton iterations on ``Q`` safeguarded by a shrinking bisection bracket.
    """
    if not 0.0 < delta <= 0.5:
        raise ValueError(f"delta must lie in (0, 0.5], got {delta}")
    if delta == 0.5:
        return 0.0
    lo, hi = 0.0, 1.0
    while gaussian_tail(hi) > delta:
        lo, hi = hi, 2.0 * hi
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = gaussian_tail(x) - delta
        if f > 0:
            lo = x
        else:
            hi = x
        dens = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        nxt = x + f / dens if dens > 0 else 0.5 * (lo + hi)
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) < tol or hi - lo < tol:
            return nxt
        x = nxt
    return x


def kappa(epsilon: float, delta: float) -> float:
    """Gaussian-mechanism multiplier: noise std is ``kappa * sensitivity``."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    K = gaussian_tail_inverse(delta)
    return (K + math.sqrt(K * K + 2.0 * epsilon)) / (2.0 * epsilon)


def sensitivities(p: ArzParams, n_p_max: int, t_avg: float) -> tuple[float, float]:
    """L2 sensitivities ``(delta_rho, delta_v)`` of the density and speed streams."""
    if n_p_max < 0 or t_avg <= 0:
        raise ValueError("need n_p_max >= 0 and t_avg > 0")
    d_rho = math.sqrt(2.0 * n_p_max * t_avg) / p.l
    return d_rho, p.v_f / p.rho_m * d_rho


def default_t_avg(p: ArzParams) -> int:
    """Free-flow segment transit time in steps, rounded up."""
    return max(1, math.ceil(p.l / p.v_f / p.T - 1e-12))


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    n_p_max: int
    t_avg: float
    delta_rho: float
    delta_v: float
    kappa: float

    @classmethod
    def build(cls, epsilon: float, delta: float, n_p_max: int, t_avg: float,
              p: ArzParams) -> "PrivacySpec":
        d_rho, d_v = sensitivities(p, n_p_max, t_avg)
        return cls(epsilon, delta, n_p_max, t_avg, d_rho, d_v, kappa(epsilon, delta))

    @property
    def sigma_rho(self) -> float:
        return self.kappa * self.delta_rho

    @property
    def sigma_v(self) -> float:
        return self.kappa * self.delta_v

    def summary(self) -> dict:
        return {
            "epsilon": self.epsilon, "delta": self.delta, "n_p_max": self.n_p_max,
            "t_avg_steps": self.t_avg, "delta_rho_vehkm": self.delta_rho,
            "delta_v_kmh": self.delta_v, "kappa": self.kappa,
            "sigma_rho_vehkm": self.sigma_rho, "sigma_v_kmh": self.sigma_v,
        }


def privatize(batch: MeasurementBatch, spec: PrivacySpec, rng) -> MeasurementBatch:
    """Add Gaussian-mechanism noise to every entry of ``batch``.

    ``rng`` is a seed or a ``numpy.random.Generator``. Values are not clamped.
    """
    rng = np.random.default_rng(rng)
    sigma = np.where(batch.kinds == DENSITY, spec.sigma_rho, spec.sigma_v)
    noise = rng.standard_normal(batch.n_p) * sigma
    return batch.with_values(batch.values + noise)
