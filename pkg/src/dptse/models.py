"""State-space systems consumed by the estimators.

An estimator needs: ``f(x, u)`` (batched, clamped), ``linearize(x, u)``,
the full measurement map ``h(x)`` with its Jacobian, the state box, projections
``clip`` (estimates) and ``clip_sigma`` (UKF sigma points), and a
per-state ``state_scale``: process and prior covariances are ``q`` and ``p0``
times ``diag(state_scale**2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arz, sensing


class ArzSystem:
    """ARZ network as seen by an estimator (no incident knowledge)."""

    def __init__(self, topo: arz.NetworkTopology, params: arz.ArzParams):
        self.topo = topo
        self.params = params
        self.n_x = topo.n_x
        self.x_min, self.x_max = arz.state_bounds(topo, params)
        self.sigma_floor = params.rho_floor
        # covariances are isotropic in (rho, psi / v_f), both in veh/km
        self.state_scale = np.tile([1.0, params.v_f], topo.n_segments)

    def f(self, x, u):
        return arz.step(x, u, self.topo, self.params)

    def linearize(self, x, u):
        return arz.linearize(x, u, self.topo, self.params)

    def h(self, x):
        return sensing.h_full(x, self.params)

    def h_jacobian(self, x):
        return sensing.h_jacobian(x, self.params)

    def clip(self, x):
        return np.clip(x, self.x_min, self.x_max)

    def clip_sigma(self, x):
        """Sigma points stay strictly above zero (density and relative flow floor)."""
        return np.clip(x, np.maximum(self.x_min, self.sigma_floor), self.x_max)


@dataclass
class LinearSystem:
    """``x+ = A x + B u + c``, ``h(x) = Cx``; used to cross-check estimators."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    C: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    sigma_floor: float = -np.inf

    @property
    def n_x(self):
        return len(self.c)

    @property
    def state_scale(self):
        return np.ones(self.n_x)

    def f(self, x, u):
        x = np.asarray(x, dtype=float)
        return np.clip(x @ self.A.T + np.asarray(u) @ self.B.T + self.c, self.x_min, self.x_max)

    def linearize(self, x, u):
        return self.A, self.B, self.c

    def h(self, x):
        return np.asarray(x, dtype=float) @ self.C.T

    def h_jacobian(self, x):
        return self.C

    def clip(self, x):
        return np.clip(x, self.x_min, self.x_max)

    def clip_sigma(self, x):
        return np.clip(x, np.maximum(self.x_min, self.sigma_floor), self.x_max)
