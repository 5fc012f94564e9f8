"""Box-constrained convex QP ``min z'Hz + q'z  s.t.  lo <= z <= hi``.

Projected Newton with an active set: variables pinned at a bound whose
gradient pushes outward are frozen, a Newton step is taken on the rest via a
Cholesky factor of the free block, and a projected Armijo search keeps the
iterate feasible. Once the active set settles the Newton step is exact.
Block-tridiagonal Hessians (as produced by moving-horizon estimation) pass a
``bandwidth`` so the free block is factored in banded storage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cho_solve_banded, cholesky_banded


class FactorizationError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, best, residual):
        super().__init__(msg)
        self.best = best
        self.residual = residual


@dataclass
class BoxQP:
    H: np.ndarray
    q: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    bandwidth: int | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        n = len(self.q)
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,)).copy()
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if np.any(self.lo > self.hi):
            raise ValueError("lower bound exceeds upper bound")
        asym = np.abs(self.H - self.H.T).max(initial=0.0)
        if asym > 1e-12 * max(np.abs(self.H).max(initial=0.0), 1.0):
            raise ValueError(f"H is not symmetric (max asymmetry {asym:.3g})")

    def objective(self, z) -> float:
        return float(z @ self.H @ z + self.q @ z)

    def gradient(self, z) -> np.ndarray:
        return 2.0 * (self.H @ z) + self.q


def kkt_residual(qp: BoxQP, z) -> float:
    """Projected-gradient norm ``|z - clip(z - grad, lo, hi)|_inf``."""
    g = qp.gradient(z)
    return float(np.abs(z - np.clip(z - g, qp.lo, qp.hi)).max(initial=0.0))


def _to_banded(M, bw):
    n = len(M)
    ab = np.zeros((bw + 1, n))
    for d in range(bw + 1):
        ab[bw - d, d:] = np.diagonal(M, d)
    return ab


class _Factor:
    def __init__(self, M, bandwidth=None):
        self.banded = bandwidth is not None and bandwidth < len(M) - 1
        try:
            if self.banded:
                self.bw = bandwidth
                self.cb = cholesky_banded(_to_banded(M, bandwidth), lower=False)
            else:
                self.cf = cho_factor(M, lower=False)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"Cholesky failed: {exc}") from exc
        if self.banded:
            ok = np.all(self.cb[-1] > 0)
        else:
            ok = np.all(np.diag(self.cf[0]) > 0)
        if not ok:
            raise FactorizationError("Cholesky produced a non-positive pivot")

    def solve(self, b):
        if self.banded:
            return cho_solve_banded((self.cb, False), b)
        return cho_solve(self.cf, b)


def check_positive_definite(qp: BoxQP) -> None:
    """Raise :class:`FactorizationError` unless ``H`` admits a Cholesky factor."""
    _Factor(qp.H, qp.bandwidth)


@dataclass
class QPResult:
    z: np.ndarray
    kkt_residual: float
    iterations: int
    objective: float


def solve(qp: BoxQP, warm_start=None, tol: float = 1e-8, max_iter: int = 500,
          check_pd: bool = True) -> QPResult:
    """Solve ``qp`` to a KKT residual of ``tol``.

    Raises :class:`FactorizationError` for a non-PD Hessian and
    :class:`ConvergenceError` (carrying the best iterate) if ``max_iter`` runs out.
    """
    n = len(qp.q)
    if check_pd:
        check_positive_definite(qp)
    lo, hi = qp.lo, qp.hi
    if warm_start is None:
        z = np.clip(np.zeros(n), lo, hi)
    else:
        z = np.clip(np.asarray(warm_start, dtype=float), lo, hi)
    f = qp.objective(z)
    best, best_res = z, np.inf
    free_prev = None
    factor = None
    for it in range(max_iter + 1):
        g = qp.gradient(z)
        res = float(np.abs(z - np.clip(z - g, lo, hi)).max(initial=0.0))
        if res < best_res:
            best, best_res = z, res
        if res <= tol:
            return QPResult(z, res, it, f)
        if it == max_iter:
            break
        pinned = ((z <= lo) & (g > 0)) | ((z >= hi) & (g < 0))
        free = ~pinned
        d = np.zeros(n)
        if free.any():
            if free_prev is None or np.any(free != free_prev):
                idx = np.flatnonzero(free)
                factor = _Factor(2.0 * qp.H[np.ix_(idx, idx)], qp.bandwidth)
                free_prev = free
            d[free] = -factor.solve(g[free])
        t, accepted = 1.0, False
        while t > 1e-12:
            zn = np.clip(z + t * d, lo, hi)
            fn = qp.objective(zn)
            if fn <= f + 1e-4 * (g @ (zn - z)) + 1e-15 * abs(f):
                accepted = True
                break
            t *= 0.5
        if not accepted or np.array_equal(zn, z):
            # projected gradient step with exact line search along the projected arc start
            pg = np.where(pinned, 0.0, g)
            curv = 2.0 * pg @ qp.H @ pg
            t = (pg @ pg) / curv if curv > 0 else 1.0
            zn = np.clip(z - t * pg, lo, hi)
            fn = qp.objective(zn)
        z, f = zn, fn
    raise ConvergenceError(f"box QP did not converge in {max_iter} iterations "
                           f"(residual {best_res:.3g})", best, best_res)
