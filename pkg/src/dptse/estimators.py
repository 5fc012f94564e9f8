"""EKF, UKF, EnKF and linearised moving horizon estimation (MHE).

Every estimator consumes, at step ``k``, the input ``u[k-1]`` that drove the
transition into ``k`` and the (privatised) measurement batch for ``k``, and
publishes an estimate projected onto the physical state box.

Systems follow the interface of :mod:`dptse.models`.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import qp as qp_solver
from .sensing import DENSITY, MeasurementBatch

log = logging.getLogger(__name__)

TECHNIQUES = ("ekf", "ukf", "enkf", "mhe")


class EstimatorWarning(RuntimeWarning):
    """A numerical safeguard fired (regularisation, re-inflation, QP cap)."""


class CovarianceError(np.linalg.LinAlgError):
    pass


@dataclass
class UkfParams:
    alpha: float = 0.1
    kappa: float = -4.0
    beta: float = 2.0


@dataclass
class MheParams:
    horizon: int = 10
    mu: float | None = None  # arrival weight; default 1/p0
    w1: float | None = None  # measurement weight; default inverse noise variance per kind
    w2: float | None = None  # model weight; default 1/q
    warm_start: bool = True
    linearization: str = "horizon_mean"  # or "prediction"
    qp_tol: float = 1e-8
    qp_max_iter: int = 500


@dataclass
class EstimatorConfig:
    technique: str = "ekf"
    q: float = 1e-2
    r: float = 1.0
    r_density: float | None = None
    r_speed: float | None = None
    strict_scalar_r: bool = False
    p0: float = 1e-3
    ukf: UkfParams = field(default_factory=UkfParams)
    ensemble_size: int = 100
    mhe: MheParams = field(default_factory=MheParams)

    def __post_init__(self):
        self.technique = self.technique.lower()
        if self.technique not in TECHNIQUES:
            raise ValueError(f"unknown technique {self.technique!r}")
        if not (self.q > 0 and self.r > 0 and self.p0 > 0):
            raise ValueError("q, r and p0 must be positive")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2")
        if self.mhe.horizon < 1:
            raise ValueError("MHE horizon must be >= 1")
        for name in ("mu", "w1", "w2"):
            val = getattr(self.mhe, name)
            if val is not None and not val > 0:
                raise ValueError(f"MHE weight {name} must be positive")

    def meas_var(self, kinds) -> np.ndarray:
        """Measurement noise variance per batch row."""
        kinds = np.asarray(kinds)
        if self.strict_scalar_r:
            return np.full(len(kinds), self.r)
        rd = self.r if self.r_density is None else self.r_density
        rv = self.r if self.r_speed is None else self.r_speed
        return np.where(kinds == DENSITY, rd, rv)


def process_cov(model, cfg: EstimatorConfig) -> np.ndarray:
    return np.diag(cfg.q * model.state_scale**2)


def prior_cov(model, cfg: EstimatorConfig) -> np.ndarray:
    return np.diag(cfg.p0 * model.state_scale**2)


def _sym(P):
    return 0.5 * (P + P.T)


def _psd_repair(P):
    """Nearest PSD matrix (eigenvalues clipped at 0) when ``P`` is indefinite."""
    P = _sym(P)
    vals, vecs = np.linalg.eigh(P)
    if vals[0] >= 0:
        return P
    warnings.warn(f"indefinite covariance (min eigenvalue {vals[0]:.3g}); projecting to PSD",
                  EstimatorWarning)
    return _sym((vecs * np.clip(vals, 0.0, None)) @ vecs.T)


def _chol_innovation(S):
    try:
        return np.linalg.cholesky(S), False
    except np.linalg.LinAlgError:
        warnings.warn("singular innovation covariance; adding 1e-9 I", EstimatorWarning)
        return np.linalg.cholesky(S + 1e-9 * np.eye(len(S))), True


def _gain(Pxy, S):
    """``Pxy S^{-1}`` via a Cholesky factor of the innovation covariance."""
    L, _ = _chol_innovation(_sym(S))
    tmp = np.linalg.solve(L, Pxy.T)
    return np.linalg.solve(L.T, tmp).T


def ekf_step(x_hat, P, u, batch: MeasurementBatch | None, model, cfg: EstimatorConfig):
    """Extended Kalman filter predict/update; returns ``(x_hat, P)``."""
    n = len(x_hat)
    A, _, _ = model.linearize(x_hat, u)
    x_pred = model.clip(model.f(x_hat, u))
    P_pred = _sym(A @ P @ A.T + process_cov(model, cfg))
    if batch is None or batch.n_p == 0:
        return x_pred, P_pred
    rows = batch.rows
    Hj = model.h_jacobian(x_pred)[rows]
    R = np.diag(cfg.meas_var(batch.kinds))
    innov = batch.values - model.h(x_pred)[rows]
    K = _gain(P_pred @ Hj.T, Hj @ P_pred @ Hj.T + R)
    x_new = model.clip(x_pred + K @ innov)
    IKH = np.eye(n) - K @ Hj
    # Joseph form keeps P symmetric positive semi-definite
    P_new = _sym(IKH @ P_pred @ IKH.T + K @ R @ K.T)
    return x_new, P_new


def ukf_weights(n: int, prm: UkfParams):
    lam = prm.alpha**2 * (n + prm.kappa) - n
    c = n + lam
    wm = np.full(2 * n + 1, 1.0 / (2.0 * c))
    wm[0] = lam / c
    wc = wm.copy()
    wc[0] += 1.0 - prm.alpha**2 + prm.beta
    return wm, wc, c


def _sqrt_psd(M):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-9 * max(1.0, float(np.mean(np.abs(np.diag(M)))))
    warnings.warn(f"covariance square root failed; retrying with jitter {jitter:.3g}",
                  EstimatorWarning)
    try:
        return np.linalg.cholesky(M + jitter * np.eye(len(M)))
    except np.linalg.LinAlgError as exc:
        raise CovarianceError("covariance is not positive definite") from exc


def sigma_points(x, P, c, project=None):
    L = _sqrt_psd(_sym(c * P))
    X = np.vstack([x, x + L.T, x - L.T])
    return X if project is None else project(X)


def _ut_cov(dA, dB, wc):
    """Weighted cross-covariance of sigma-point deviations ``dA``, ``dB``."""
    return (dA * wc[:, None]).T @ dB


def ukf_step(x_hat, P, u, batch: MeasurementBatch | None, model, cfg: EstimatorConfig):
    """Unscented Kalman filter step with individually bounded sigma points.

    With a negative central weight the covariances are taken about the
    propagated central point (weights ``wm[1:]``), which keeps them positive
    semi-definite and is exact for linear maps.
    """
    n = len(x_hat)
    wm, wc, c = ukf_weights(n, cfg.ukf)
    about_center = wc[0] < 0
    wcov = np.concatenate([[0.0], wm[1:]]) if about_center else wc
    X = sigma_points(x_hat, P, c, model.clip_sigma)
    Xf = model.f(X, np.broadcast_to(u, (len(X), len(u))))
    x_pred = wm @ Xf
    dX = Xf - (Xf[0] if about_center else x_pred)
    P_pred = _psd_repair(_ut_cov(dX, dX, wcov) + process_cov(model, cfg))
    if batch is None or batch.n_p == 0:
        return model.clip(x_pred), P_pred
    rows = batch.rows
    X2 = sigma_points(model.clip(x_pred), P_pred, c, model.clip_sigma)
    Y = model.h(X2)[:, rows]
    y_pred = wm @ Y
    if about_center:
        dY, dX2 = Y - Y[0], X2 - X2[0]
    else:
        dY, dX2 = Y - y_pred, X2 - wm @ X2
    Pyy = _ut_cov(dY, dY, wcov) + np.diag(cfg.meas_var(batch.kinds))
    Pxy = _ut_cov(dX2, dY, wcov)
    K = _gain(Pxy, Pyy)
    x_new = model.clip(x_pred + K @ (batch.values - y_pred))
    P_new = _psd_repair(P_pred - K @ Pyy @ K.T)
    return x_new, P_new


def enkf_step(ensemble, u, batch: MeasurementBatch | None, model, cfg: EstimatorConfig, rng):
    """Perturbed-observation ensemble Kalman filter; ``ensemble`` is (members, n)."""
    rng = np.random.default_rng(rng)
    E = np.asarray(ensemble, dtype=float)
    m, n = E.shape
    Ef = model.f(E, np.broadcast_to(u, (m, len(u))))
    sd = np.sqrt(cfg.q) * model.state_scale
    Ef = model.clip(Ef + sd * rng.standard_normal((m, n)))
    if np.ptp(Ef, axis=0).max() < 1e-12:
        warnings.warn("ensemble collapsed; re-inflating with process noise", EstimatorWarning)
        Ef = model.clip(Ef + sd * rng.standard_normal((m, n)))
    if batch is None or batch.n_p == 0:
        return Ef
    rows = batch.rows
    rvar = cfg.meas_var(batch.kinds)
    Y = model.h(Ef)[:, rows]
    A = Ef - Ef.mean(axis=0)
    HA = Y - Y.mean(axis=0)
    Pxy = A.T @ HA / (m - 1)
    Pyy = HA.T @ HA / (m - 1) + np.diag(rvar)
    K = _gain(Pxy, Pyy)
    obs = batch.values + np.sqrt(rvar) * rng.standard_normal((m, len(rows)))
    return model.clip(Ef + (obs - Y) @ K.T)


class Estimator:
    name = "base"

    def __init__(self, model, cfg: EstimatorConfig, x0):
        self.model = model
        self.cfg = cfg
        self.x_hat = model.clip(np.asarray(x0, dtype=float))
        self.k = 0

    def step(self, u_prev, batch):
        raise NotImplementedError


class EKF(Estimator):
    name = "ekf"

    def __init__(self, model, cfg, x0):
        super().__init__(model, cfg, x0)
        self.P = prior_cov(model, cfg)

    def step(self, u_prev, batch):
        self.x_hat, self.P = ekf_step(self.x_hat, self.P, u_prev, batch, self.model, self.cfg)
        self.k += 1
        return self.x_hat


class UKF(EKF):
    name = "ukf"

    def step(self, u_prev, batch):
        self.x_hat, self.P = ukf_step(self.x_hat, self.P, u_prev, batch, self.model, self.cfg)
        self.k += 1
        return self.x_hat


class EnKF(Estimator):
    name = "enkf"

    def __init__(self, model, cfg, x0, seed=0):
        super().__init__(model, cfg, x0)
        self.rng = np.random.default_rng(seed)
        m, n = cfg.ensemble_size, model.n_x
        sd = np.sqrt(cfg.p0) * model.state_scale
        self.ensemble = model.clip(self.x_hat + sd * self.rng.standard_normal((m, n)))

    def step(self, u_prev, batch):
        self.ensemble = enkf_step(self.ensemble, u_prev, batch, self.model, self.cfg, self.rng)
        self.x_hat = self.ensemble.mean(axis=0)
        self.k += 1
        return self.x_hat

    @property
    def P(self):
        return np.cov(self.ensemble, rowvar=False)


@dataclass
class _MeasTerm:
    Ct: np.ndarray  # linearised rows of C h(x)
    target: np.ndarray  # y - c2
    weight: np.ndarray


class MHE(Estimator):
    """Linearised moving horizon estimator solved as a box QP each step.

    For ``k <= N`` the horizon grows from the initial estimate (anchored with
    the arrival weight); afterwards the window is ``[k-N, k]`` and the arrival
    prior is the model prediction from the estimate published at ``k-N-1``.
    """

    name = "mhe"

    def __init__(self, model, cfg, x0):
        super().__init__(model, cfg, x0)
        m = cfg.mhe
        self.N = m.horizon
        inv_s2 = 1.0 / model.state_scale**2
        self.mu = (m.mu if m.mu is not None else 1.0 / cfg.p0) * inv_s2
        self.w2 = (m.w2 if m.w2 is not None else 1.0 / cfg.q) * inv_s2
        self.x0 = self.x_hat.copy()
        self.estimates = [self.x0]
        self.inputs = []
        self.trans = {}  # i -> (A_i, B_i u_i + c1_i)
        self.meas = {}  # i -> _MeasTerm or None
        self.window = np.array([self.x0])
        self.cholesky_ok = []
        self.last_qp = None
        self.last_warm_objective = None
        self.last_iterations = 0

    def _weights(self, kinds):
        if self.cfg.mhe.w1 is not None:
            return np.full(len(kinds), self.cfg.mhe.w1)
        return 1.0 / self.cfg.meas_var(kinds)

    def _linearization_points(self, u_prev):
        if self.cfg.mhe.linearization == "prediction":
            x_t = self.estimates[-1]
            return x_t, self.model.f(x_t, u_prev)
        x_o = self.window.mean(axis=0)
        return x_o, x_o

    def step(self, u_prev, batch):
        k = self.k + 1
        u_prev = np.asarray(u_prev, dtype=float)
        self.inputs.append(u_prev)
        x_t, x_m = self._linearization_points(u_prev)
        A, B, c1 = self.model.linearize(x_t, u_prev)
        self.trans[k - 1] = (A, B @ u_prev + c1)
        if batch is not None and batch.n_p:
            rows = batch.rows
            Ct = self.model.h_jacobian(x_m)[rows]
            c2 = self.model.h(x_m)[rows] - Ct @ x_m
            self.meas[k] = _MeasTerm(Ct, batch.values - c2, self._weights(batch.kinds))
        else:
            self.meas[k] = None
        s = max(0, k - self.N)
        if s == 0:
            prior = self.x0
        else:
            prior = self.model.f(self.estimates[s - 1], self.inputs[s - 1])
        qp, scale = self._assemble(s, k, prior)
        warm = None
        if self.cfg.mhe.warm_start:
            prev = self.window[-(k - s):] if s > 0 else self.window
            warm = np.vstack([prev, self.model.f(self.window[-1], u_prev)])[-(k - s + 1):]
            warm = np.clip(warm.ravel() / scale, qp.lo, qp.hi)
            self.last_warm_objective = qp.objective(warm)
        try:
            qp_solver.check_positive_definite(qp)
            self.cholesky_ok.append(True)
        except qp_solver.FactorizationError:
            self.cholesky_ok.append(False)
            raise
        try:
            res = qp_solver.solve(qp, warm, tol=self.cfg.mhe.qp_tol,
                                  max_iter=self.cfg.mhe.qp_max_iter, check_pd=False)
            zs, self.last_iterations = res.z, res.iterations
        except qp_solver.ConvergenceError as exc:
            warnings.warn(f"MHE QP at k={k}: {exc}; using best iterate", EstimatorWarning)
            zs, self.last_iterations = exc.best, self.cfg.mhe.qp_max_iter
        self.last_qp = (qp, zs)
        self.window = (zs * scale).reshape(k - s + 1, -1)
        self.x_hat = self.model.clip(self.window[-1])
        self.estimates.append(self.x_hat)
        self.k = k
        for old in [i for i in self.trans if i < k - self.N - 1]:
            del self.trans[old]
        for old in [i for i in self.meas if i < k - self.N - 1]:
            del self.meas[old]
        return self.x_hat

    def _assemble(self, s, k, prior):
        """Quadratic ``z'Hz + q'z`` over the window ``[s, k]``, Jacobi-scaled."""
        n = self.model.n_x
        M = k - s + 1
        H = np.zeros((M * n, M * n))
        qv = np.zeros(M * n)
        b = [slice(j * n, (j + 1) * n) for j in range(M)]
        H[b[0], b[0]] += np.diag(self.mu)
        qv[b[0]] -= 2.0 * self.mu * prior
        for j, i in enumerate(range(s, k + 1)):
            term = self.meas.get(i)
            if term is None:
                continue
            WC = term.weight[:, None] * term.Ct
            H[b[j], b[j]] += term.Ct.T @ WC
            qv[b[j]] -= 2.0 * WC.T @ term.target
        w2 = self.w2
        for j, i in enumerate(range(s, k)):
            A, d = self.trans[i]
            WA = w2[:, None] * A
            H[b[j], b[j]] += A.T @ WA
            H[b[j + 1], b[j + 1]] += np.diag(w2)
            H[b[j + 1], b[j]] -= WA
            H[b[j], b[j + 1]] -= WA.T
            qv[b[j + 1]] -= 2.0 * w2 * d
            qv[b[j]] += 2.0 * WA.T @ d
        H = 0.5 * (H + H.T)
        scale = 1.0 / np.sqrt(np.diag(H))
        Hs = H * scale[:, None] * scale[None, :]
        Hs = 0.5 * (Hs + Hs.T)
        lo = np.tile(self.model.x_min, M) / scale
        hi = np.tile(self.model.x_max, M) / scale
        return qp_solver.BoxQP(Hs, qv * scale, lo, hi, bandwidth=2 * n - 1), scale

    @property
    def horizon_solution(self):
        return self.window


def make_estimator(model, cfg: EstimatorConfig, x0, seed=0) -> Estimator:
    t = cfg.technique
    if t == "ekf":
        return EKF(model, cfg, x0)
    if t == "ukf":
        return UKF(model, cfg, x0)
    if t == "enkf":
        return EnKF(model, cfg, x0, seed=seed)
    return MHE(model, cfg, x0)
