"""Godunov-discretised Aw-Rascle-Zhang (ARZ) dynamics on a highway with ramps.

State layout: ``x = [rho_0, psi_0, rho_1, psi_1, ...]`` over mainline segments,
then on-ramp segments, then off-ramp segments. Densities are in veh/km,
relative flows ``psi = rho * (v + p(rho))`` in veh/h, speeds in km/h and the
time step is kept in hours so that ``T / l`` multiplies fluxes directly.

Input layout: ``u = [D_in, w_in, rho_out, (D_in_r, w_in_r) per on-ramp,
rho_out_o per off-ramp]``.

All transition functions accept a leading batch dimension on ``x`` and ``u``
so sigma points and ensemble members can be pushed through in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

_DOMAIN_TOL = 1e-9


class DomainError(ValueError):
    """Argument outside the physical range of the model."""


class DegenerateDensityError(DomainError):
    """Density at or below the floor where speed is undefined."""


class ConfigurationError(ValueError):
    """Inconsistent model parameters or network description."""


@dataclass(frozen=True)
class ArzParams:
    """ARZ model parameters in internal units (km, h, veh).

    ``tau`` is measured in time steps; ``T`` is the step length in hours.
    Use :meth:`from_human` to build from seconds and metres.
    """

    v_f: float = 102.0
    rho_m: float = 333.0
    tau: float = 60.0
    gamma: float = 2.0
    l: float = 0.1
    T: float = 1.0 / 3600.0
    rho_floor: float = 1e-6

    def __post_init__(self):
        if not (self.v_f > 0 and self.rho_m > 0 and self.l > 0 and self.T > 0):
            raise ConfigurationError("v_f, rho_m, l and T must be positive")
        if not self.tau > 1:
            raise ConfigurationError(f"tau must exceed 1 time step, got {self.tau}")
        if not 1.0 <= self.gamma <= 2.0:
            raise ConfigurationError(f"gamma must lie in [1, 2], got {self.gamma}")
        if self.v_f * self.T > self.l * (1 + 1e-12):
            raise ConfigurationError(
                f"CFL violated: v_f*T = {self.v_f * self.T:.6g} km > l = {self.l:.6g} km"
            )

    @classmethod
    def from_human(cls, v_f_kmh=102.0, rho_m_vehkm=333.0, tau_steps=60.0, gamma=2.0,
                   segment_length_m=100.0, time_step_s=1.0, rho_floor_vehkm=1e-6):
        return cls(v_f=v_f_kmh, rho_m=rho_m_vehkm, tau=tau_steps, gamma=gamma,
                   l=segment_length_m / 1000.0, T=time_step_s / 3600.0,
                   rho_floor=rho_floor_vehkm)

    @property
    def time_step_s(self) -> float:
        return self.T * 3600.0

    @property
    def dt_dx(self) -> float:
        return self.T / self.l

    @property
    def psi_max(self) -> float:
        return self.rho_m * self.v_f


@dataclass(frozen=True)
class OnRamp:
    attach: int
    n_segments: int = 1
    priority: float = 0.7


@dataclass(frozen=True)
class OffRamp:
    detach: int
    n_segments: int = 1
    split_ratio: float = 0.15


@dataclass(frozen=True)
class NetworkTopology:
    """Mainline of ``n_mainline`` segments with ramps at segment boundaries.

    A ramp junction at index ``j`` (0-based) sits on the downstream boundary
    of mainline segment ``j``. ``ring=True`` closes the mainline on itself with
    no boundaries or ramps; it exists for conservation checks.
    """

    n_mainline: int
    on_ramps: tuple[OnRamp, ...] = ()
    off_ramps: tuple[OffRamp, ...] = ()
    ring: bool = False

    def __post_init__(self):
        object.__setattr__(self, "on_ramps", tuple(self.on_ramps))
        object.__setattr__(self, "off_ramps", tuple(self.off_ramps))
        if self.n_mainline < 2:
            raise ConfigurationError("need at least two mainline segments")
        if self.ring and (self.on_ramps or self.off_ramps):
            raise ConfigurationError("ring closure does not support ramps")
        idx = [r.attach for r in self.on_ramps] + [r.detach for r in self.off_ramps]
        for j in idx:
            if not 0 < j < self.n_mainline - 1:
                raise ConfigurationError(f"junction at segment {j} is not interior")
        if len(set(idx)) != len(idx):
            raise ConfigurationError("two junctions share a segment")
        for group in (self.on_ramps, self.off_ramps):
            pos = [getattr(r, "attach", None) if isinstance(r, OnRamp) else r.detach for r in group]
            if any(b <= a for a, b in zip(pos, pos[1:])):
                raise ConfigurationError("ramp positions must be strictly increasing")
        for r in self.on_ramps:
            if r.n_segments < 1 or not 0 < r.priority < 1:
                raise ConfigurationError(f"bad on-ramp {r}")
        for r in self.off_ramps:
            if r.n_segments < 1 or not 0 <= r.split_ratio < 1:
                raise ConfigurationError(f"bad off-ramp {r}")

    @property
    def n_on(self) -> int:
        return sum(r.n_segments for r in self.on_ramps)

    @property
    def n_off(self) -> int:
        return sum(r.n_segments for r in self.off_ramps)

    @property
    def n_segments(self) -> int:
        return self.n_mainline + self.n_on + self.n_off

    @property
    def n_x(self) -> int:
        return 2 * self.n_segments

    @property
    def n_u(self) -> int:
        return 3 + 2 * len(self.on_ramps) + len(self.off_ramps)

    def on_ramp_segments(self, r: int) -> list[int]:
        start = self.n_mainline + sum(o.n_segments for o in self.on_ramps[:r])
        return list(range(start, start + self.on_ramps[r].n_segments))

    def off_ramp_segments(self, r: int) -> list[int]:
        start = self.n_mainline + self.n_on + sum(o.n_segments for o in self.off_ramps[:r])
        return list(range(start, start + self.off_ramps[r].n_segments))

    def output_segments(self) -> list[int]:
        """Segments whose downstream boundary leaves the network."""
        out = [] if self.ring else [self.n_mainline - 1]
        return out + [self.off_ramp_segments(r)[-1] for r in range(len(self.off_ramps))]


def make_input(topo: NetworkTopology, D_in, w_in, rho_out, ramp_demand=(), ramp_w=(),
               off_rho_out=()) -> np.ndarray:
    u = np.zeros(topo.n_u)
    u[0], u[1], u[2] = D_in, w_in, rho_out
    n_i = len(topo.on_ramps)
    for r in range(n_i):
        u[3 + 2 * r] = ramp_demand[r]
        u[4 + 2 * r] = ramp_w[r]
    for o in range(len(topo.off_ramps)):
        u[3 + 2 * n_i + o] = off_rho_out[o]
    return u


def state_bounds(topo: NetworkTopology, p: ArzParams) -> tuple[np.ndarray, np.ndarray]:
    x_max = np.tile([p.rho_m, p.psi_max], topo.n_segments)
    return np.zeros(topo.n_x), x_max


def project_admissible(x, p: ArzParams, rho_min: float = 0.0) -> np.ndarray:
    """Project states onto ``rho in [rho_min, rho_m]``, ``rho p(rho) <= psi <= rho v_f``.

    The set is the box of :func:`state_bounds` intersected with
    ``0 <= v`` and ``w <= v_f``, which the scheme preserves for inflows
    with ``w <= v_f``. Works on batches.
    """
    x = np.array(x, dtype=float, copy=True)
    rho = np.clip(x[..., 0::2], rho_min, p.rho_m)
    x[..., 0::2] = rho
    x[..., 1::2] = np.clip(x[..., 1::2], rho * _p(rho, p), rho * p.v_f)
    return x


# ---------------------------------------------------------------------------
# pointwise closure relations


def _check_density(rho, p):
    r = np.asarray(rho, dtype=float)
    if np.any(r < -_DOMAIN_TOL) or np.any(r > p.rho_m + _DOMAIN_TOL):
        raise DomainError(f"density outside [0, {p.rho_m}]: {rho}")
    return np.clip(r, 0.0, p.rho_m)


def _p(rho, p):
    return p.v_f * (rho / p.rho_m) ** p.gamma


def _dp(rho, p):
    return p.v_f * p.gamma * rho ** (p.gamma - 1) / p.rho_m ** p.gamma


def pressure(rho, p: ArzParams):
    """``v_f (rho / rho_m)**gamma``; raises :class:`DomainError` outside [0, rho_m]."""
    return _p(_check_density(rho, p), p)


def equilibrium_speed(rho, p: ArzParams):
    return p.v_f - pressure(rho, p)


def speed_from_state(rho, psi, p: ArzParams):
    """Speed ``psi/rho - p(rho)``; callers substitute ``v_f`` on degenerate density."""
    r = _check_density(rho, p)
    if np.any(r <= p.rho_floor):
        raise DegenerateDensityError(f"density {rho} at or below floor {p.rho_floor}")
    return np.asarray(psi, dtype=float) / r - _p(r, p)


def speed(rho, psi, p: ArzParams):
    """Vectorised speed with the floor rule (``v_f`` for near-empty segments)."""
    rho = np.asarray(rho, dtype=float)
    psi = np.asarray(psi, dtype=float)
    ok = rho > p.rho_floor
    safe = np.where(ok, rho, 1.0)
    return np.where(ok, psi / safe - _p(np.clip(rho, 0, None), p), p.v_f)


def critical_density(w, p: ArzParams):
    """Density maximising ``rho (w - p(rho))``, clamped to [0, rho_m]."""
    w = np.asarray(w, dtype=float)
    base = np.clip(w, 0.0, None) / ((p.gamma + 1) * p.v_f)
    return np.clip(p.rho_m * base ** (1.0 / p.gamma), 0.0, p.rho_m)


def _critical_flux(w, p):
    s = critical_density(w, p)
    return s * (w - _p(s, p)), s


def _demand(rho, w, p):
    """Demand with partials (dD/drho, dD/dw)."""
    fc, sigma = _critical_flux(w, p)
    free = rho <= sigma
    val = np.where(free, rho * (w - _p(rho, p)), fc)
    d_rho = np.where(free, w - _p(rho, p) - rho * _dp(rho, p), 0.0)
    # envelope theorem: d/dw of the critical flux is sigma(w)
    d_w = np.where(free, rho, sigma)
    pos = w > 0
    return (np.where(pos, val, 0.0), np.where(pos, d_rho, 0.0), np.where(pos, d_w, 0.0))


def _supply(rho_star, w, p):
    """Supply with partials (dS/drho_star, dS/dw)."""
    fc, sigma = _critical_flux(w, p)
    free = rho_star <= sigma
    cong = rho_star * (w - _p(rho_star, p))
    pos = cong > 0
    val = np.where(free, fc, np.where(pos, cong, 0.0))
    d_r = np.where(free | ~pos, 0.0, w - _p(rho_star, p) - rho_star * _dp(rho_star, p))
    d_w = np.where(free, sigma, np.where(pos, rho_star, 0.0))
    wpos = w > 0
    return (np.where(wpos, val, 0.0), np.where(wpos, d_r, 0.0), np.where(wpos, d_w, 0.0))


def _intermediate_density(w_up, v_down, p):
    """rho* with p(rho*) = w_up - v_down, plus d rho*/d(w_up - v_down)."""
    a = (w_up - v_down) / p.v_f
    interior = (a > 0) & (a < 1)
    a_safe = np.where(interior, a, 0.5)
    r = p.rho_m * a_safe ** (1.0 / p.gamma)
    val = np.where(a <= 0, 0.0, np.where(a >= 1, p.rho_m, r))
    deriv = np.where(interior, r / (p.gamma * a_safe * p.v_f), 0.0)
    return val, deriv


def _supply_at(w_up, v_down, p):
    """Receiving capacity of a cell with speed ``v_down`` for traffic of class ``w_up``."""
    rs, drs = _intermediate_density(w_up, v_down, p)
    S, dS_r, dS_w = _supply(rs, w_up, p)
    return S, dS_w + dS_r * drs, -dS_r * drs


def demand(rho, w, p: ArzParams):
    """Sending flux: ``rho (w - p(rho))`` below the critical density, critical flux above."""
    return _demand(_check_density(rho, p), np.asarray(w, dtype=float), p)[0]


def supply(rho_star, w_up, p: ArzParams):
    """Receiving flux for an intermediate density ``rho_star``; saturates at 0."""
    return _supply(np.asarray(rho_star, dtype=float), np.asarray(w_up, dtype=float), p)[0]


def _cell_w_v(rho, psi, p):
    """Driver characteristic and speed per cell with floor rule and partials."""
    ok = rho > p.rho_floor
    r = np.where(ok, rho, 1.0)
    w = np.where(ok, psi / r, p.v_f)
    w_r = np.where(ok, -psi / r**2, 0.0)
    w_p = np.where(ok, 1.0 / r, 0.0)
    rc = np.clip(rho, 0.0, None)
    v = np.where(ok, w - _p(rc, p), p.v_f)
    v_r = np.where(ok, w_r - _dp(rc, p), 0.0)
    return w, w_r, w_p, v, v_r, w_p


def interface_flux(up, down, p: ArzParams):
    """Godunov flux ``(q, phi)`` between an upstream and a downstream cell.

    ``up`` and ``down`` are ``(rho, psi)`` pairs. ``q`` is the minimum of the
    upstream demand and the downstream supply evaluated at the intermediate
    state that carries the upstream driver characteristic and the downstream
    speed; ``phi = q * w_up``.
    """
    ru, pu = (np.asarray(a, dtype=float) for a in up)
    rd, pd = (np.asarray(a, dtype=float) for a in down)
    w_u = _cell_w_v(ru, pu, p)[0]
    v_d = _cell_w_v(rd, pd, p)[3]
    D = _demand(ru, w_u, p)[0]
    S = _supply_at(w_u, v_d, p)[0]
    q = np.minimum(D, S)
    return q, q * w_u


# ---------------------------------------------------------------------------
# network assembly


@dataclass
class _Layout:
    S: int
    n_u: int
    # w_ext / D_ext: segments then upstream boundary inputs
    src_seg: np.ndarray
    src_D: np.ndarray
    src_w: np.ndarray
    # v_ext: segments then downstream boundary densities
    sink_rho: np.ndarray
    # one-to-one links: sender index into D_ext/w_ext, receiver index into v_ext
    link_snd: np.ndarray
    link_rcv: np.ndarray
    link_from: np.ndarray  # -1 for boundary sources
    link_to: np.ndarray  # -1 for sinks
    merges: list = field(default_factory=list)  # (up, ramp_last, down, priority)
    diverges: list = field(default_factory=list)  # (up, down, off_first, beta)

    def __post_init__(self):
        nl = len(self.link_snd)
        self.out_inc = np.zeros((nl, self.S))
        self.in_inc = np.zeros((nl, self.S))
        for k, (a, b) in enumerate(zip(self.link_from, self.link_to)):
            if a >= 0:
                self.out_inc[k, a] = 1.0
            if b >= 0:
                self.in_inc[k, b] = 1.0


@lru_cache(maxsize=32)
def _layout(topo: NetworkTopology) -> _Layout:
    S = topo.n_segments
    M = topo.n_mainline
    src_seg, src_D, src_w, sink_rho = [], [], [], []
    snd, rcv, frm, to = [], [], [], []
    merges, diverges = [], []

    def chain(segs):
        for a, b in zip(segs, segs[1:]):
            snd.append(a), rcv.append(b), frm.append(a), to.append(b)

    if topo.ring:
        for i in range(M):
            snd.append(i), rcv.append((i + 1) % M), frm.append(i), to.append((i + 1) % M)
        empty = np.zeros(0, dtype=int)
        return _Layout(S, topo.n_u, empty, empty, empty, empty, *map(np.array, (snd, rcv, frm, to)))

    def source(seg, d_idx, w_idx):
        snd.append(S + len(src_seg)), rcv.append(seg), frm.append(-1), to.append(seg)
        src_seg.append(seg), src_D.append(d_idx), src_w.append(w_idx)

    def sink(seg, rho_idx):
        snd.append(seg), rcv.append(S + len(sink_rho)), frm.append(seg), to.append(-1)
        sink_rho.append(rho_idx)

    junction = {r.attach for r in topo.on_ramps} | {r.detach for r in topo.off_ramps}
    source(0, 0, 1)
    chain_break = [i for i in range(M - 1) if i not in junction]
    for i in chain_break:
        snd.append(i), rcv.append(i + 1), frm.append(i), to.append(i + 1)
    sink(M - 1, 2)
    n_i = len(topo.on_ramps)
    for r, ramp in enumerate(topo.on_ramps):
        segs = topo.on_ramp_segments(r)
        source(segs[0], 3 + 2 * r, 4 + 2 * r)
        chain(segs)
        merges.append((ramp.attach, segs[-1], ramp.attach + 1, ramp.priority))
    for o, ramp in enumerate(topo.off_ramps):
        segs = topo.off_ramp_segments(o)
        chain(segs)
        sink(segs[-1], 3 + 2 * n_i + o)
        diverges.append((ramp.detach, ramp.detach + 1, segs[0], ramp.split_ratio))
    arr = lambda v: np.asarray(v, dtype=int)
    return _Layout(S, topo.n_u, arr(src_seg), arr(src_D), arr(src_w), arr(sink_rho),
                   arr(snd), arr(rcv), arr(frm), arr(to), merges, diverges)


def _unit_rows(n_rows, nvar, cols_a, coef_a, cols_b=None, coef_b=None):
    g = np.zeros((n_rows, nvar))
    rows = np.arange(n_rows)
    g[rows, cols_a] += coef_a
    if cols_b is not None:
        g[rows, cols_b] += coef_b
    return g


def _transition(x, u, topo, p, speed_cap=None, jac=False):
    """Next state (unclamped) and, with ``jac=True`` on 1-D inputs, its Jacobian
    w.r.t. ``[x, u]``. Branch choices are reported for diagnostics."""
    lay = _layout(topo)
    S = lay.S
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    nvar = topo.n_x + topo.n_u
    rho, psi = x[..., 0::2], x[..., 1::2]
    w, w_r, w_p, v, v_r, v_p = _cell_w_v(rho, psi, p)
    D, D_rho, D_w = _demand(np.clip(rho, 0, p.rho_m), w, p)
    D_r = D_rho + D_w * w_r
    D_p = D_w * w_p
    margins = [np.abs(rho - critical_density(w, p)) / p.rho_m]
    if speed_cap is not None:
        cap = np.asarray(speed_cap, dtype=float)
        capped = rho * cap
        use_cap = capped < D
        D = np.where(use_cap, capped, D)
        D_r = np.where(use_cap, cap, D_r)
        D_p = np.where(use_cap, 0.0, D_p)

    # extended sender/receiver quantities
    rho_o = np.clip(u[..., lay.sink_rho], 0, p.rho_m)
    w_ext = np.concatenate([w, u[..., lay.src_w]], axis=-1)
    D_ext = np.concatenate([D, u[..., lay.src_D]], axis=-1)
    v_ext = np.concatenate([v, p.v_f - _p(rho_o, p)], axis=-1)

    # receivers: one per link, then per merge, then two per diverge
    rw = list(lay.link_snd)
    rv = list(lay.link_rcv)
    for up, _, down, _ in lay.merges:
        rw.append(up), rv.append(down)
    for up, down, off, _ in lay.diverges:
        rw += [up, up]
        rv += [down, off]
    rw, rv = np.array(rw, dtype=int), np.array(rv, dtype=int)
    Sv, S_w, S_v = _supply_at(w_ext[..., rw], v_ext[..., rv], p)
    a_rel = (w_ext[..., rw] - v_ext[..., rv]) / p.v_f
    margins += [np.abs(a_rel), np.abs(a_rel - 1)]

    if jac:
        xi = np.arange(S)
        Gw = np.zeros((S + len(lay.src_w), nvar))
        Gw[xi, 2 * xi] = w_r
        Gw[xi, 2 * xi + 1] = w_p
        Gw[S + np.arange(len(lay.src_w)), topo.n_x + lay.src_w] = 1.0
        GD = np.zeros_like(Gw)
        GD[xi, 2 * xi] = D_r
        GD[xi, 2 * xi + 1] = D_p
        GD[S + np.arange(len(lay.src_D)), topo.n_x + lay.src_D] = 1.0
        Gv = np.zeros((S + len(lay.sink_rho), nvar))
        Gv[xi, 2 * xi] = v_r
        Gv[xi, 2 * xi + 1] = v_p
        Gv[S + np.arange(len(lay.sink_rho)), topo.n_x + lay.sink_rho] = -_dp(rho_o, p)
        GS = S_w[:, None] * Gw[rw] + S_v[:, None] * Gv[rv]

    bshape = x.shape[:-1]
    q_in = np.zeros(bshape + (S,))
    q_out = np.zeros(bshape + (S,))
    f_in = np.zeros(bshape + (S,))
    f_out = np.zeros(bshape + (S,))
    if jac:
        Gq_in = np.zeros((S, nvar))
        Gq_out = np.zeros((S, nvar))
        Gf_in = np.zeros((S, nvar))
        Gf_out = np.zeros((S, nvar))

    def add(frm, to, q, Gq, wq, Gwq):
        """Accumulate flux q carrying class wq from cell frm to cell to."""
        f = q * wq
        if frm >= 0:
            q_out[..., frm] += q
            f_out[..., frm] += f
        if to >= 0:
            q_in[..., to] += q
            f_in[..., to] += f
        if jac:
            Gf = wq * Gq + q * Gwq
            if frm >= 0:
                Gq_out[frm] += Gq
                Gf_out[frm] += Gf
            if to >= 0:
                Gq_in[to] += Gq
                Gf_in[to] += Gf

    # one-to-one links, vectorised over links
    nl = len(lay.link_snd)
    Dl = D_ext[..., lay.link_snd]
    Sl = Sv[..., :nl]
    take_D = Dl <= Sl
    ql = np.where(take_D, Dl, Sl)
    wl = w_ext[..., lay.link_snd]
    # exact equality means both sides are the same critical flux: no kink
    gap = np.abs(Dl - Sl) / np.maximum(np.maximum(Dl, Sl), 1.0)
    margins.append(np.where(Dl == Sl, np.inf, gap))
    fl = ql * wl
    q_out += ql @ lay.out_inc
    f_out += fl @ lay.out_inc
    q_in += ql @ lay.in_inc
    f_in += fl @ lay.in_inc
    if jac:
        Gql = np.where(take_D[:, None], GD[lay.link_snd], GS[:nl])
        Gfl = wl[:, None] * Gql + ql[:, None] * Gw[lay.link_snd]
        Gq_out += lay.out_inc.T @ Gql
        Gf_out += lay.out_inc.T @ Gfl
        Gq_in += lay.in_inc.T @ Gql
        Gf_in += lay.in_inc.T @ Gfl

    k = nl
    for up, ramp, down, alpha in lay.merges:
        Dm, Dr, Sm = D[..., up], D[..., ramp], Sv[..., k]
        # priority split; a stream's unused share goes to the other one
        lim_m = np.maximum(alpha * Sm, Sm - Dr)
        lim_r = np.maximum((1 - alpha) * Sm, Sm - Dm)
        qm = np.minimum(Dm, lim_m)
        qr = np.minimum(Dr, lim_r)
        margins.append(np.abs(Dm + Dr - Sm) / np.maximum(Sm, 1.0))
        Gm = Gr = None
        if jac:
            gDm, gDr, gS = GD[up], GD[ramp], GS[k]
            Gm = gDm if Dm <= lim_m else (alpha * gS if alpha * Sm >= Sm - Dr else gS - gDr)
            Gr = gDr if Dr <= lim_r else ((1 - alpha) * gS if (1 - alpha) * Sm >= Sm - Dm else gS - gDm)
        add(up, down, qm, Gm, w[..., up], Gw[up] if jac else None)
        add(ramp, down, qr, Gr, w[..., ramp], Gw[ramp] if jac else None)
        k += 1

    for up, down, off, beta in lay.diverges:
        Du, Sm, So = D[..., up], Sv[..., k], Sv[..., k + 1]
        lim_o = So / beta if beta > 0 else np.full_like(So, np.inf)
        cand = np.stack([Du, Sm / (1 - beta), lim_o])
        # argmin returns the first minimum, so ties resolve toward demand
        b = np.argmin(cand, axis=0)
        qt = np.take_along_axis(cand, b[None], 0)[0]
        Gt = None
        if jac:
            Gt = [GD[up], GS[k] / (1 - beta), GS[k + 1] / beta if beta > 0 else None][int(b)]
        add(up, down, (1 - beta) * qt, (1 - beta) * Gt if jac else None,
            w[..., up], Gw[up] if jac else None)
        if beta > 0:
            add(up, off, beta * qt, beta * Gt if jac else None, w[..., up], Gw[up] if jac else None)
        k += 2

    a = (p.tau - 1) / p.tau
    rho_n = rho + p.dt_dx * (q_in - q_out)
    psi_n = a * psi + p.dt_dx * (f_in - f_out) + (p.v_f / p.tau) * rho
    xn = np.empty_like(x)
    xn[..., 0::2] = rho_n
    xn[..., 1::2] = psi_n
    G = None
    if jac:
        G = np.zeros((topo.n_x, nvar))
        G[0::2] = p.dt_dx * (Gq_in - Gq_out)
        G[1::2] = p.dt_dx * (Gf_in - Gf_out)
        xi = np.arange(S)
        G[2 * xi, 2 * xi] += 1.0
        G[2 * xi + 1, 2 * xi + 1] += a
        G[2 * xi + 1, 2 * xi] += p.v_f / p.tau
    return xn, G, margins


def step(x, u, topo: NetworkTopology, p: ArzParams, speed_cap=None):
    """One Godunov step of the network, clamped to the physical box.

    ``speed_cap`` (per segment, km/h, ``inf`` for none) limits the sending
    flux of a segment to ``rho * cap``; the plant uses it to model incidents.
    """
    xn = _transition(x, u, topo, p, speed_cap)[0]
    lo, hi = state_bounds(topo, p)
    return np.clip(xn, lo, hi)


def linearize(x0, u0, topo: NetworkTopology, p: ArzParams, speed_cap=None):
    """First-order expansion ``step(x, u) ~ A x + B u + c`` around ``(x0, u0)``.

    Jacobians are exact derivatives of the branch selected at ``(x0, u0)``;
    min-ties take the demand branch and saturated clamps contribute zero.
    """
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    xn, G, _ = _transition(x0, u0, topo, p, speed_cap, jac=True)
    lo, hi = state_bounds(topo, p)
    clipped = (xn < lo) | (xn > hi)
    G[clipped] = 0.0
    A = G[:, : topo.n_x]
    B = G[:, topo.n_x:]
    c = np.clip(xn, lo, hi) - A @ x0 - B @ u0
    return A, B, c


def switch_distance(x, u, topo: NetworkTopology, p: ArzParams, speed_cap=None) -> float:
    """Smallest normalised distance from ``(x, u)`` to any branch switch of the scheme."""
    xn, _, margins = _transition(x, u, topo, p, speed_cap)
    lo, hi = state_bounds(topo, p)
    scale = np.where(hi > 0, hi, 1.0)
    margins = margins + [np.abs(xn - lo) / scale, np.abs(hi - xn) / scale]
    return float(min(np.min(m) for m in margins if np.size(m)))


def equilibrium_state(rho, topo: NetworkTopology, p: ArzParams) -> np.ndarray:
    """State with every segment at equilibrium (``w = v_f``); ``rho`` scalar or per segment."""
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (topo.n_segments,))
    x = np.empty(topo.n_x)
    x[0::2] = rho
    x[1::2] = rho * p.v_f
    return x


def free_flow_flows(topo: NetworkTopology, mainline_inflow: float, ramp_inflows=()) -> np.ndarray:
    """Per-segment steady flow when every junction passes its full demand."""
    flows = np.zeros(topo.n_segments)
    add = {r.attach: (i, q) for i, (r, q) in enumerate(zip(topo.on_ramps, ramp_inflows))}
    split = {r.detach: (o, r.split_ratio) for o, r in enumerate(topo.off_ramps)}
    f = float(mainline_inflow)
    for i in range(topo.n_mainline):
        flows[i] = f
        if i in add:
            r, q = add[i]
            flows[topo.on_ramp_segments(r)] = q
            f += q
        if i in split:
            o, beta = split[i]
            flows[topo.off_ramp_segments(o)] = beta * f
            f *= 1.0 - beta
    return flows


def free_flow_density(flow, p: ArzParams) -> float:
    """Free-flow equilibrium density carrying ``flow`` veh/h (capped at capacity)."""
    from scipy.optimize import brentq

    sigma = float(critical_density(p.v_f, p))
    cap = sigma * (p.v_f - float(_p(sigma, p)))
    if flow <= 0:
        return 0.0
    if flow >= cap:
        return sigma
    return brentq(lambda r: r * (p.v_f - _p(r, p)) - flow, 0.0, sigma, xtol=1e-12)
