"""Ground-truth plant, measurement pipeline, estimator runs, sweeps and CSV output.

Randomness is split by purpose from one integer seed per run:
``SeedSequence([seed, 0])`` for plant perturbation, ``[seed, 1]`` for privacy
noise and ``[seed, 2]`` for the EnKF ensemble, so sweeps over estimator
settings see identical data.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arz, privacy, qp, sensing
from .estimators import CovarianceError, EstimatorWarning, make_estimator
from .models import ArzSystem
from .scenario import ScenarioConfig, from_dict, profile_value

log = logging.getLogger(__name__)

PLANT_STREAM, PRIVACY_STREAM, ENSEMBLE_STREAM = 0, 1, 2

NUMERICAL_ERRORS = (np.linalg.LinAlgError, qp.ConvergenceError, CovarianceError,
                    FloatingPointError, arz.DomainError)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def input_at(cfg: ScenarioConfig, k: int) -> np.ndarray:
    """Boundary input driving the transition from step ``k`` to ``k + 1``."""
    t = k * cfg.params.time_step_s
    return arz.make_input(
        cfg.topology, profile_value(cfg.mainline_demand, t), cfg.upstream_w,
        cfg.downstream_density, [profile_value(r, t) for r in cfg.on_ramp_demand],
        cfg.on_ramp_w, cfg.off_ramp_density)


def speed_cap_at(cfg: ScenarioConfig, k: int) -> np.ndarray | None:
    t = k * cfg.params.time_step_s
    cap = np.full(cfg.topology.n_segments, np.inf)
    for inc in cfg.incidents:
        if inc.t_start_s <= t < inc.t_end_s:
            cap[inc.segment] = min(cap[inc.segment], inc.speed_cap_kmh)
    return cap if np.isfinite(cap).any() else None


def initial_estimate(cfg: ScenarioConfig) -> np.ndarray:
    """Free-flow equilibrium carrying the t = 0 demands, routed through the junctions."""
    flows = arz.free_flow_flows(cfg.topology, profile_value(cfg.mainline_demand, 0.0),
                                [profile_value(r, 0.0) for r in cfg.on_ramp_demand])
    rho = [arz.free_flow_density(f, cfg.params) for f in flows]
    return arz.equilibrium_state(rho, cfg.topology, cfg.params)


@dataclass
class PlantRun:
    x: np.ndarray  # (K + 1, n_x)
    u: np.ndarray  # (K, n_u)


def run_plant(cfg: ScenarioConfig, seed: int = 0) -> PlantRun:
    """Nonlinear ARZ ground truth with incident speed caps.

    The network is first driven for ``spinup`` steps with the t = 0 inputs so
    the run starts from a settled free-flow state.
    """
    p, topo = cfg.params, cfg.topology
    x = initial_estimate(cfg)
    u0 = input_at(cfg, 0)
    for _ in range(cfg.spinup):
        x = arz.step(x, u0, topo, p)
    noise_rho, noise_psi = cfg.plant_noise
    rng = _rng(seed, PLANT_STREAM)
    K = cfg.duration
    xs = np.empty((K + 1, topo.n_x))
    us = np.empty((K, topo.n_u))
    xs[0] = x
    for k in range(K):
        us[k] = input_at(cfg, k)
        x = arz.step(x, us[k], topo, p, speed_cap_at(cfg, k))
        if noise_rho > 0 or noise_psi > 0:
            x[0::2] += noise_rho * rng.standard_normal(topo.n_segments)
            x[1::2] += noise_psi * rng.standard_normal(topo.n_segments)
            x = arz.project_admissible(x, p)
        xs[k + 1] = x
    return PlantRun(xs, us)


def privacy_spec(cfg: ScenarioConfig) -> privacy.PrivacySpec:
    n_p = cfg.n_p_max if cfg.n_p_max is not None else cfg.schedule.max_sensed()
    t_avg = cfg.t_avg if cfg.t_avg is not None else privacy.default_t_avg(cfg.params)
    if not cfg.privacy_enabled:
        n_p = 0
    return privacy.PrivacySpec.build(cfg.epsilon, cfg.delta, n_p, t_avg, cfg.params)


def measurements(cfg: ScenarioConfig, plant: PlantRun, spec: privacy.PrivacySpec,
                 seed: int) -> list[sensing.MeasurementBatch]:
    """Privatised batches for ``k = 0..K``; noise-free when the spec has zero sensitivity."""
    rng = _rng(seed, PRIVACY_STREAM)
    out = []
    for k, x in enumerate(plant.x):
        b = sensing.measure(x, cfg.schedule, k, cfg.params)
        out.append(privacy.privatize(b, spec, rng) if spec.n_p_max > 0 else b)
    return out


def estimator_config(cfg: ScenarioConfig, technique: str, spec: privacy.PrivacySpec, **overrides):
    """Measurement variances default to the mechanism variances, floored at ``r_floor``."""
    floor = cfg.estimator["r_floor"]
    base = {"r_density": max(spec.sigma_rho**2, floor), "r_speed": max(spec.sigma_v**2, floor)}
    for key in ("r_density", "r_speed"):
        if cfg.estimator.get(key) is not None:
            base[key] = cfg.estimator[key]
    base.update(overrides)
    return cfg.estimator_config(technique, **base)


def reported_speed(h: np.ndarray, params: arz.ArzParams) -> np.ndarray:
    out = np.array(h, copy=True)
    out[..., 1::2] = np.clip(out[..., 1::2], 0.0, params.v_f)
    return out


def rmse(truth: np.ndarray, estimate: np.ndarray, params: arz.ArzParams, first: int = 0):
    """Density and speed RMSE over every segment for steps ``first..K``.

    Speeds are projected onto ``[0, v_f]`` first: a near-empty estimated
    segment with nonzero relative flow otherwise reports an unbounded speed.
    """
    ht = reported_speed(sensing.h_full(truth[first:], params), params)
    he = reported_speed(sensing.h_full(estimate[first:], params), params)
    d = (he - ht) ** 2
    return float(np.sqrt(d[:, 0::2].mean())), float(np.sqrt(d[:, 1::2].mean()))


def warmup_steps(cfg: ScenarioConfig) -> int:
    """Steps excluded from RMSE: ``0..N`` for an ``N``-step MHE horizon."""
    return cfg.estimator["mhe"].get("horizon", 10) + 1


@dataclass
class RunResult:
    technique: str
    seed: int
    axis_value: float | None
    rmse_density: float
    rmse_speed: float
    mean_step_time_s: float
    estimates: np.ndarray | None = field(default=None, repr=False)
    step_times: np.ndarray | None = field(default=None, repr=False)
    n_warnings: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_estimator(cfg: ScenarioConfig, technique: str, plant: PlantRun, batches, spec,
                  seed: int = 0, axis_value=None, keep_trace: bool = True, **overrides) -> RunResult:
    """Filter one measurement stream; numerical failures are recorded, not raised."""
    model = ArzSystem(cfg.topology, cfg.params)
    ecfg = estimator_config(cfg, technique, spec, **overrides)
    x0 = initial_estimate(cfg)
    K = len(plant.u)
    est = make_estimator(model, ecfg, x0, seed=np.random.SeedSequence([seed, ENSEMBLE_STREAM]))
    xs = np.empty((K + 1, model.n_x))
    xs[0] = est.x_hat
    times = np.zeros(K)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EstimatorWarning)
        try:
            for k in range(1, K + 1):
                t0 = time.perf_counter()
                xs[k] = est.step(plant.u[k - 1], batches[k])
                times[k - 1] = time.perf_counter() - t0
        except NUMERICAL_ERRORS as exc:
            log.warning("%s seed %d failed at k=%d: %s", technique, seed, k, exc)
            return RunResult(technique, seed, axis_value, float("nan"), float("nan"),
                             float(times[: k - 1].mean()) if k > 1 else float("nan"),
                             None, None, len(caught), f"k={k}: {type(exc).__name__}: {exc}")
    n_warn = sum(issubclass(w.category, EstimatorWarning) for w in caught)
    r_d, r_v = rmse(plant.x, xs, cfg.params, warmup_steps(cfg))
    return RunResult(technique, seed, axis_value, r_d, r_v, float(times.mean()),
                     xs if keep_trace else None, times if keep_trace else None, n_warn)


def run_experiment(cfg: ScenarioConfig, techniques=None, seeds=None, axis_value=None,
                   keep_trace: bool = False, plants: dict | None = None) -> list[RunResult]:
    """Plant, measure, privatise and estimate for every (seed, technique) pair."""
    techniques = tuple(techniques or cfg.techniques)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    spec = privacy_spec(cfg)
    out = []
    for seed in seeds:
        if plants is not None and seed in plants:
            plant = plants[seed]
        else:
            plant = run_plant(cfg, seed)
            if plants is not None:
                plants[seed] = plant
        batches = measurements(cfg, plant, spec, seed)
        for t in techniques:
            res = run_estimator(cfg, t, plant, batches, spec, seed, axis_value, keep_trace)
            log.info("%s seed=%d axis=%s rmse_rho=%.4g rmse_v=%.4g %s", t, seed, axis_value,
                     res.rmse_density, res.rmse_speed, res.error or "")
            out.append(res)
    return out


def manifest(cfg: ScenarioConfig, seeds, techniques, extra: dict | None = None) -> dict:
    """Everything needed to replay a run: the raw config plus the derived noise scales.

    The embedded config carries the seeds and techniques actually used, so
    passing the manifest back as ``--config`` reproduces the run.
    """
    raw = cfg.to_dict()
    raw.setdefault("simulation", {})["seeds"] = [int(s) for s in seeds]
    if techniques:
        raw.setdefault("estimators", {})["techniques"] = list(techniques)
    out = {
        "config": raw,
        "seeds": list(seeds),
        "techniques": list(techniques),
        "privacy": privacy_spec(cfg).summary(),
        "numpy_version": np.__version__,
    }
    out.update(extra or {})
    return out


def with_cv_count(cfg: ScenarioConfig, count: int) -> ScenarioConfig:
    """Same scenario with ``count`` CV segments spread along the mainline."""
    raw = cfg.to_dict()
    raw["sensors"].pop("cv_initial_segments", None)
    raw["sensors"]["cv_segment_count"] = int(count)
    return from_dict(raw)


def sweep_cv_segments(cfg: ScenarioConfig, counts=range(5, 12), techniques=None,
                      seeds=None) -> list[RunResult]:
    """CV-segment count sweep at the configured privacy level, spread placement."""
    plants: dict = {}
    out = []
    for c in counts:
        out += run_experiment(with_cv_count(cfg, c), techniques, seeds, c, plants=plants)
    return out


def sweep_privacy(cfg: ScenarioConfig, axis: str, grid, techniques=None, seeds=None,
                  cv_count: int | None = 5) -> list[RunResult]:
    """Sweep ``epsilon`` or ``delta`` with everything else held at the config values."""
    if axis not in ("epsilon", "delta"):
        raise ValueError(f"unknown privacy axis {axis!r}")
    base = with_cv_count(cfg, cv_count) if cv_count is not None else cfg
    plants: dict = {}
    out = []
    for val in grid:
        point = base.with_overrides({"privacy": {axis: float(val)}})
        out += run_experiment(point, techniques, seeds, float(val), plants=plants)
    return out


def tune_grid(cfg: ScenarioConfig, technique: str, q_grid, r_scale_grid=(1.0,), seeds=None):
    """Mean density RMSE for each (q, r scale) pair, emulating manual tuning.

    Returns rows ``(q, r_scale, rmse_density, rmse_speed)`` sorted best first.
    """
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    spec = privacy_spec(cfg)
    data = {}
    for s in seeds:
        plant = run_plant(cfg, s)
        data[s] = (plant, measurements(cfg, plant, spec, s))
    floor = cfg.estimator["r_floor"]
    rows = []
    for q_ in q_grid:
        for scale in r_scale_grid:
            over = {"q": float(q_), "r_density": scale * max(spec.sigma_rho**2, floor),
                    "r_speed": scale * max(spec.sigma_v**2, floor)}
            res = [run_estimator(cfg, technique, p_, b_, spec, s, keep_trace=False, **over)
                   for s, (p_, b_) in data.items()]
            rows.append((float(q_), float(scale), float(np.mean([r.rmse_density for r in res])),
                         float(np.mean([r.rmse_speed for r in res]))))
    rows.sort(key=lambda r: (np.isnan(r[2]), r[2]))
    return rows


def design_points(cfg: ScenarioConfig) -> dict[str, ScenarioConfig]:
    """The sweep points the trend checks compare: 5 vs 11 CV segments at the
    nominal privacy level, and the epsilon/delta extremes at 5 CV segments."""
    base = with_cv_count(cfg, 5)
    return {
        "cv5": base,
        "cv11": with_cv_count(cfg, 11),
        "eps0.1": base.with_overrides({"privacy": {"epsilon": 0.1}}),
        "delta0.01": base.with_overrides({"privacy": {"delta": 0.01}}),
        "delta0.1": base.with_overrides({"privacy": {"delta": 0.1}}),
    }


def tune_design_points(cfg: ScenarioConfig, technique: str, q_grid, seeds) -> list[tuple]:
    """Mean density RMSE over all :func:`design_points` for each ``q``.

    One ``q`` per technique is then used at every sweep point. Returns rows
    ``(q, mean_rmse, {point: rmse})`` sorted best first.
    """
    points = design_points(cfg)
    data = {}
    for name, c in points.items():
        spec = privacy_spec(c)
        data[name] = [(run_plant(c, s), s) for s in seeds]
        data[name] = [(p_, measurements(c, p_, spec, s), s) for p_, s in data[name]]
    rows = []
    for q_ in q_grid:
        per = {}
        for name, c in points.items():
            spec = privacy_spec(c)
            res = [run_estimator(c, technique, p_, b_, spec, s, keep_trace=False, q=float(q_))
                   for p_, b_, s in data[name]]
            per[name] = float(np.mean([r.rmse_density for r in res]))
        rows.append((float(q_), float(np.mean(list(per.values()))), per))
    rows.sort(key=lambda r: (np.isnan(r[1]), r[1]))
    return rows


# ---------------------------------------------------------------------------
# output files

REPORT_FIELDS = ("technique", "axis_value", "rmse_density", "rmse_speed", "mean_step_time_s")
RUN_FIELDS = ("technique", "seed", "axis_value", "rmse_density", "rmse_speed",
              "mean_step_time_s", "n_warnings", "error")
TRAJECTORY_FIELDS = ("k", "segment", "rho_true", "rho_hat", "v_true", "v_hat")


def _atomic_write(path: Path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def aggregate(results: list[RunResult]) -> list[dict]:
    """Seed-averaged rows per (technique, axis value); failed runs are excluded."""
    groups: dict = {}
    for r in results:
        groups.setdefault((r.technique, r.axis_value), []).append(r)
    rows = []
    for (tech, axis), rs in groups.items():
        good = [r for r in rs if r.ok]
        mean = (lambda a: float(np.mean([getattr(r, a) for r in good]))) if good else (
            lambda a: float("nan"))
        rows.append({"technique": tech, "axis_value": axis, "rmse_density": mean("rmse_density"),
                     "rmse_speed": mean("rmse_speed"), "mean_step_time_s": mean("mean_step_time_s")})
    return rows


def write_report(path, results: list[RunResult]) -> None:
    def w(fh):
        wr = csv.DictWriter(fh, REPORT_FIELDS)
        wr.writeheader()
        wr.writerows(aggregate(results))
    _atomic_write(path, w)


def write_runs(path, results: list[RunResult]) -> None:
    def w(fh):
        wr = csv.DictWriter(fh, RUN_FIELDS)
        wr.writeheader()
        for r in results:
            wr.writerow({f: getattr(r, f) for f in RUN_FIELDS})
    _atomic_write(path, w)


def write_trajectory(path, truth: np.ndarray, estimate: np.ndarray, params: arz.ArzParams,
                     first: int = 0) -> None:
    """Long-format rows ``(k, segment, ...)`` for steps ``first..K``, speeds as scored."""
    ht = reported_speed(sensing.h_full(truth, params), params)
    he = reported_speed(sensing.h_full(estimate, params), params)

    def w(fh):
        wr = csv.writer(fh)
        wr.writerow(TRAJECTORY_FIELDS)
        for k in range(first, len(truth)):
            for s in range(truth.shape[1] // 2):
                wr.writerow((k, s, ht[k, 2 * s], he[k, 2 * s], ht[k, 2 * s + 1], he[k, 2 * s + 1]))
    _atomic_write(path, w)


def write_estimate_trace(path, estimate: np.ndarray, step_times: np.ndarray) -> None:
    """One row per step: ``k``, every state estimate, and the step wall time."""
    n = estimate.shape[1]
    names = [f"{'rho' if i % 2 == 0 else 'psi'}_{i // 2}" for i in range(n)]

    def w(fh):
        wr = csv.writer(fh)
        wr.writerow(["k", *names, "wall_time_s"])
        for k in range(len(estimate)):
            t = step_times[k - 1] if k > 0 else 0.0
            wr.writerow([k, *estimate[k].tolist(), t])
    _atomic_write(path, w)


def write_manifest(path, data: dict) -> None:
    _atomic_write(path, lambda fh: json.dump(data, fh, indent=2, sort_keys=True))
