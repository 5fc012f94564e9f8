"""Scenario configuration: TOML in human units, validated into dataclasses."""
from __future__ import annotations

import copy
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .arz import ArzParams, ConfigurationError, NetworkTopology, OffRamp, OnRamp
from .estimators import TECHNIQUES, EstimatorConfig, MheParams, UkfParams
from .sensing import SensorSchedule, spread_segments

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    t_start_s: float
    t_end_s: float
    value: float


@dataclass(frozen=True)
class Incident:
    segment: int
    t_start_s: float
    t_end_s: float
    speed_cap_kmh: float


@dataclass
class ScenarioConfig:
    params: ArzParams
    topology: NetworkTopology
    upstream_w: float
    on_ramp_w: tuple[float, ...]
    downstream_density: float
    off_ramp_density: tuple[float, ...]
    mainline_demand: tuple[Interval, ...]
    on_ramp_demand: tuple[tuple[Interval, ...], ...]
    incidents: tuple[Incident, ...]
    schedule: SensorSchedule
    privacy_enabled: bool
    epsilon: float
    delta: float
    n_p_max: int | None  # None: derive from the schedule
    t_avg: float | None  # None: derive from free-flow transit time
    techniques: tuple[str, ...]
    estimator: dict
    duration: int
    spinup: int
    plant_noise: tuple[float, float]
    seeds: tuple[int, ...]
    raw: dict = field(repr=False, default_factory=dict)

    def estimator_config(self, technique: str, **overrides) -> EstimatorConfig:
        e = dict(self.estimator)
        e.update(e.pop("overrides", {}).get(technique, {}))
        e.update(overrides)
        return EstimatorConfig(
            technique=technique, q=e["q"], r=e["r"], r_density=e.get("r_density"),
            r_speed=e.get("r_speed"), strict_scalar_r=e["strict_scalar_r"], p0=e["p0"],
            ukf=UkfParams(**e["ukf"]), ensemble_size=e["ensemble_size"],
            mhe=MheParams(**e["mhe"]),
        )

    def with_overrides(self, patch: dict) -> "ScenarioConfig":
        """New config from the raw tables deep-merged with ``patch``."""
        return from_dict(_merge(copy.deepcopy(self.raw), patch))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _merge(base: dict, patch: dict) -> dict:
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _intervals(rows, duration_s, what):
    out = tuple(Interval(float(a), float(b), float(v)) for a, b, v in rows)
    ordered = sorted(out, key=lambda i: i.t_start_s)
    t = 0.0
    for iv in ordered:
        if iv.t_end_s <= iv.t_start_s:
            raise ConfigError(f"{what}: empty interval {iv}")
        if iv.t_start_s < t - 1e-9:
            raise ConfigError(f"{what}: overlapping intervals")
        if iv.t_start_s > t + 1e-9:
            raise ConfigError(f"{what}: gap before t={iv.t_start_s}")
        if iv.value < 0:
            raise ConfigError(f"{what}: negative demand")
        t = iv.t_end_s
    if t < duration_s - 1e-9:
        raise ConfigError(f"{what}: intervals end at {t} s before the run ends ({duration_s} s)")
    return tuple(ordered)


def profile_value(intervals, t_s: float) -> float:
    for iv in intervals:
        if iv.t_start_s <= t_s < iv.t_end_s:
            return iv.value
    return intervals[-1].value


def from_dict(raw: dict) -> ScenarioConfig:
    try:
        return _from_dict(raw)
    except ConfigError:
        raise
    except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc!r}") from exc


def _from_dict(raw: dict) -> ScenarioConfig:
    m = raw["model"]
    params = ArzParams.from_human(
        v_f_kmh=m["v_f_kmh"], rho_m_vehkm=m["rho_m_vehkm"], tau_steps=m["tau_steps"],
        gamma=m["gamma"], segment_length_m=m["segment_length_m"], time_step_s=m["time_step_s"],
        rho_floor_vehkm=m.get("rho_floor_vehkm", 1e-6))
    n = raw["network"]
    topo = NetworkTopology(
        n["n_mainline"],
        tuple(OnRamp(**r) for r in n.get("on_ramps", [])),
        tuple(OffRamp(**r) for r in n.get("off_ramps", [])))
    n_on, n_off = len(topo.on_ramps), len(topo.off_ramps)

    sim = raw["simulation"]
    duration = int(sim["duration_steps"])
    duration_s = duration * params.time_step_s

    b = raw.get("boundary", {})
    on_w = tuple(b.get("on_ramp_w_kmh", [params.v_f] * n_on))
    off_rho = tuple(b.get("off_ramp_density_vehkm", [0.0] * n_off))
    down = float(b.get("downstream_density_vehkm", 0.0))
    if len(on_w) != n_on or len(off_rho) != n_off:
        raise ConfigError("boundary lists must match the ramp counts")
    if not all(0 <= r <= params.rho_m for r in off_rho + (down,)):
        raise ConfigError("boundary densities must lie in [0, rho_m]")

    d = raw["demand"]
    mainline = _intervals(d["mainline_vehh"], duration_s, "mainline demand")
    ramps = tuple(_intervals(r, duration_s, f"on-ramp {i} demand")
                  for i, r in enumerate(d.get("on_ramps_vehh", [])))
    if len(ramps) != n_on:
        raise ConfigError("need one demand profile per on-ramp")

    incidents = tuple(Incident(int(i["segment"]), float(i["t_start_s"]), float(i["t_end_s"]),
                               float(i["speed_cap_kmh"])) for i in raw.get("incident", []))
    for inc in incidents:
        if not 0 <= inc.segment < topo.n_mainline:
            raise ConfigError(f"incident segment {inc.segment} is not a mainline segment")
        if inc.t_end_s <= inc.t_start_s or inc.speed_cap_kmh < 0:
            raise ConfigError(f"bad incident {inc}")

    s = raw["sensors"]
    fixed = s.get("fixed_segments", "outputs")
    if fixed == "outputs":
        fixed = topo.output_segments()
    if not set(fixed) <= set(topo.output_segments()):
        raise ConfigError("fixed sensors must sit on output segments")
    if "cv_initial_segments" in s:
        cv = tuple(s["cv_initial_segments"])
    else:
        cv = spread_segments(int(s.get("cv_segment_count", 0)), topo.n_mainline)
    schedule = SensorSchedule(topo.n_mainline, tuple(fixed), cv,
                              int(s.get("rotation_period_steps", 4)))

    pr = raw["privacy"]
    eps, delta = float(pr["epsilon"]), float(pr["delta"])
    if eps <= 0 or not 0 < delta < 0.5:
        raise ConfigError("need epsilon > 0 and 0 < delta < 0.5")
    n_p = pr.get("n_p_max", "auto")
    t_avg = pr.get("t_avg_steps", "auto")

    e = copy.deepcopy(raw["estimators"])
    techniques = tuple(t.lower() for t in e.pop("techniques", TECHNIQUES))
    if not set(techniques) <= set(TECHNIQUES):
        raise ConfigError(f"unknown technique in {techniques}")
    est = {"q": 1e-2, "r": 1.0, "r_floor": 1e-2, "strict_scalar_r": False, "p0": 1e-3,
           "ensemble_size": 100, "ukf": {}, "mhe": {}}
    est.update(e)
    if est["mhe"].get("horizon", 10) > duration:
        raise ConfigError("duration must be at least the MHE horizon")
    # validate each technique eagerly so config errors surface before a run
    cfg = ScenarioConfig(
        params, topo, float(b.get("upstream_w_kmh", params.v_f)), on_w, down, off_rho,
        mainline, ramps, incidents, schedule, bool(pr.get("enabled", True)), eps, delta,
        None if n_p == "auto" else int(n_p), None if t_avg == "auto" else float(t_avg),
        techniques, est, duration, int(sim.get("spinup_steps", 0)),
        (float(sim.get("plant_noise_density_vehkm", 0.0)),
         float(sim.get("plant_noise_relflow_vehh", 0.0))),
        tuple(int(x) for x in sim.get("seeds", [0])), copy.deepcopy(raw))
    for t in techniques:
        cfg.estimator_config(t)
    return cfg


def default_config_path() -> Path:
    return Path(str(resources.files("dptse") / "data" / "highway_ramps.toml"))


def load_config(path=None) -> ScenarioConfig:
    """Read a TOML scenario, or a JSON run manifest carrying a ``config`` table."""
    path = Path(path) if path is not None else default_config_path()
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            raw = json.loads(text)["config"]
        else:
            raw = tomllib.loads(text.decode())
    except (KeyError, ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw)
