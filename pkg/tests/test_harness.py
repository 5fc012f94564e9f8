import csv
import dataclasses
import json

import numpy as np
import pytest

from dptse import arz, cli, experiments as ex, sensing
from dptse.estimators import TECHNIQUES
from dptse.scenario import ConfigError, from_dict, load_config
from dptse.sensing import SensorSchedule


@pytest.fixture(scope="module")
def cfg():
    return load_config()


def short(cfg, steps=40, **patch):
    raw = {"simulation": {"duration_steps": steps, "seeds": [0]}}
    for k, v in patch.items():
        raw.setdefault(k, {}).update(v)
    return cfg.with_overrides(raw)


def dense(cfg):
    """Every segment, ramps included, sensed without privacy noise."""
    c = cfg.with_overrides({"privacy": {"enabled": False}})
    every = tuple(range(c.topology.n_segments))
    return dataclasses.replace(c, schedule=SensorSchedule(c.topology.n_mainline, every))


def write_config(path, c):
    path.write_text(json.dumps({"config": c.to_dict()}))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_default_scenario(self, cfg):
        assert cfg.topology.n_x == 38 and cfg.topology.n_mainline == 15
        assert list(cfg.topology.output_segments()) == [14, 17, 18]
        assert cfg.schedule.cv_initial_segments == (0, 3, 6, 9, 12)
        assert cfg.duration == 700
        assert cfg.params.v_f == 102.0 and cfg.params.rho_m == 333.0

    @pytest.mark.parametrize("patch", [
        {"demand": {"mainline_vehh": [[0, 200, 2050.0], [100, 700, 2050.0]]}},
        {"demand": {"mainline_vehh": [[0, 200, 2050.0], [300, 700, 2050.0]]}},
        {"demand": {"mainline_vehh": [[0, 500, 2050.0]]}},
        {"incident": [{"segment": 20, "t_start_s": 0, "t_end_s": 10, "speed_cap_kmh": 5.0}]},
        {"sensors": {"fixed_segments": [3]}},
        {"privacy": {"epsilon": 0.0}},
        {"privacy": {"delta": 0.7}},
        {"estimators": {"techniques": ["pf"]}},
        {"estimators": {"q": -1.0}},
        {"estimators": {"mhe": {"horizon": 800}}},
        {"boundary": {"off_ramp_density_vehkm": [5.0]}},
    ])
    def test_rejected(self, cfg, patch):
        with pytest.raises(ConfigError):
            cfg.with_overrides(patch)

    def test_missing_key(self, cfg):
        raw = cfg.to_dict()
        del raw["model"]
        with pytest.raises(ConfigError):
            from_dict(raw)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.toml")
        bad = tmp_path / "bad.toml"
        bad.write_text("[model\n")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_cli_exit_code_config_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[model]\nv_f_kmh = 1\n")
        assert cli.main(["estimate", "--config", str(bad), "--out", str(tmp_path)]) == 2


class TestPipeline:
    def test_rmse_of_truth_is_zero(self, cfg):
        plant = ex.run_plant(short(cfg), 0)
        assert ex.rmse(plant.x, plant.x, cfg.params, 5) == (0.0, 0.0)

    def test_deterministic(self, cfg):
        c = short(cfg)
        a = ex.run_experiment(c, TECHNIQUES, (0, 1), keep_trace=True)
        b = ex.run_experiment(c, TECHNIQUES, (0, 1), keep_trace=True)
        for r1, r2 in zip(a, b):
            assert (r1.rmse_density, r1.rmse_speed) == (r2.rmse_density, r2.rmse_speed)
            np.testing.assert_array_equal(r1.estimates, r2.estimates)

    def test_zero_demand_drains(self, cfg):
        zero = [[0, 700, 0.0]]
        c = cfg.with_overrides({
            "demand": {"mainline_vehh": zero, "on_ramps_vehh": [zero, zero]},
            "incident": [], "boundary": {"downstream_density_vehkm": 0.0,
                                         "off_ramp_density_vehkm": [0.0, 0.0]}})
        plant = ex.run_plant(c, 0)
        assert np.abs(plant.x).max() == 0.0  # the empty network stays empty
        x = ex.initial_estimate(cfg)  # loaded network, then no inflow
        mass = [x[0::2].sum()]
        for k in range(700):
            x = arz.step(x, plant.u[k], c.topology, c.params)
            mass.append(x[0::2].sum())
        assert np.all(np.diff(mass) <= 1e-12)
        assert mass[-1] < 1e-3 * mass[0]

    def test_steady_state(self, cfg):
        c = cfg.with_overrides({"demand": {"mainline_vehh": [[0, 700, 2050.0]]},
                                "incident": []})
        plant = ex.run_plant(c, 0)
        np.testing.assert_allclose(plant.x, np.tile(plant.x[0], (701, 1)), atol=1e-8)
        np.testing.assert_allclose(plant.x[0], ex.initial_estimate(c), atol=1e-8)

    def test_privacy_disabled_is_noise_free(self, cfg):
        c = short(cfg, privacy={"enabled": False})
        plant = ex.run_plant(c, 0)
        spec = ex.privacy_spec(c)
        assert spec.sigma_rho == 0.0
        for k, b in enumerate(ex.measurements(c, plant, spec, 0)):
            ref = sensing.measure(plant.x[k], c.schedule, k, c.params)
            np.testing.assert_array_equal(b.values, ref.values)

    def test_derived_privacy_spec(self, cfg):
        spec = ex.privacy_spec(cfg)
        assert spec.n_p_max == 8 and spec.t_avg == 4
        assert spec.delta_rho == pytest.approx(80.0)
        assert spec.sigma_rho == pytest.approx(1.9070400457036369 * 80.0)

    def test_plant_perturbation_stays_admissible(self, cfg):
        c = short(cfg, 200, simulation={"plant_noise_density_vehkm": 5.0,
                                        "plant_noise_relflow_vehh": 500.0})
        x = ex.run_plant(c, 0).x
        rho, psi = x[:, 0::2], x[:, 1::2]
        p = c.params
        assert np.all((rho >= 0) & (rho <= p.rho_m))
        assert np.all(psi <= rho * p.v_f + 1e-9)
        assert np.all(psi >= rho * p.v_f * (rho / p.rho_m) ** p.gamma - 1e-9)

    def test_failed_run_is_recorded(self, cfg, monkeypatch):
        def boom(*a, **k):
            raise np.linalg.LinAlgError("forced")
        c = short(cfg)
        monkeypatch.setattr(ex.ArzSystem, "linearize", boom)
        res = ex.run_experiment(c, ("ekf", "enkf"), (0,))
        assert not res[0].ok and "LinAlgError" in res[0].error
        assert res[1].ok


@pytest.mark.parametrize("technique", TECHNIQUES)
def test_dense_zero_noise_sanity(cfg, technique):
    c = dense(cfg)
    res = ex.run_experiment(c, (technique,), (0,), keep_trace=True)[0]
    plant = ex.run_plant(c, 0)
    mean_density = plant.x[ex.warmup_steps(c):, 0::2].mean()
    assert res.ok
    assert res.rmse_density < 0.05 * mean_density


@pytest.mark.parametrize("technique", TECHNIQUES)
def test_large_epsilon_approaches_zero_noise(cfg, technique):
    base = ex.with_cv_count(cfg, 5)
    seeds = cfg.seeds
    quiet = ex.run_experiment(base.with_overrides({"privacy": {"enabled": False}}),
                              (technique,), seeds)
    loose = ex.run_experiment(base.with_overrides({"privacy": {"epsilon": 10.0}}),
                              (technique,), seeds)
    r0 = np.mean([r.rmse_density for r in quiet])
    r10 = np.mean([r.rmse_density for r in loose])
    assert r10 <= 1.10 * r0, f"eps=10 {r10:.3f} vs zero-noise {r0:.3f}"


@pytest.mark.parametrize("technique", TECHNIQUES)
def test_delta_range_below_epsilon_range(cfg, technique):
    seeds = cfg.seeds[:2]

    def spread(axis, grid):
        res = ex.sweep_privacy(cfg, axis, grid, (technique,), seeds)
        means = [np.mean([r.rmse_density for r in res if r.axis_value == g]) for g in grid]
        return max(means) - min(means)

    assert spread("delta", (0.01, 0.05, 0.1)) < spread("epsilon", (0.1, 1.0))


class TestCli:
    def test_simulate(self, cfg, tmp_path):
        conf = write_config(tmp_path / "c.json", short(cfg))
        assert cli.main(["simulate", "--config", conf, "--out", str(tmp_path / "o")]) == 0
        rows = read_csv(tmp_path / "o" / "trajectory.csv")
        assert len(rows) == 41 * 19
        assert (tmp_path / "o" / "manifest.json").exists()

    def test_estimate_outputs_and_row_counts(self, cfg, tmp_path):
        c = short(cfg)
        conf = write_config(tmp_path / "c.json", c)
        out = tmp_path / "o"
        assert cli.main(["estimate", "--config", conf, "--technique", "all", "--seed", "0",
                         "--out", str(out)]) == 0
        report = read_csv(out / "report.csv")
        assert [r["technique"] for r in report] == list(TECHNIQUES)
        assert set(report[0]) == set(ex.REPORT_FIELDS)
        traj = read_csv(out / "trajectory_mhe_seed0.csv")
        assert len(traj) == (c.duration + 1 - ex.warmup_steps(c)) * 19
        assert set(traj[0]) == set(ex.TRAJECTORY_FIELDS)
        trace = read_csv(out / "trace_ekf_seed0.csv")
        assert len(trace) == c.duration + 1

    def test_manifest_replay_is_bit_exact(self, cfg, tmp_path):
        conf = write_config(tmp_path / "c.json", short(cfg))
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["estimate", "--config", conf, "--seed", "3", "--out", str(a)]) == 0
        assert cli.main(["estimate", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
        for name in ("trajectory_ekf_seed3.csv", "trajectory_enkf_seed3.csv",
                     "trajectory_mhe_seed3.csv", "trajectory_ukf_seed3.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        ra, rb = read_csv(a / "runs.csv"), read_csv(b / "runs.csv")
        assert [(r["rmse_density"], r["rmse_speed"]) for r in ra] == [
            (r["rmse_density"], r["rmse_speed"]) for r in rb]

    @pytest.mark.parametrize("axis,grid,count", [("epsilon", "2", 1), ("delta", "0.05", 1),
                                                 ("cv", "5:6", 2)])
    def test_sweep_grid_rows(self, cfg, tmp_path, axis, grid, count):
        conf = write_config(tmp_path / "c.json", short(cfg, 20))
        out = tmp_path / "o"
        assert cli.main(["sweep", "--config", conf, "--axis", axis, "--grid", grid,
                         "--technique", "ekf", "--out", str(out)]) == 0
        rows = read_csv(out / f"sweep_{axis}.csv")
        assert len(rows) == count
        manifest = json.loads((out / f"sweep_{axis}_manifest.json").read_text())
        assert manifest["axis"] == axis

    def test_emit_only_manifest(self, cfg, tmp_path):
        conf = write_config(tmp_path / "c.json", short(cfg, 20))
        out = tmp_path / "o"
        assert cli.main(["estimate", "--config", conf, "--technique", "ekf",
                         "--emit", "manifest", "--out", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == ["manifest.json"]

    def test_numerical_failure_exit_code(self, cfg, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise np.linalg.LinAlgError("forced")
        monkeypatch.setattr(ex.ArzSystem, "linearize", boom)
        conf = write_config(tmp_path / "c.json", short(cfg, 20))
        assert cli.main(["estimate", "--config", conf, "--technique", "ekf",
                         "--out", str(tmp_path / "o")]) == 3

    def test_tune(self, cfg, tmp_path, capsys):
        conf = write_config(tmp_path / "c.json", short(cfg, 20))
        assert cli.main(["tune", "--config", conf, "--technique", "ekf", "--q-grid", "1,10",
                         "--r-scale-grid", "1"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "q,r_scale,rmse_density,rmse_speed" and len(lines) == 3
