import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dptse import arz
from dptse.arz import ArzParams, NetworkTopology, OffRamp, OnRamp

P = ArzParams()

# mpmath, 30 digits
PRESSURE_100 = 9.19838757677
SPEED_50_5100 = 99.7004031058
DEMAND_50 = 4985.02015529
SUPPLY_250 = 11127.5194113
CRITICAL_102 = 192.257639640


def scenario_topology():
    return NetworkTopology(15, (OnRamp(2), OnRamp(8)), (OffRamp(5), OffRamp(11)))


def ring(n=19):
    return NetworkTopology(n, ring=True)


def random_state(rng, topo, p=P, lo=0.05, hi=0.95):
    """Interior states with ``w`` between the pressure and ``v_f``."""
    rho = rng.uniform(lo, hi, topo.n_segments) * p.rho_m
    w = arz._p(rho, p) + rng.uniform(0.05, 0.95, topo.n_segments) * (p.v_f - arz._p(rho, p))
    x = np.empty(topo.n_x)
    x[0::2], x[1::2] = rho, rho * w
    return x


def random_input(rng, topo, p=P):
    n_i, n_o = topo.n_on, topo.n_off
    return arz.make_input(topo, rng.uniform(500, 5000), rng.uniform(60, p.v_f),
                          rng.uniform(5, 200), rng.uniform(50, 800, n_i),
                          rng.uniform(60, p.v_f, n_i), rng.uniform(5, 200, n_o))


class TestClosure:
    def test_pressure_values(self):
        assert arz.pressure(0.0, P) == 0.0
        assert arz.pressure(P.rho_m, P) == pytest.approx(P.v_f)
        assert arz.pressure(100.0, P) == pytest.approx(PRESSURE_100, rel=1e-10)

    def test_pressure_domain(self):
        with pytest.raises(arz.DomainError):
            arz.pressure(-1.0, P)
        with pytest.raises(arz.DomainError):
            arz.pressure(P.rho_m + 1.0, P)

    def test_equilibrium_speed(self):
        assert arz.equilibrium_speed(0.0, P) == P.v_f
        assert arz.equilibrium_speed(P.rho_m, P) == pytest.approx(0.0, abs=1e-12)
        lin = ArzParams(gamma=1.0)
        assert arz.equilibrium_speed(lin.rho_m / 2, lin) == pytest.approx(lin.v_f / 2)

    def test_speed_from_state(self):
        assert arz.speed_from_state(100.0, 100 * (80 + arz.pressure(100.0, P)), P) == pytest.approx(80)
        assert arz.speed_from_state(P.rho_m, P.rho_m * P.v_f, P) == pytest.approx(0.0, abs=1e-12)
        assert arz.speed_from_state(50.0, 5100.0, P) == pytest.approx(SPEED_50_5100, rel=1e-10)
        with pytest.raises(arz.DegenerateDensityError):
            arz.speed_from_state(0.0, 1.0, P)
        assert arz.speed(0.0, 5.0, P) == P.v_f

    def test_demand_and_critical_density(self):
        assert arz.demand(0.0, 102.0, P) == 0.0
        assert arz.critical_density(102.0, P) == pytest.approx(CRITICAL_102, rel=1e-10)
        assert arz.demand(50.0, 102.0, P) == pytest.approx(DEMAND_50, rel=1e-10)

    def test_critical_density_maximises_flux(self):
        grid = np.linspace(0, P.rho_m, 200001)
        flux = grid * (102.0 - arz._p(grid, P))
        assert grid[flux.argmax()] == pytest.approx(CRITICAL_102, abs=P.rho_m / 2e5)

    def test_supply_values(self):
        w = 102.0
        sigma = arz.critical_density(w, P)
        assert arz.supply(0.0, w, P) == pytest.approx(sigma * (w - arz._p(sigma, P)))
        w_jam = arz._p(P.rho_m, P)
        assert arz.supply(P.rho_m, w_jam, P) == pytest.approx(0.0, abs=1e-9)
        assert arz.supply(250.0, 102.0, P) == pytest.approx(SUPPLY_250, rel=1e-10)

    @given(st.floats(0, 333), st.floats(0.0, 1.0), st.floats(0, 333), st.floats(0.0, 1.0))
    def test_flux_below_demand_and_supply(self, r_up, a_up, r_dn, a_dn):
        def cell(r, a):
            w = arz._p(r, P) + a * (P.v_f - arz._p(r, P))
            return np.array([r, r * w])
        up, down = cell(r_up, a_up), cell(r_dn, a_dn)
        q, phi = arz.interface_flux(up, down, P)
        w_up = up[1] / up[0] if up[0] > P.rho_floor else P.v_f
        assert q >= 0
        assert q <= arz.demand(up[0], w_up, P) + 1e-9
        v_dn = arz.speed(down[0], down[1], P)
        rho_star, _ = arz._intermediate_density(w_up, v_dn, P)
        assert q <= arz.supply(rho_star, w_up, P) + 1e-9
        assert phi == pytest.approx(q * w_up)

    def test_uniform_flux_is_rho_v(self):
        rho = 40.0
        x = np.array([rho, rho * P.v_f])
        q, _ = arz.interface_flux(x, x, P)
        assert q == pytest.approx(rho * arz.equilibrium_speed(rho, P))

    def test_jam_blocks_flow(self):
        w = arz._p(P.rho_m, P)
        jam = np.array([P.rho_m, P.rho_m * w])
        q, _ = arz.interface_flux(jam, jam, P)
        assert q == pytest.approx(0.0, abs=1e-9)

    def test_flux_matches_branch_brute_force(self):
        up = np.array([50.0, 50.0 * P.v_f])
        down = np.array([300.0, 300.0 * P.v_f])
        q, _ = arz.interface_flux(up, down, P)
        v_dn = P.v_f - arz._p(300.0, P)
        rho_star = P.rho_m * ((P.v_f - v_dn) / P.v_f) ** 0.5
        sigma = P.rho_m * (P.v_f / (3 * P.v_f)) ** 0.5
        D = 50 * (P.v_f - arz._p(50.0, P)) if 50 < sigma else sigma * (P.v_f - arz._p(sigma, P))
        S = rho_star * (P.v_f - arz._p(rho_star, P)) if rho_star > sigma else sigma * (
            P.v_f - arz._p(sigma, P))
        assert q == pytest.approx(min(D, S), rel=1e-12)


class TestParams:
    def test_cfl_violation(self):
        with pytest.raises(arz.ConfigurationError):
            ArzParams.from_human(time_step_s=5.0)

    def test_human_units(self):
        p = ArzParams.from_human(segment_length_m=100.0, time_step_s=1.0)
        assert p.l == pytest.approx(0.1)
        assert p.T == pytest.approx(1 / 3600)

    def test_topology_sizes(self):
        topo = scenario_topology()
        assert (topo.n_segments, topo.n_x, topo.n_u) == (19, 38, 9)
        assert topo.output_segments() == [14, 17, 18]

    def test_bad_junction(self):
        with pytest.raises(arz.ConfigurationError):
            NetworkTopology(15, (OnRamp(14),), ())


class TestStep:
    def test_ring_equilibrium_fixed_point(self):
        topo = ring()
        x = arz.equilibrium_state(80.0, topo, P)
        np.testing.assert_allclose(arz.step(x, np.zeros(topo.n_u), topo, P), x, rtol=1e-13)

    def test_ring_conservation(self):
        rng = np.random.default_rng(3)
        topo = ring()
        x = random_state(rng, topo)
        total = x[0::2].sum()
        for _ in range(1000):
            x = arz.step(x, np.zeros(topo.n_u), topo, P)
        assert abs(x[0::2].sum() - total) / total < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_step_stays_in_bounds(self, seed):
        rng = np.random.default_rng(seed)
        topo = scenario_topology()
        x = rng.uniform(0, 1, topo.n_x) * arz.state_bounds(topo, P)[1]
        u = random_input(rng, topo)
        u[0] = rng.uniform(0, 1e5)
        lo, hi = arz.state_bounds(topo, P)
        xn = arz.step(x, u, topo, P)
        assert np.all(xn >= lo) and np.all(xn <= hi)

    def test_batched_step_matches_loop(self):
        rng = np.random.default_rng(0)
        topo = scenario_topology()
        X = np.array([random_state(rng, topo) for _ in range(5)])
        U = np.array([random_input(rng, topo) for _ in range(5)])
        batched = arz.step(X, U, topo, P)
        for i in range(5):
            np.testing.assert_array_equal(batched[i], arz.step(X[i], U[i], topo, P))

    def test_zero_demand_drains(self):
        topo = scenario_topology()
        x = arz.equilibrium_state(30.0, topo, P)
        u = arz.make_input(topo, 0.0, P.v_f, 0.0, [0, 0], [P.v_f] * 2, [0, 0])
        for _ in range(2000):
            x = arz.step(x, u, topo, P)
        assert x[0::2].max() < 1e-3

    def test_speed_cap_limits_outflow(self):
        topo = scenario_topology()
        x = arz.equilibrium_state(100.0, topo, P)
        u = arz.make_input(topo, 2000.0, P.v_f, 25.0, [300, 300], [P.v_f] * 2, [5, 5])
        cap = np.full(topo.n_segments, np.inf)
        cap[10] = 10.0
        free, capped = arz.step(x, u, topo, P), arz.step(x, u, topo, P, cap)
        assert capped[20] > free[20]  # outflow restricted, density accumulates
        assert capped[22] < free[22]


class TestLinearize:
    def test_taylor_anchor(self):
        rng = np.random.default_rng(1)
        topo = scenario_topology()
        x0, u0 = random_state(rng, topo), random_input(rng, topo)
        A, B, c = arz.linearize(x0, u0, topo, P)
        np.testing.assert_allclose(A @ x0 + B @ u0 + c, arz.step(x0, u0, topo, P), rtol=1e-12)

    def test_second_order_remainder(self):
        rng = np.random.default_rng(7)
        topo = scenario_topology()
        checked = 0
        while checked < 5:
            x0, u0 = random_state(rng, topo), random_input(rng, topo)
            if arz.switch_distance(x0, u0, topo, P) < 1e-2:
                continue
            A, B, c = arz.linearize(x0, u0, topo, P)
            d = rng.standard_normal(topo.n_x) * np.tile([1.0, P.v_f], topo.n_segments) * 1e-2
            errs = []
            for h in (1.0, 0.5):
                x = x0 + h * d
                errs.append(np.linalg.norm(arz.step(x, u0, topo, P) - (A @ x + B @ u0 + c)))
            assert errs[0] / errs[1] >= 3.5
            checked += 1

    def test_full_jam_is_supply_bound_fixed_point(self):
        topo = scenario_topology()
        w = arz._p(P.rho_m, P)
        x0 = np.tile([P.rho_m, P.rho_m * w], topo.n_segments)
        u0 = arz.make_input(topo, 5000.0, P.v_f, P.rho_m, [500, 500], [P.v_f] * 2,
                            [P.rho_m, P.rho_m])
        np.testing.assert_allclose(arz.step(x0, u0, topo, P), x0, atol=1e-9)
        A, _, _ = arz.linearize(x0, u0, topo, P)
        # supply binds everywhere: no density row depends on the upstream state
        for i in range(1, topo.n_mainline):
            assert A[2 * i, 2 * (i - 1)] == 0 and A[2 * i, 2 * (i - 1) + 1] == 0

    def test_near_jam_jacobian_matches_central_difference(self):
        topo = scenario_topology()
        rho = P.rho_m - 20.0
        x0 = np.tile([rho, rho * (arz._p(rho, P) + 3.0)], topo.n_segments)
        u0 = arz.make_input(topo, 5000.0, P.v_f, P.rho_m, [500, 500], [P.v_f] * 2,
                            [P.rho_m, P.rho_m])
        assert arz.switch_distance(x0, u0, topo, P) > 1e-3
        A, _, _ = arz.linearize(x0, u0, topo, P)
        scale = np.tile([1.0, P.v_f], topo.n_segments)
        for j in range(topo.n_x):
            e = np.zeros(topo.n_x)
            e[j] = 1e-6 * scale[j]
            fd = (arz.step(x0 + e, u0, topo, P) - arz.step(x0 - e, u0, topo, P)) / (2 * e[j])
            np.testing.assert_allclose(A[:, j], fd, atol=1e-5, rtol=1e-5)

    def test_equilibrium_flow_routing(self):
        topo = scenario_topology()
        f = arz.free_flow_flows(topo, 2050.0, [320.0, 300.0])
        assert f[3] == pytest.approx(2370.0)
        assert f[17] == pytest.approx(0.15 * 2370.0)
        assert f[6] == pytest.approx(0.85 * 2370.0)
        assert f[15] == 320.0

    def test_project_admissible(self):
        x = np.array([10.0, 5000.0, -1.0, 3.0, 400.0, 0.0])
        y = arz.project_admissible(x, P)
        assert y[1] == pytest.approx(10 * P.v_f)
        assert y[2] == 0 and y[3] == 0
        assert y[4] == P.rho_m and y[5] == pytest.approx(P.rho_m * arz._p(P.rho_m, P))
