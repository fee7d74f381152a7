import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corridorflow import lwr
from corridorflow.lwr import (
    CFLError,
    InvalidParameterError,
    LinkGeometry,
    TriangularFD,
    ValueConditionSet,
)

from conftest import compatible_vc

T = 20.0


def steps(*vals):
    return np.asarray(vals, dtype=float)


class TestCriticalDensity:
    def test_reference_value(self):
        # 0.0702 veh/m aggregate = 4 lanes x 0.01755
        assert lwr.critical_density(30.0, -4.9, 0.5) == pytest.approx(0.0702, abs=1e-4)

    def test_symmetric_apex(self):
        # w = -vf puts the apex at half the jam density
        assert lwr.critical_density(12.0, -12.0, 0.3) == pytest.approx(0.15, abs=1e-12)

    def test_reduced_speed_value(self):
        # frozen: 0.5*4.9 / (20+4.9)
        assert lwr.critical_density(20.0, -4.9, 0.5) == pytest.approx(
            0.09839357429718876, abs=1e-9
        )

    @pytest.mark.parametrize("bad", [(0.0, -4.9, 0.5), (30.0, 4.9, 0.5), (30.0, -4.9, -1.0)])
    def test_sign_preconditions(self, bad):
        with pytest.raises(InvalidParameterError):
            lwr.critical_density(*bad)


class TestFlux:
    def test_empty_and_jammed(self, fd):
        assert lwr.flux(fd, 0.0) == pytest.approx(0.0, abs=1e-12)
        assert lwr.flux(fd, fd.rho_m) == pytest.approx(0.0, abs=1e-12)

    def test_capacity_at_reference_critical_density(self, fd):
        assert lwr.flux(fd, 0.07) == pytest.approx(2.1, abs=1e-9)

    def test_out_of_range(self, fd):
        with pytest.raises(InvalidParameterError):
            lwr.flux(fd, fd.rho_m + 0.1)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_concave_and_maximal_at_critical(self, a, b, lam):
        fd = TriangularFD(30.0, -4.9, 0.5)
        r1, r2 = a * fd.rho_m, b * fd.rho_m
        mid = lam * r1 + (1 - lam) * r2
        assert lwr.flux(fd, mid) >= lam * lwr.flux(fd, r1) + (1 - lam) * lwr.flux(fd, r2) - 1e-9
        assert lwr.flux(fd, fd.rho_c) >= lwr.flux(fd, r1) - 1e-9

    def test_apex_consistency(self, fd):
        assert fd.Q == pytest.approx(fd.vf * fd.rho_c, abs=1e-12)
        assert fd.Q == pytest.approx(fd.w * (fd.rho_c - fd.rho_m), abs=1e-12)
        assert 0.0 < fd.rho_c < fd.rho_m


class TestInitialComponent:
    def test_zero_density_free_flow_region(self, fd):
        geom = LinkGeometry(0.0, 600.0, 1)
        vc = ValueConditionSet([0.0], steps(0, 0), steps(0, 0), T)
        # any point downstream of the forward characteristic keeps count 0
        assert lwr.m_initial(vc, fd, geom, 1, 10.0, 450.0) == pytest.approx(0.0, abs=1e-12)

    def test_jammed_backward_branch_value(self, fd, geom):
        vc = ValueConditionSet([fd.rho_m, fd.rho_m], steps(*[0] * 8), steps(*[0] * 8), T)
        t = 30.0
        x = t * fd.w + geom.X / 2
        assert lwr.m_initial(vc, fd, geom, 1, t, x) == pytest.approx(-fd.rho_m * x, abs=1e-9)

    def test_outside_cone_is_infinite(self, fd, geom):
        vc = ValueConditionSet([0.1, 0.1], steps(*[0] * 8), steps(*[0] * 8), T)
        assert lwr.m_initial(vc, fd, geom, 2, 1.0, 0.0) == math.inf


class TestUpstreamComponent:
    def test_boundary_value_is_cumulative_count(self, fd, geom):
        vc = ValueConditionSet([0.0, 0.0], steps(*[2.1] * 8), steps(*[0] * 8), T)
        for n in range(1, 9):
            assert lwr.m_upstream(vc, fd, geom, n, n * T, geom.xi) == pytest.approx(
                2.1 * n * T, abs=1e-9
            )

    def test_translated_count_along_characteristic(self, fd, geom):
        vc = ValueConditionSet([0.0, 0.0], steps(*[2.1] * 8), steps(*[0] * 8), T)
        # 20 s of inflow at 2.1 observed 600 m downstream
        assert lwr.m_upstream(vc, fd, geom, 1, 40.0, geom.xi + 600.0) == pytest.approx(
            42.0, abs=1e-9
        )

    def test_before_characteristic_infinite(self, fd, geom):
        vc = ValueConditionSet([0.0, 0.0], steps(*[2.1] * 8), steps(*[0] * 8), T)
        assert lwr.m_upstream(vc, fd, geom, 1, 5.0, geom.chi) == math.inf


class TestDownstreamComponent:
    def test_boundary_value_subtracts_initial_mass(self, fd, geom):
        vc = ValueConditionSet([0.0, 0.0], steps(*[0] * 8), steps(*[1.0] * 8), T)
        for n in (1, 4, 8):
            assert lwr.m_downstream(vc, fd, geom, n, n * T, geom.chi) == pytest.approx(
                1.0 * n * T, abs=1e-9
            )

    def test_before_backwave_infinite(self, fd, geom):
        vc = ValueConditionSet([0.1, 0.1], steps(*[0] * 8), steps(*[0.5] * 8), T)
        assert lwr.m_downstream(vc, fd, geom, 1, 1.0, geom.xi) == math.inf

    def test_blocked_outflow_jam_accumulation(self, fd, geom):
        vc = ValueConditionSet([0.0, 0.0], steps(*[0] * 8), steps(*[0] * 8), T)
        val = lwr.m_downstream(vc, fd, geom, 5, 100.0, geom.chi - 49.0)
        assert val == pytest.approx(24.5, abs=1e-9)


class TestMoskowitz:
    def test_initial_time_matches_initial_condition(self, fd, geom):
        rng = np.random.default_rng(11)
        vc = compatible_vc(fd, geom, rng)
        for k, x in ((1, 200.0), (2, 800.0)):
            expected = -np.sum(vc.initial_density[: k - 1]) * geom.X - vc.initial_density[
                k - 1
            ] * (x - (k - 1) * geom.X)
            assert lwr.moskowitz(vc, fd, geom, 0.0, x) == pytest.approx(expected, abs=1e-9)

    def test_upstream_component_attains_minimum_on_empty_road(self, fd, geom):
        vc = ValueConditionSet([0.0, 0.0], steps(*[2.1] * 8), steps(*[2.1] * 8), T)
        t, x = 40.0, geom.xi + 600.0
        comps = lwr.all_component_exprs(vc, fd, geom, t, x)
        values = {c.tag: c.value(fd, vc.inflow, vc.outflow) for c in comps}
        best = min(values.values())
        assert lwr.moskowitz(vc, fd, geom, t, x) == pytest.approx(best, abs=1e-12)
        assert min(values, key=values.get).startswith("up")

    def test_lower_bound_of_every_component(self, fd, geom):
        rng = np.random.default_rng(3)
        for _ in range(5):
            vc = compatible_vc(fd, geom, rng)
            t = rng.uniform(0.0, 8 * T)
            x = rng.uniform(geom.xi, geom.chi)
            m = lwr.moskowitz(vc, fd, geom, t, x)
            for comp in lwr.all_component_exprs(vc, fd, geom, t, x):
                assert m <= comp.value(fd, vc.inflow, vc.outflow) + 1e-9

    def test_monotone_in_time_and_space(self, fd, geom):
        rng = np.random.default_rng(7)
        for _ in range(5):
            vc = compatible_vc(fd, geom, rng)
            ts = np.sort(rng.uniform(0.0, 8 * T, 4))
            xs = np.sort(rng.uniform(geom.xi, geom.chi, 4))
            for x in xs:
                vals = [lwr.moskowitz(vc, fd, geom, t, x) for t in ts]
                assert all(b >= a - 1e-7 for a, b in zip(vals, vals[1:]))
            for t in ts:
                vals = [lwr.moskowitz(vc, fd, geom, t, x) for x in xs]
                assert all(b <= a + 1e-7 for a, b in zip(vals, vals[1:]))


class TestDensityProfile:
    def test_initial_profile(self, fd, geom):
        vc = ValueConditionSet([0.12, 0.4], steps(*[0] * 8), steps(*[0] * 8), T)
        out = lwr.density_profile(vc, fd, geom, 0.0, [100.0, 900.0])
        assert out == pytest.approx([0.12, 0.4], abs=1e-9)

    def test_stationary_capacity_flow(self, fd, geom):
        vc = ValueConditionSet(
            [fd.rho_c, fd.rho_c], steps(*[fd.Q] * 8), steps(*[fd.Q] * 8), T
        )
        out = lwr.density_profile(vc, fd, geom, 100.0, np.linspace(50, 1150, 7))
        assert out == pytest.approx([fd.rho_c] * 7, abs=1e-9)

    def test_blocked_outflow_jams_tail(self, fd, geom):
        vc = ValueConditionSet([0.05, 0.05], steps(*[2.0] * 8), steps(*[0] * 8), T)
        out = lwr.density_profile(vc, fd, geom, 150.0, [geom.chi - 10.0])
        assert out[0] == pytest.approx(fd.rho_m, abs=1e-9)

    def test_bounds(self, fd, geom):
        rng = np.random.default_rng(23)
        for _ in range(5):
            vc = compatible_vc(fd, geom, rng)
            out = lwr.density_profile(
                vc, fd, geom, rng.uniform(0, 8 * T), np.linspace(0, 1200, 9)
            )
            assert np.all(out >= -1e-12)
            assert np.all(out <= fd.rho_m + 1e-12)


class TestGodunovOracle:
    def test_empty_road_stays_empty(self, fd, geom):
        vc = ValueConditionSet([0.0, 0.0], steps(*[0] * 8), steps(*[0] * 8), T)
        field = lwr.godunov_oracle(vc, fd, geom, 2.5, 150.0)
        assert np.max(np.abs(field.densities)) == 0.0

    def test_zero_flux_riemann_interface(self, fd):
        geom = LinkGeometry(0.0, 1200.0, 2)
        vc = ValueConditionSet([0.0, fd.rho_m], steps(*[0] * 8), steps(*[0] * 8), T)
        field = lwr.godunov_oracle(vc, fd, geom, 2.5, 150.0)
        # empty head and jammed tail exchange nothing while the exit is shut
        assert np.allclose(field.densities[-1], vc.initial_density.repeat(4))

    def test_cfl_guard(self, fd, geom):
        vc = ValueConditionSet([0.0, 0.0], steps(*[0] * 8), steps(*[0] * 8), T)
        with pytest.raises(CFLError):
            lwr.godunov_oracle(vc, fd, geom, 10.0, 150.0)

    def test_counts_and_densities_converge_to_analytic(self, fd, geom):
        rng = np.random.default_rng(42)
        t_end = 8 * T
        probes = (300.0, 600.0, 900.0)
        for trial in range(5):
            vc = compatible_vc(fd, geom, rng)
            count_errors = []
            for refine in (1, 2, 4, 8):
                dx = geom.X / (8 * refine)
                field = lwr.godunov_oracle(vc, fd, geom, dx / fd.vf, dx)
                step = field.densities.shape[0] - 1
                count_errors.append(
                    max(
                        abs(field.count(step, x, geom) - lwr.moskowitz(vc, fd, geom, t_end, x))
                        for x in probes
                    )
                )
                if refine == 1:
                    # exact cell means via count differences match the finite
                    # volume's own averaging
                    edges = geom.xi + dx * np.arange(field.densities.shape[1] + 1)
                    counts = np.array(
                        [lwr.moskowitz(vc, fd, geom, t_end, x) for x in edges]
                    )
                    analytic = -np.diff(counts) / dx
                    numeric = field.densities[step]
                    # mask the smear neighborhood of each exact-profile jump
                    jump = np.abs(
                        np.diff(analytic, prepend=analytic[0], append=analytic[-1])
                    )
                    near_jump = np.maximum(jump[:-1], jump[1:]) >= 0.05 * fd.rho_m
                    shockish = near_jump.copy()
                    for off in (1, 2):
                        shockish[off:] |= near_jump[:-off]
                        shockish[:-off] |= near_jump[off:]
                    err = np.max(np.abs(analytic - numeric)[~shockish], initial=0.0)
                    assert err <= 0.15 * fd.rho_m, f"trial {trial}: {err}"
            # the integral (count) error shrinks under refinement; near shocks
            # the scheme converges at roughly sqrt(dx), so compare the ends
            # of an 8x refinement ladder
            assert count_errors[-1] <= 0.7 * count_errors[0] + 0.02

    def test_cumulative_count_identity(self, fd, geom):
        # stored mass change equals inflow minus outflow at any resolution
        rng = np.random.default_rng(5)
        vc = compatible_vc(fd, geom, rng)
        field = lwr.godunov_oracle(vc, fd, geom, 2.5, 150.0)
        stored0 = np.sum(field.densities[0]) * field.dx
        stored1 = np.sum(field.densities[-1]) * field.dx
        assert stored1 - stored0 == pytest.approx(
            field.cum_in[-1] - field.cum_out[-1], abs=1e-9
        )


class TestSegmentMeans:
    def test_resolution_invariance_and_conservation(self, fd, geom):
        rng = np.random.default_rng(9)
        vc = compatible_vc(fd, geom, rng)
        t = 8 * T
        m1 = lwr.segment_mean_densities(vc, fd, geom, t, resolution=1)
        m4 = lwr.segment_mean_densities(vc, fd, geom, t, resolution=4)
        assert m1 == pytest.approx(m4, abs=1e-9)
        stored = float(np.sum(m1)) * geom.X
        expected = (
            float(np.sum(vc.initial_density)) * geom.X
            + (np.sum(vc.inflow) - np.sum(vc.outflow)) * T
        )
        assert stored == pytest.approx(expected, abs=1e-6)
