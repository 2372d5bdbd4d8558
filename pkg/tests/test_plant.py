import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from hydrompc.params import TurbineParams
from hydrompc.plant import (
    DomainError,
    PlantInputs,
    PlantState,
    find_equilibrium,
    grid_coupling,
    inlet_angle,
    optimal_speed,
    plant_derivatives,
    plant_jacobian,
    turbine_efficiency,
    turbine_head,
    turbine_power,
    vsg_power,
    wave_update,
)

from conftest import rel_err
from oracles import oracle_efficiency, oracle_plant_derivatives, oracle_turbine_power


def random_feasible_state(rng, params):
    """A state inside every formula's validity domain."""
    g = rng.uniform(0.3, 1.1)
    q = rng.uniform(0.35, 1.2)
    return PlantState(
        df=rng.uniform(-0.05, 0.05),
        g=g, q=q,
        q_hr=q + rng.uniform(-0.15, 0.15),
        h_st=rng.uniform(0.8, 1.1),
        omega=rng.uniform(0.8, 1.3),
        h_p=rng.uniform(-0.05, 0.05),
    )


def random_inputs(rng):
    return PlantInputs(p_g_ref=rng.uniform(0.2, 1.0),
                       g_ref=rng.uniform(0.2, 1.1),
                       p_pb=rng.uniform(-1.0, 0.2))


class TestInletAngle:
    def test_zero_gate(self, params):
        assert inlet_angle(0.0, params.turbine) == 0.0

    def test_rated_point_identity(self, params):
        tur = replace(params.turbine, q_r=1.0, q_rt=1.0)
        assert inlet_angle(1.0, tur) == pytest.approx(tur.alpha_1r, abs=1e-15)

    def test_against_high_precision_evaluation(self, params):
        tur = replace(params.turbine, q_r=1.05, q_rt=1.0, alpha_1r=0.9)
        got = inlet_angle(0.8, tur)
        with mpmath.workdps(50):
            want = float(mpmath.asin(mpmath.mpf("1.05") * mpmath.mpf("0.8")
                                     * mpmath.sin(mpmath.mpf("0.9"))))
        assert got == pytest.approx(want, abs=1e-14)

    def test_domain_error(self, params):
        with pytest.raises(DomainError):
            inlet_angle(2.0, params.turbine)

    def test_strictly_increasing(self, params):
        gates = np.linspace(0.05, 1.2, 200)
        angles = [inlet_angle(float(g), params.turbine) for g in gates]
        assert np.all(np.diff(angles) > 0)


class TestTurbinePower:
    def test_zero_flow(self, params):
        assert turbine_power(0.0, 0.8, 1.0, 1.0, params.turbine) == 0.0

    def test_zero_speed(self, params):
        assert turbine_power(0.9, 0.8, 0.0, 1.0, params.turbine) == 0.0

    def test_rated_point_against_oracle(self, params):
        got = turbine_power(1.0, 1.0, 1.0, 1.0, params.turbine)
        want = oracle_turbine_power(1.0, 1.0, 1.0, 1.0, params.turbine)
        assert rel_err(got, want) < 1e-12

    def test_guards(self, params):
        with pytest.raises(DomainError):
            turbine_power(1.0, 0.0, 1.0, 1.0, params.turbine)
        with pytest.raises(DomainError):
            turbine_power(1.0, 0.8, 1.0, 0.0, params.turbine)

    def test_quadratic_in_flow_without_windage(self, params):
        # With no windage loss the power is exactly quadratic in the flow.
        tur = replace(params.turbine, psi=0.0)
        g, omega, h = 0.85, 1.02, 0.97
        qs = np.array([0.4, 0.7, 1.0])
        ps = np.array([turbine_power(float(q), g, omega, h, tur) for q in qs])
        coeffs = np.polyfit(qs, ps, 2)
        for q in np.linspace(0.3, 1.2, 7):
            fitted = np.polyval(coeffs, q)
            assert abs(fitted - turbine_power(float(q), g, omega, h, tur)) < 1e-12


class TestVsgPower:
    def test_reference_passthrough(self, params):
        assert vsg_power(0.0, 0.0, 0.8, params.vsg) == 0.8

    def test_proportional_term(self, params):
        vsg = replace(params.vsg, k_vsg_p=20.0, k_vsg_d=0.0)
        assert vsg_power(-0.01, 0.0, 0.8, vsg) == pytest.approx(0.6, abs=1e-15)

    def test_derivative_term(self, params):
        vsg = replace(params.vsg, k_vsg_p=0.0, k_vsg_d=2.0)
        assert vsg_power(0.0, 0.05, 0.0, vsg) == pytest.approx(0.1, abs=1e-15)


class TestWaveUpdate:
    def test_sign_flip_with_constant_flow(self):
        assert wave_update(0.02, 0.9, 0.9, 4.0) == -0.02

    def test_flow_step(self):
        assert wave_update(0.0, 0.9, 0.9 + 0.05, 4.0) == pytest.approx(-0.2)

    def test_alternating_sequence(self):
        h_p = 0.013
        seen = []
        for _ in range(8):
            seen.append(h_p)
            h_p = wave_update(h_p, 0.8, 0.8, 4.0)
        assert np.allclose(np.abs(seen), 0.013)
        assert np.allclose(seen[::2], 0.013)
        assert np.allclose(seen[1::2], -0.013)


class TestTurbineEfficiency:
    def test_unity_speed(self, params):
        got = turbine_efficiency(1.0, 0.9, params.turbine)
        assert got == pytest.approx(-params.turbine.psi, abs=1e-15)

    def test_below_validity_raises(self, params):
        # The shipped self-governing coefficient is positive, so zero speed
        # puts the radicand below zero.
        assert params.turbine.sigma > 0
        with pytest.raises(DomainError):
            turbine_efficiency(0.0, 0.9, params.turbine)

    def test_against_scalar_oracle(self, params):
        got = turbine_efficiency(1.05, 0.9, params.turbine)
        want = oracle_efficiency(1.05, 0.9, params.turbine)
        assert rel_err(got, want) < 1e-12


class TestOptimalSpeed:
    def test_breakpoints(self):
        assert optimal_speed(0.85) == 1.0
        assert optimal_speed(0.73) == 0.964

    def test_rated_power(self):
        assert optimal_speed(1.0) == pytest.approx(1.09, abs=1e-15)

    def test_continuity_at_breakpoints(self):
        for b in (0.73, 0.85):
            below = optimal_speed(b - 1e-12)
            above = optimal_speed(b + 1e-12)
            assert abs(above - below) < 1e-10

    def test_monotone(self):
        grid = np.linspace(0.0, 1.3, 500)
        vals = [optimal_speed(float(p)) for p in grid]
        assert np.all(np.diff(vals) >= 0)


class TestPlantDerivatives:
    def test_equilibrium_fixed_point(self, params):
        state, inputs = find_equilibrium(params, 0.8)
        dx = plant_derivatives(state, inputs, params)
        assert np.abs(dx).max() < 1e-12

    def test_surge_tank_fills_when_headrace_exceeds_penstock(self, params):
        state, inputs = find_equilibrium(params, 0.8)
        state = replace(state, q_hr=state.q + 0.1)
        dx = plant_derivatives(state, inputs, params)
        assert dx[4] > 0.0  # surge tank head rising

    def test_against_transcription_oracle(self, params):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(200):
            st = random_feasible_state(rng, params)
            u = random_inputs(rng)
            got = plant_derivatives(st, u, params)
            want = oracle_plant_derivatives(
                np.append(st.to_array(), st.h_p), u.to_array(), params)
            worst = max(worst, float(rel_err(got, want).max()))
        assert worst < 1e-12

    def test_fixed_point_family(self, params):
        # Steady points constructed from the steady-flow algebra must zero
        # every derivative.
        rng = np.random.default_rng(3)
        hyd, tur = params.hydraulic, params.turbine
        for _ in range(50):
            q = rng.uniform(0.4, 1.1)
            omega = rng.uniform(0.9, 1.15)
            h_st = 1.0 - hyd.f_p2 * q * q
            h = h_st - hyd.f_p1 * q * q
            rad = h * tur.h_r / tur.h_rt - tur.sigma * (omega ** 2 - 1.0)
            g = q / math.sqrt(rad)
            p_m = turbine_power(q, g, omega, h, tur)
            state = PlantState(df=0.0, g=g, q=q, q_hr=q, h_st=h_st,
                               omega=omega, h_p=0.0)
            inputs = PlantInputs(p_g_ref=p_m, g_ref=g, p_pb=-p_m)
            dx = plant_derivatives(state, inputs, params)
            assert np.abs(dx).max() < 1e-10

    def test_jacobian_matches_finite_differences(self, params):
        rng = np.random.default_rng(11)
        st = random_feasible_state(rng, params)
        u = random_inputs(rng)
        a, b = plant_jacobian(st, u, params)
        x0 = st.to_array()
        u0 = u.to_array()
        h = 1e-7

        def f(x, uu):
            return plant_derivatives(PlantState.from_array(x, h_p=st.h_p),
                                     PlantInputs.from_array(uu), params)

        for i in range(6):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fd = (np.asarray(f(xp, u0)) - np.asarray(f(xm, u0))) / (2 * h)
            assert np.abs(fd - a[:, i]).max() < 5e-6
        for i in range(3):
            up, um = u0.copy(), u0.copy()
            up[i] += h
            um[i] -= h
            fd = (np.asarray(f(x0, up)) - np.asarray(f(x0, um))) / (2 * h)
            assert np.abs(fd - b[:, i]).max() < 5e-6


class TestGridCoupling:
    def test_equilibrium_is_consistent(self, params):
        p_g, df_dot = grid_coupling(0.0, 0.8, -0.8, params.vsg, params.grid)
        assert p_g == pytest.approx(0.8, abs=1e-15)
        assert df_dot == pytest.approx(0.0, abs=1e-15)

    def test_loop_is_self_consistent(self, params):
        # The returned pair must satisfy both the converter law and the
        # swing equation simultaneously.
        p_g, df_dot = grid_coupling(-0.01, 0.85, -0.7, params.vsg, params.grid)
        grd = params.grid
        swing = grd.omega_s * (p_g + -0.7 - grd.d_m * -0.01) / (2 * grd.h_g * grd.s_n)
        assert swing == pytest.approx(df_dot, abs=1e-14)
        law = vsg_power(-0.01, df_dot, 0.85, params.vsg)
        assert law == pytest.approx(p_g, abs=1e-14)


class TestTurbineHead:
    def test_wave_term_is_additive(self, params):
        base = turbine_head(0.9, 0.95, 1.0, 0.0, params.hydraulic)
        assert turbine_head(0.9, 0.95, 1.0, 0.04, params.hydraulic) \
            == pytest.approx(base + 0.04, abs=1e-15)


class TestFindEquilibrium:
    @pytest.mark.parametrize("p_g", [0.5, 0.7, 0.8, 0.95])
    def test_zeroes_all_derivatives(self, params, p_g):
        state, inputs = find_equilibrium(params, p_g)
        dx = plant_derivatives(state, inputs, params)
        assert np.abs(dx).max() < 1e-10
        assert grid_coupling(0.0, inputs.p_g_ref, inputs.p_pb,
                             params.vsg, params.grid)[0] == pytest.approx(p_g, abs=1e-10)
