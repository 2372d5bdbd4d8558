"""Continuous-time model of the variable-speed hydropower plant.

States (per-unit): grid frequency deviation ``df``, guide vane opening ``g``,
penstock flow ``q``, head-race flow ``q_hr``, surge tank head ``h_st`` and
turbine speed ``omega``, plus the penstock pressure-wave memory ``h_p`` which
is advanced by the fixed-step integrator rather than by these ODEs.

Everything in this module is a pure function of its arguments; identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .params import (
    GridParams,
    HydraulicParams,
    PlantParameters,
    TurbineParams,
    VsgParams,
)

__all__ = [
    "DomainError",
    "PlantState",
    "PlantInputs",
    "STATE_NAMES",
    "INPUT_NAMES",
    "inlet_angle",
    "turbine_power",
    "turbine_power_partials",
    "turbine_head",
    "turbine_head_partials",
    "turbine_efficiency",
    "efficiency_clamped",
    "efficiency_clamped_gradient",
    "optimal_speed",
    "optimal_speed_slope",
    "vsg_power",
    "grid_coupling",
    "wave_update",
    "hydraulic_derivatives",
    "plant_derivatives",
    "plant_jacobian",
    "find_equilibrium",
]

STATE_NAMES = ("df", "g", "q", "q_hr", "h_st", "omega")
INPUT_NAMES = ("p_g_ref", "g_ref", "p_pb")


class DomainError(ValueError):
    """A model equation was evaluated outside its physical domain."""


@dataclass(frozen=True)
class PlantState:
    """Dynamic states plus the current penstock pressure-wave value."""

    df: float       # grid frequency deviation [p.u.]
    g: float        # guide vane opening [p.u.]
    q: float        # penstock flow [p.u.]
    q_hr: float     # head-race flow [p.u.]
    h_st: float     # surge tank head [p.u.]
    omega: float    # turbine rotational speed [p.u.]
    h_p: float = 0.0  # penstock pressure wave [p.u.]

    def to_array(self) -> np.ndarray:
        """The six ODE states as a vector (``h_p`` is carried separately)."""
        return np.array([self.df, self.g, self.q, self.q_hr, self.h_st, self.omega])

    @classmethod
    def from_array(cls, x: np.ndarray, h_p: float = 0.0) -> "PlantState":
        return cls(df=float(x[0]), g=float(x[1]), q=float(x[2]),
                   q_hr=float(x[3]), h_st=float(x[4]), omega=float(x[5]), h_p=h_p)

    def with_wave(self, h_p: float) -> "PlantState":
        return replace(self, h_p=h_p)


@dataclass(frozen=True)
class PlantInputs:
    """Exogenous inputs: converter and gate references plus grid imbalance."""

    p_g_ref: float  # converter power reference [p.u.]
    g_ref: float    # guide vane opening reference [p.u.]
    p_pb: float     # grid power balance excluding the plant [p.u.]

    def to_array(self) -> np.ndarray:
        return np.array([self.p_g_ref, self.g_ref, self.p_pb])

    @classmethod
    def from_array(cls, u: np.ndarray) -> "PlantInputs":
        return cls(p_g_ref=float(u[0]), g_ref=float(u[1]), p_pb=float(u[2]))


def inlet_angle(g: float, turbine: TurbineParams) -> float:
    """Inlet guide-vane flow angle for gate opening ``g`` [rad]."""
    arg = (turbine.q_r / turbine.q_rt) * g * math.sin(turbine.alpha_1r)
    if not -1.0 <= arg <= 1.0:
        raise DomainError(
            f"inlet angle argument {arg:.6g} outside [-1, 1] for gate opening {g:.6g}")
    return math.asin(arg)


def turbine_power(q: float, g: float, omega: float, h: float,
                  turbine: TurbineParams) -> float:
    """Mechanical turbine power from the Euler turbine relation [p.u.].

    Requires a strictly positive gate opening and head since both appear in
    denominators.
    """
    if g <= 0.0:
        raise DomainError(f"gate opening must be positive, got {g:.6g}")
    if h <= 0.0:
        raise DomainError(f"turbine head must be positive, got {h:.6g}")
    alpha_1 = inlet_angle(g, turbine)
    scale = (turbine.h_rt / turbine.h_r) * (turbine.q_r / turbine.q_rt)
    blade = math.tan(turbine.alpha_1r) * math.sin(alpha_1) + math.cos(alpha_1)
    work = (turbine.xi * q / g) * blade - turbine.psi * omega
    return scale * work * (q * omega / h)


def turbine_power_partials(q: float, g: float, omega: float, h: float,
                           turbine: TurbineParams) -> tuple[float, float, float, float, float]:
    """``(P_m, dP_m/dq, dP_m/dg, dP_m/domega, dP_m/dh)`` at the given point."""
    if g <= 0.0:
        raise DomainError(f"gate opening must be positive, got {g:.6g}")
    if h <= 0.0:
        raise DomainError(f"turbine head must be positive, got {h:.6g}")
    kq = turbine.q_r / turbine.q_rt
    s1r = math.sin(turbine.alpha_1r)
    arg = kq * g * s1r
    if not -1.0 <= arg <= 1.0:
        raise DomainError(
            f"inlet angle argument {arg:.6g} outside [-1, 1] for gate opening {g:.6g}")
    alpha_1 = math.asin(arg)
    # d_alpha/dg blows up as arg -> 1; the parameter invariant keeps arg < 1
    # for admissible gate openings.
    dalpha_dg = kq * s1r / math.sqrt(max(1.0 - arg * arg, 1e-300))

    t1r = math.tan(turbine.alpha_1r)
    sin_a, cos_a = math.sin(alpha_1), math.cos(alpha_1)
    blade = t1r * sin_a + cos_a
    dblade_dalpha = t1r * cos_a - sin_a

    scale = (turbine.h_rt / turbine.h_r) * kq
    work = (turbine.xi * q / g) * blade - turbine.psi * omega
    dwork_dq = turbine.xi * blade / g
    dwork_dg = (-turbine.xi * q / g ** 2) * blade \
        + (turbine.xi * q / g) * dblade_dalpha * dalpha_dg
    dwork_domega = -turbine.psi

    flow = q * omega / h
    p_m = scale * work * flow
    dp_dq = scale * (dwork_dq * flow + work * omega / h)
    dp_dg = scale * dwork_dg * flow
    dp_domega = scale * (dwork_domega * flow + work * q / h)
    dp_dh = scale * work * (-q * omega / h ** 2)
    return p_m, dp_dq, dp_dg, dp_domega, dp_dh


def turbine_head(q: float, q_hr: float, h_st: float, h_p: float,
                 hyd: HydraulicParams) -> float:
    """Turbine head: surge-tank head minus losses plus the pressure wave [p.u.]."""
    d = q_hr - q
    return h_st - hyd.f_0 * d * d - hyd.f_p1 * q * q + h_p


def turbine_head_partials(q: float, q_hr: float, h_st: float, h_p: float,
                          hyd: HydraulicParams) -> tuple[float, float, float, float, float]:
    """``(h, dh/dq, dh/dq_hr, dh/dh_st, dh/dh_p)``."""
    d = q_hr - q
    h = h_st - hyd.f_0 * d * d - hyd.f_p1 * q * q + h_p
    return h, 2.0 * hyd.f_0 * d - 2.0 * hyd.f_p1 * q, -2.0 * hyd.f_0 * d, 1.0, 1.0


def turbine_efficiency(omega: float, g: float, turbine: TurbineParams,
                       use_rated_angle: bool = False) -> float:
    """Relative turbine efficiency at speed ``omega`` and gate opening ``g``.

    The expression is only defined where ``sigma*(omega^2 - 1) >= 0``; below
    that range a :class:`DomainError` is raised.  ``use_rated_angle`` selects
    the rated inlet angle instead of the gate-dependent one inside the
    trigonometric factor (both readings occur in practice).
    """
    radicand = turbine.sigma * (omega * omega - 1.0)
    if radicand < 0.0:
        raise DomainError(
            f"sigma*(omega^2-1) = {radicand:.6g} < 0: speed {omega:.6g} is below "
            "the validity range of the efficiency expression")
    return _efficiency_value(omega, g, radicand, turbine, use_rated_angle)


def efficiency_clamped(omega: float, g: float, turbine: TurbineParams,
                       use_rated_angle: bool = False) -> float:
    """Efficiency with the square root clamped to zero below validity.

    Continuous everywhere, and the inner angle argument is saturated just
    inside its domain, so the optimizer never sees a domain error.
    """
    radicand = max(turbine.sigma * (omega * omega - 1.0), 0.0)
    return _efficiency_value(omega, g, radicand, turbine, use_rated_angle,
                             saturate=True)


_INNER_SAT = 0.999


def _efficiency_value(omega: float, g: float, radicand: float,
                      turbine: TurbineParams, use_rated_angle: bool,
                      saturate: bool = False) -> float:
    kappa = (turbine.q_r / turbine.q_rt) * g
    angle = turbine.alpha_1r if use_rated_angle else inlet_angle(g, turbine)
    inner = kappa * math.sin(angle)
    if saturate:
        inner = min(max(inner, -_INNER_SAT), _INNER_SAT)
    elif not -1.0 <= inner <= 1.0:
        raise DomainError(f"efficiency angle argument {inner:.6g} outside [-1, 1]")
    shape = math.cos(math.asin(inner)) + kappa * math.tan(angle) * math.sin(angle)
    return omega * turbine.xi * math.sqrt(radicand) * shape - turbine.psi * omega


def efficiency_clamped_gradient(omega: float, g: float, turbine: TurbineParams,
                                use_rated_angle: bool = False) -> tuple[float, float, float]:
    """``(eta, deta/domega, deta/dg)`` for the clamped efficiency.

    In the clamped region the square-root term and its derivatives are zero;
    at the clamp boundary the one-sided (inactive) derivative is returned.
    """
    kq = turbine.q_r / turbine.q_rt
    kappa = kq * g
    angle = turbine.alpha_1r if use_rated_angle else inlet_angle(g, turbine)
    sin_a = math.sin(angle)
    inner = kappa * sin_a
    saturated = abs(inner) > _INNER_SAT
    inner = min(max(inner, -_INNER_SAT), _INNER_SAT)
    cos_inner = math.cos(math.asin(inner))
    tan_a = math.tan(angle)
    shape = cos_inner + kappa * tan_a * sin_a

    radicand = turbine.sigma * (omega * omega - 1.0)
    if radicand <= 0.0:
        eta = -turbine.psi * omega
        return eta, -turbine.psi, 0.0

    root = math.sqrt(radicand)
    droot_domega = turbine.sigma * omega / root

    # Gate dependence enters through kappa and, unless the rated angle is
    # used, through the inlet angle itself.
    dinner_dg = kq * sin_a
    dshape_dg = kq * tan_a * sin_a
    if not use_rated_angle:
        dangle_dg = kq * math.sin(turbine.alpha_1r) / math.sqrt(
            max(1.0 - (kq * g * math.sin(turbine.alpha_1r)) ** 2, 1e-300))
        dinner_dg += kappa * math.cos(angle) * dangle_dg
        dshape_dg += kappa * sin_a * dangle_dg / (math.cos(angle) ** 2) \
            + kappa * tan_a * math.cos(angle) * dangle_dg
    # Where the inner argument saturates, its cosine is held constant.
    dcos_inner_dg = 0.0 if saturated else -inner * dinner_dg / cos_inner
    dshape_dg += dcos_inner_dg

    eta = omega * turbine.xi * root * shape - turbine.psi * omega
    deta_domega = turbine.xi * (root + omega * droot_domega) * shape - turbine.psi
    deta_dg = omega * turbine.xi * root * dshape_dg
    return eta, deta_domega, deta_dg


_OSPEED_BREAKS = (0.73, 0.85)
_OSPEED_SLOPES = (0.15, 0.3, 0.6)


def optimal_speed(p_g: float) -> float:
    """Most efficient turbine speed for converter power ``p_g`` [p.u.]."""
    if p_g > 0.85:
        return 1.0 + 0.6 * (p_g - 0.85)
    if p_g > 0.73:
        return 1.0 + 0.3 * (p_g - 0.85)
    return 0.964 + 0.15 * (p_g - 0.73)


def optimal_speed_slope(p_g: float) -> float:
    """Piecewise slope of :func:`optimal_speed` (one-sided at breakpoints)."""
    if p_g > 0.85:
        return 0.6
    if p_g > 0.73:
        return 0.3
    return 0.15


def vsg_power(df: float, df_dot: float, p_g_ref: float, vsg: VsgParams) -> float:
    """Converter output power commanded by the virtual synchronous generator."""
    return vsg.k_vsg_p * df + vsg.k_vsg_d * df_dot + p_g_ref


def grid_coupling(df: float, p_g_ref: float, p_pb: float,
                  vsg: VsgParams, grid: GridParams) -> tuple[float, float]:
    """Self-consistent ``(P_g, dfdot)`` of the converter/swing algebraic loop.

    The converter law feeds the frequency derivative back into its own output
    power; substituting the swing equation resolves the loop in closed form.
    """
    a = grid.omega_s / (2.0 * grid.h_g * grid.s_n)
    denom = 1.0 - a * vsg.k_vsg_d
    if abs(denom) < 1e-12:
        raise DomainError("converter derivative gain cancels the grid swing "
                          "dynamics; the algebraic loop is singular")
    df_dot = a * ((vsg.k_vsg_p - grid.d_m) * df + p_g_ref + p_pb) / denom
    p_g = vsg_power(df, df_dot, p_g_ref, vsg)
    return p_g, df_dot


def _coupling_partials(vsg: VsgParams, grid: GridParams) -> tuple[float, float, float, float]:
    """Constant partials of the algebraic loop.

    Returns ``(dfdot_ddf, dfdot_du, dpg_ddf, dpg_du)`` where the ``_du``
    entries apply equally to ``p_g_ref`` and ``p_pb``.
    """
    a = grid.omega_s / (2.0 * grid.h_g * grid.s_n)
    denom = 1.0 - a * vsg.k_vsg_d
    dfdot_ddf = a * (vsg.k_vsg_p - grid.d_m) / denom
    dfdot_du = a / denom
    dpg_ddf = vsg.k_vsg_p + vsg.k_vsg_d * dfdot_ddf
    dpg_du = vsg.k_vsg_d * dfdot_du
    return dfdot_ddf, dfdot_du, dpg_ddf, dpg_du


def wave_update(h_p: float, q_prev: float, q_next: float, z_0: float) -> float:
    """Next penstock pressure-wave value after one round-trip interval."""
    return -z_0 * (q_next - q_prev) - h_p


def hydraulic_derivatives(state: PlantState, g_ref: float, p_g: float,
                          params: PlantParameters) -> tuple[float, float, float, float, float]:
    """Derivatives of the hydro-mechanical states given the electric load.

    Returns ``(g_dot, q_dot, q_hr_dot, h_st_dot, omega_dot)``.  Shared by the
    aggregated-grid plant model and the two-area study grid, which differ
    only in how the converter power ``p_g`` is produced.
    """
    hyd, tur, mach = params.hydraulic, params.turbine, params.machine

    d = state.q_hr - state.q
    h_st_dot = d / hyd.c_s
    q_hr_dot = (1.0 - state.h_st + hyd.f_0 * d * d
                - hyd.f_p2 * state.q_hr ** 2) / hyd.t_w2

    h = turbine_head(state.q, state.q_hr, state.h_st, state.h_p, hyd)
    r_h = tur.h_r / tur.h_rt
    q_dot = (h * r_h - tur.sigma * (state.omega ** 2 - 1.0)
             - (state.q / state.g) ** 2) * (tur.q_rt / tur.q_r) / hyd.t_w1

    g_dot = (g_ref - state.g) / mach.t_g

    p_m = turbine_power(state.q, state.g, state.omega, h, tur)
    t_m = p_m / state.omega
    omega_ref = optimal_speed(p_g)
    omega_dot = (t_m - p_g / state.omega
                 - mach.d * (omega_ref - state.omega)) / (2.0 * mach.h)
    return g_dot, q_dot, q_hr_dot, h_st_dot, omega_dot


def plant_derivatives(state: PlantState, inputs: PlantInputs,
                      params: PlantParameters) -> np.ndarray:
    """Time derivatives of the six dynamic states.

    The pressure wave carried in ``state.h_p`` enters the turbine head
    algebraically; it has no ODE of its own here.
    """
    p_g, df_dot = grid_coupling(state.df, inputs.p_g_ref, inputs.p_pb,
                                params.vsg, params.grid)
    g_dot, q_dot, q_hr_dot, h_st_dot, omega_dot = hydraulic_derivatives(
        state, inputs.g_ref, p_g, params)
    return np.array([df_dot, g_dot, q_dot, q_hr_dot, h_st_dot, omega_dot])


def plant_jacobian(state: PlantState, inputs: PlantInputs,
                   params: PlantParameters) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians ``(A, B)`` of :func:`plant_derivatives`.

    ``A`` is 6x6 over the states, ``B`` 6x3 over the inputs
    ``(p_g_ref, g_ref, p_pb)``.  The wave value ``h_p`` is treated as a
    constant; its algebraic influence is available through
    :func:`turbine_head_partials`.
    """
    hyd, tur, mach = params.hydraulic, params.turbine, params.machine
    A = np.zeros((6, 6))
    B = np.zeros((6, 3))

    idf, ig, iq, iqhr, ihst, iom = range(6)

    # Swing / converter loop.
    dfdot_ddf, dfdot_du, dpg_ddf, dpg_du = _coupling_partials(params.vsg, params.grid)
    A[idf, idf] = dfdot_ddf
    B[idf, 0] = dfdot_du
    B[idf, 2] = dfdot_du

    # Gate servo.
    A[ig, ig] = -1.0 / mach.t_g
    B[ig, 1] = 1.0 / mach.t_g

    # Surge tank and head-race tunnel.
    d = state.q_hr - state.q
    A[ihst, iqhr] = 1.0 / hyd.c_s
    A[ihst, iq] = -1.0 / hyd.c_s
    A[iqhr, ihst] = -1.0 / hyd.t_w2
    A[iqhr, iqhr] = (2.0 * hyd.f_0 * d - 2.0 * hyd.f_p2 * state.q_hr) / hyd.t_w2
    A[iqhr, iq] = -2.0 * hyd.f_0 * d / hyd.t_w2

    # Penstock flow through the turbine head.
    h, dh_dq, dh_dqhr, dh_dhst, _ = turbine_head_partials(
        state.q, state.q_hr, state.h_st, state.h_p, hyd)
    r_h = tur.h_r / tur.h_rt
    b_c = (tur.q_rt / tur.q_r) / hyd.t_w1
    A[iq, iq] = b_c * (r_h * dh_dq - 2.0 * state.q / state.g ** 2)
    A[iq, iqhr] = b_c * r_h * dh_dqhr
    A[iq, ihst] = b_c * r_h * dh_dhst
    A[iq, ig] = b_c * (2.0 * state.q ** 2 / state.g ** 3)
    A[iq, iom] = b_c * (-2.0 * tur.sigma * state.omega)

    # Rotor acceleration: mechanical torque, electrical load and damping.
    p_m, dpm_dq, dpm_dg, dpm_dom, dpm_dh = turbine_power_partials(
        state.q, state.g, state.omega, h, tur)
    dpm_dq += dpm_dh * dh_dq
    dpm_dqhr = dpm_dh * dh_dqhr
    dpm_dhst = dpm_dh * dh_dhst

    p_g, _ = grid_coupling(state.df, inputs.p_g_ref, inputs.p_pb,
                           params.vsg, params.grid)
    om = state.omega
    inv2h = 1.0 / (2.0 * mach.h)

    A[iom, iq] = inv2h * dpm_dq / om
    A[iom, iqhr] = inv2h * dpm_dqhr / om
    A[iom, ihst] = inv2h * dpm_dhst / om
    A[iom, ig] = inv2h * dpm_dg / om
    A[iom, iom] = inv2h * (dpm_dom / om - p_m / om ** 2
                           + p_g / om ** 2 + mach.d)
    if mach.d != 0.0:
        dref = mach.d * optimal_speed_slope(p_g)
        A[iom, idf] = inv2h * (-dpg_ddf / om - dref * dpg_ddf)
        B[iom, 0] = inv2h * (-dpg_du / om - dref * dpg_du) \
            + inv2h * (-1.0 / om - dref)
        B[iom, 2] = inv2h * (-dpg_du / om - dref * dpg_du)
    else:
        A[iom, idf] = inv2h * (-dpg_ddf / om)
        B[iom, 0] = inv2h * (-(1.0 + dpg_du) / om)
        B[iom, 2] = inv2h * (-dpg_du / om)

    return A, B


def find_equilibrium(params: PlantParameters, p_g: float,
                     omega: float | None = None) -> tuple[PlantState, PlantInputs]:
    """Steady operating point delivering converter power ``p_g`` at ``df = 0``.

    The turbine speed defaults to :func:`optimal_speed`.  Flow and gate
    opening are solved from the steady waterway and power-balance algebra;
    the returned pair zeroes every state derivative exactly (to root-finder
    tolerance).
    """
    tur, hyd, mach = params.turbine, params.hydraulic, params.machine
    om = optimal_speed(p_g) if omega is None else omega
    speed_term = tur.sigma * (om * om - 1.0)
    r_h = tur.h_r / tur.h_rt

    def gate_for_flow(q: float) -> float:
        h = 1.0 - (hyd.f_p1 + hyd.f_p2) * q * q
        rad = h * r_h - speed_term
        if rad <= 0.0:
            raise DomainError("no steady gate opening exists for this flow/speed")
        return q / math.sqrt(rad)

    def power_residual(q: float) -> float:
        g = gate_for_flow(q)
        h = 1.0 - (hyd.f_p1 + hyd.f_p2) * q * q
        p_m = turbine_power(q, g, om, h, tur)
        # Steady rotor balance: T_m = P_g/omega + D*(omega_ref - omega).
        return p_m - p_g - mach.d * (optimal_speed(p_g) - om) * om

    # Scan upward for a sign change, stopping where the gate leaves the
    # admissible range of the inlet-angle arcsine.
    q_lo = 0.05
    r_lo = power_residual(q_lo)
    bracket = None
    for q_hi in np.linspace(0.08, 1.45, 100):
        try:
            r_hi = power_residual(float(q_hi))
        except DomainError:
            break
        if r_lo * r_hi <= 0.0:
            bracket = (q_lo, float(q_hi))
            break
        q_lo, r_lo = float(q_hi), r_hi
    if bracket is None:
        raise DomainError(f"no steady operating point found for p_g = {p_g:.4g}")
    q = brentq(power_residual, *bracket, xtol=1e-14, rtol=1e-15)
    g = gate_for_flow(q)
    state = PlantState(df=0.0, g=g, q=q, q_hr=q,
                       h_st=1.0 - hyd.f_p2 * q * q, omega=om, h_p=0.0)
    inputs = PlantInputs(p_g_ref=p_g, g_ref=g, p_pb=-p_g)
    return state, inputs
