"""Grid-side environment models for closed-loop studies.

Three pieces live here: the power-balance estimator that recovers the net
grid imbalance from local frequency measurements, the inertia-weighted
average system frequency, and a reduced two-mass oscillatory grid used for
the power-oscillation-damping experiments.  The two-area model is a synthetic
stand-in for a full multi-machine network: two swing equations joined by a
single tie line, tuned so one lightly damped inter-area mode sits in the
usual sub-hertz band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .params import GridParams, PlantParameters
from .plant import (
    PlantInputs,
    PlantState,
    hydraulic_derivatives,
    vsg_power,
    wave_update,
)

__all__ = [
    "PowerBalanceEstimatorState",
    "estimate_power_balance",
    "average_frequency",
    "TwoAreaState",
    "two_area_derivatives",
    "two_area_step",
    "tie_line_power",
    "two_area_mode_frequency",
    "vshp_two_area_outputs",
    "vshp_two_area_step",
    "two_area_average_frequency",
]


@dataclass(frozen=True)
class PowerBalanceEstimatorState:
    """Low-pass filter memories of the power-balance estimator."""

    lp_f: float = 0.0      # filtered frequency deviation [p.u.]
    lp_fdot: float = 0.0   # filtered frequency derivative [p.u./s]


def estimate_power_balance(p_g: float, df: float, df_dot: float,
                           st: PowerBalanceEstimatorState, grid: GridParams,
                           dt: float) -> tuple[float, PowerBalanceEstimatorState]:
    """Estimate the grid power imbalance from local measurements.

    Both measurement channels pass through first-order low-pass filters
    discretized exactly over ``dt`` (exponential update, unity DC gain).
    Returns the estimate and the advanced filter state.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    a_f = math.exp(-grid.omega_f * dt)
    a_fd = math.exp(-grid.omega_fdot * dt)
    lp_f = a_f * st.lp_f + (1.0 - a_f) * df
    lp_fdot = a_fd * st.lp_fdot + (1.0 - a_fd) * df_dot
    p_pb = (-p_g + (2.0 * grid.h_g * grid.s_n / grid.omega_s) * lp_fdot
            + grid.d_m * lp_f)
    return p_pb, PowerBalanceEstimatorState(lp_f=lp_f, lp_fdot=lp_fdot)


def average_frequency(inertias: Sequence[float], frequencies: Sequence[float]) -> float:
    """Inertia-weighted mean of generator frequencies [p.u.]."""
    if len(inertias) == 0:
        raise ValueError("at least one generator is required")
    if len(inertias) != len(frequencies):
        raise ValueError(
            f"got {len(inertias)} inertias but {len(frequencies)} frequencies")
    h = np.asarray(inertias, dtype=float)
    if np.any(h <= 0.0):
        raise ValueError("all inertia constants must be positive")
    w = np.asarray(frequencies, dtype=float)
    return float(np.dot(h, w) / np.sum(h))


@dataclass(frozen=True)
class TwoAreaState:
    """Two coupled swing equations with a sinusoidal tie line.

    Frequencies and the relative angle are the dynamic quantities; the
    remaining fields are the (constant) model data, kept alongside so a state
    value is self-describing.  Powers are per-unit on the common grid base.
    """

    df_1: float = 0.0       # area-1 frequency deviation [p.u.]
    df_2: float = 0.0       # area-2 frequency deviation [p.u.]
    delta_12: float = 0.0   # relative rotor angle [rad]
    k_t: float = 0.3        # tie-line stiffness [p.u./rad]
    h_1: float = 6.5        # area-1 inertia [s]
    h_2: float = 6.175      # area-2 inertia [s]
    d_1: float = 1.0        # area-1 load damping [p.u.]
    d_2: float = 1.0        # area-2 load damping [p.u.]
    omega_s_rad: float = 2.0 * math.pi * 50.0  # angle base [rad/s]

    def __post_init__(self) -> None:
        if self.h_1 <= 0.0 or self.h_2 <= 0.0 or self.k_t <= 0.0:
            raise ValueError("inertias and tie-line stiffness must be positive")


def tie_line_power(st: TwoAreaState) -> float:
    """Power flowing from area 1 to area 2 over the tie line [p.u.]."""
    return st.k_t * math.sin(st.delta_12)


def two_area_derivatives(st: TwoAreaState, p_area1: float, p_area2: float
                         ) -> tuple[float, float, float]:
    """``(df_1_dot, df_2_dot, delta_12_dot)`` for given net area injections."""
    p_tie = tie_line_power(st)
    df1_dot = (p_area1 - st.d_1 * st.df_1 - p_tie) / (2.0 * st.h_1)
    df2_dot = (p_area2 - st.d_2 * st.df_2 + p_tie) / (2.0 * st.h_2)
    delta_dot = st.omega_s_rad * (st.df_1 - st.df_2)
    return df1_dot, df2_dot, delta_dot


def two_area_step(st: TwoAreaState, p_vshp: float,
                  p_disturbance: tuple[float, float], dt: float) -> TwoAreaState:
    """Advance the two-area grid one step (RK4, injections held constant).

    ``p_vshp`` is the hydropower plant's electrical power referred to the
    grid base; it injects into area 1 together with ``p_disturbance[0]``.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    p1 = p_vshp + p_disturbance[0]
    p2 = p_disturbance[1]

    def f(y: np.ndarray) -> np.ndarray:
        s = replace(st, df_1=float(y[0]), df_2=float(y[1]), delta_12=float(y[2]))
        return np.array(two_area_derivatives(s, p1, p2))

    y = np.array([st.df_1, st.df_2, st.delta_12])
    k1 = dt * f(y)
    k2 = dt * f(y + 0.5 * k1)
    k3 = dt * f(y + 0.5 * k2)
    k4 = dt * f(y + k3)
    y = y + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    return replace(st, df_1=float(y[0]), df_2=float(y[1]), delta_12=float(y[2]))


def two_area_mode_frequency(st: TwoAreaState) -> float:
    """Undamped inter-area mode frequency of the linearized model [Hz]."""
    w2 = st.k_t * (1.0 / (2.0 * st.h_1) + 1.0 / (2.0 * st.h_2)) * st.omega_s_rad
    return math.sqrt(w2) / (2.0 * math.pi)


def two_area_average_frequency(st: TwoAreaState) -> float:
    """Inertia-weighted average grid frequency of the two areas [p.u.]."""
    return average_frequency([st.h_1, st.h_2], [1.0 + st.df_1, 1.0 + st.df_2])


def _vshp_two_area_deriv(y: np.ndarray, st: TwoAreaState, inputs: PlantInputs,
                         p_disturbance: tuple[float, float],
                         params: PlantParameters) -> np.ndarray:
    """Derivative of the coupled plant + two-area vector.

    Layout: ``[df_1, g, q, q_hr, h_st, omega, df_2, delta_12]``.  The plant's
    converter couples to area 1, so the local frequency seen by its control
    law is ``df_1``.  The converter/swing algebraic loop is resolved in
    closed form, as in the aggregated model.
    """
    vsg = params.vsg
    s_n = params.grid.s_n
    df1 = float(y[0])
    ta = replace(st, df_1=df1, df_2=float(y[6]), delta_12=float(y[7]))
    p_tie = tie_line_power(ta)

    denom = 2.0 * ta.h_1 - vsg.k_vsg_d / s_n
    df1_dot = ((vsg.k_vsg_p * df1 + inputs.p_g_ref) / s_n
               + p_disturbance[0] - ta.d_1 * df1 - p_tie) / denom
    p_g = vsg_power(df1, df1_dot, inputs.p_g_ref, vsg)
    df2_dot = (p_disturbance[1] - ta.d_2 * ta.df_2 + p_tie) / (2.0 * ta.h_2)
    delta_dot = ta.omega_s_rad * (ta.df_1 - ta.df_2)

    ps = PlantState.from_array(y[:6], h_p=0.0)
    g_dot, q_dot, q_hr_dot, h_st_dot, omega_dot = hydraulic_derivatives(
        ps, inputs.g_ref, p_g, params)
    return np.array([df1_dot, g_dot, q_dot, q_hr_dot, h_st_dot, omega_dot,
                     df2_dot, delta_dot])


def vshp_two_area_outputs(plant_state: PlantState, ta: TwoAreaState,
                          inputs: PlantInputs,
                          p_disturbance: tuple[float, float],
                          params: PlantParameters) -> tuple[float, float]:
    """Converter power and local ROCOF at the current coupled state."""
    y = np.concatenate([plant_state.to_array(), [ta.df_2, ta.delta_12]])
    d = _vshp_two_area_deriv(y, ta, inputs, p_disturbance, params)
    p_g = vsg_power(plant_state.df, float(d[0]), inputs.p_g_ref, params.vsg)
    return p_g, float(d[0])


def vshp_two_area_step(plant_state: PlantState, ta: TwoAreaState,
                       inputs: PlantInputs, p_disturbance: tuple[float, float],
                       params: PlantParameters, dt: float
                       ) -> tuple[PlantState, TwoAreaState, float, float]:
    """One coupled step of the plant against the two-area grid.

    Applies the same rigid-column RK4 plus wave-correction scheme as the
    aggregated simulator.  Returns the new plant state (with updated wave
    memory), the new grid state and the converter power and local ROCOF at
    the start of the step.
    """
    y = np.concatenate([plant_state.to_array(),
                        [ta.df_2, ta.delta_12]])

    def f(v: np.ndarray) -> np.ndarray:
        return _vshp_two_area_deriv(v, ta, inputs, p_disturbance, params)

    d0 = f(y)
    p_g0 = vsg_power(plant_state.df, float(d0[0]), inputs.p_g_ref, params.vsg)

    k1 = dt * d0
    k2 = dt * f(y + 0.5 * k1)
    k3 = dt * f(y + 0.5 * k2)
    k4 = dt * f(y + k3)
    y_next = y + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0

    q_pre = float(y_next[2])
    h_p_next = wave_update(plant_state.h_p, plant_state.q, q_pre,
                           params.hydraulic.z_0)
    gain = params.turbine.h_r * dt / (params.turbine.h_rt * params.hydraulic.t_w1)
    y_next[2] = q_pre + gain * h_p_next

    ps_next = PlantState.from_array(y_next[:6], h_p=h_p_next)
    ta_next = replace(ta, df_1=float(y_next[0]), df_2=float(y_next[6]),
                      delta_12=float(y_next[7]))
    return ps_next, ta_next, p_g0, float(d0[0])
