"""Fixed-step classical Runge-Kutta integration of the plant model.

Includes the penstock-wave handling: the elastic water column is advanced by
the round-trip recursion once per step, and its effect on the flow state is
added as an explicit correction after the rigid-column RK4 update.  During
the four stage evaluations the wave pressure is held out of the dynamics (its
influence on mechanical power is deliberately neglected; its influence on the
flow is exactly what the correction term carries), so the wave is never
counted twice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .params import PlantParameters
from .plant import (
    DomainError,
    PlantInputs,
    PlantState,
    plant_derivatives,
    plant_jacobian,
    wave_update,
)

__all__ = [
    "StepConfig",
    "rk4_step",
    "rk4_step_sensitivity",
    "rk4_step_with_wave",
    "rk4_wave_sensitivity",
    "flow_correction_gain",
]

Derivative = Callable[[np.ndarray, np.ndarray], np.ndarray]
Jacobian = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class StepConfig:
    """Integration step settings."""

    dt: float
    wave_correction_enabled: bool = True

    def validate(self, hydraulic_wave_step: float | None = None) -> None:
        if self.dt <= 0.0:
            raise ValueError("step length must be positive")
        if self.wave_correction_enabled and hydraulic_wave_step is not None:
            if abs(self.dt - hydraulic_wave_step) > 1e-9:
                raise ValueError(
                    f"wave correction requires dt = {hydraulic_wave_step!r} "
                    f"(the round-trip wave time), got {self.dt!r}")


def _stages(f: Derivative, x: np.ndarray, u: np.ndarray, dt: float) -> list[np.ndarray]:
    points = []
    ks: list[np.ndarray] = []
    offsets = (None, 0.5, 0.5, 1.0)
    for i, w in enumerate(offsets):
        xi = x if w is None else x + w * ks[-1]
        points.append(xi)
        try:
            ks.append(dt * np.asarray(f(xi, u), dtype=float))
        except DomainError as exc:
            raise DomainError(f"RK4 stage {i + 1}: {exc}") from exc
    return ks


def rk4_step(f: Derivative, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step with inputs held constant."""
    k1, k2, k3, k4 = _stages(f, np.asarray(x, dtype=float), np.asarray(u, dtype=float), dt)
    return x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


def rk4_step_sensitivity(f: Derivative, fjac: Jacobian, x: np.ndarray,
                         u: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 step together with its Jacobians.

    Returns ``(x_next, d x_next/d x, d x_next/d u)`` obtained by chaining the
    analytic stage Jacobians; no finite differencing is involved.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = x.size
    eye = np.eye(n)

    def stage(xi: np.ndarray, ax_prev: np.ndarray, bu_prev: np.ndarray,
              weight: float, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        try:
            ki = dt * np.asarray(f(xi, u), dtype=float)
            jx, ju = fjac(xi, u)
        except DomainError as exc:
            raise DomainError(f"RK4 stage {index}: {exc}") from exc
        ai = dt * jx @ (eye + weight * ax_prev)
        bi = dt * (weight * jx @ bu_prev + ju)
        return ki, ai, bi

    zero_a = np.zeros((n, n))
    zero_b = np.zeros((n, u.size))
    k1, a1, b1 = stage(x, zero_a, zero_b, 0.0, 1)
    k2, a2, b2 = stage(x + 0.5 * k1, a1, b1, 0.5, 2)
    k3, a3, b3 = stage(x + 0.5 * k2, a2, b2, 0.5, 3)
    k4, a4, b4 = stage(x + k3, a3, b3, 1.0, 4)

    x_next = x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    a_d = eye + (a1 + 2.0 * a2 + 2.0 * a3 + a4) / 6.0
    b_d = (b1 + 2.0 * b2 + 2.0 * b3 + b4) / 6.0
    return x_next, a_d, b_d


def flow_correction_gain(params: PlantParameters, dt: float) -> float:
    """Gain applied to the next wave value when correcting the flow state."""
    tur, hyd = params.turbine, params.hydraulic
    return tur.h_r * dt / (tur.h_rt * hyd.t_w1)


def _rigid_derivative(params: PlantParameters) -> Derivative:
    def f(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return plant_derivatives(PlantState.from_array(x, h_p=0.0),
                                 PlantInputs.from_array(u), params)
    return f


def _rigid_jacobian(params: PlantParameters) -> Jacobian:
    def fj(x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return plant_jacobian(PlantState.from_array(x, h_p=0.0),
                              PlantInputs.from_array(u), params)
    return fj


def rk4_step_with_wave(state: PlantState, inputs: PlantInputs,
                       params: PlantParameters, dt: float) -> PlantState:
    """Advance the plant one wave round-trip, updating flow and wave memory.

    The six states are advanced by :func:`rk4_step` on the rigid-column model;
    the new wave value then adds its flow contribution.
    """
    x_next = rk4_step(_rigid_derivative(params), state.to_array(),
                      inputs.to_array(), dt)
    q_pre = float(x_next[2])
    h_p_next = wave_update(state.h_p, state.q, q_pre, params.hydraulic.z_0)
    x_next[2] = q_pre + flow_correction_gain(params, dt) * h_p_next
    return PlantState.from_array(x_next, h_p=h_p_next)


def rk4_wave_sensitivity(state: PlantState, inputs: PlantInputs,
                         params: PlantParameters, dt: float
                         ) -> tuple[PlantState, np.ndarray, np.ndarray]:
    """Wave-corrected step with Jacobians over the augmented state.

    The augmented state stacks the six dynamic states and the wave value
    ``h_p``; the returned Jacobians are 7x7 over that vector and 7x3 over the
    inputs.
    """
    x_next, a_d, b_d = rk4_step_sensitivity(
        _rigid_derivative(params), _rigid_jacobian(params),
        state.to_array(), inputs.to_array(), dt)
    z0 = params.hydraulic.z_0
    gain = flow_correction_gain(params, dt)

    q_pre = float(x_next[2])
    h_p_next = wave_update(state.h_p, state.q, q_pre, z0)

    e_q = np.zeros(6)
    e_q[2] = 1.0
    # d h_p_next / d (x_n, h_p_n) and / d u.
    dhp_dx = -z0 * (a_d[2, :] - e_q)
    dhp_dhp = -1.0
    dhp_du = -z0 * b_d[2, :]

    a_aug = np.zeros((7, 7))
    a_aug[:6, :6] = a_d + gain * np.outer(e_q, dhp_dx)
    a_aug[:6, 6] = gain * dhp_dhp * e_q
    a_aug[6, :6] = dhp_dx
    a_aug[6, 6] = dhp_dhp

    b_aug = np.zeros((7, 3))
    b_aug[:6, :] = b_d + gain * np.outer(e_q, dhp_du)
    b_aug[6, :] = dhp_du

    x_out = x_next.copy()
    x_out[2] = q_pre + gain * h_p_next
    return PlantState.from_array(x_out, h_p=h_p_next), a_aug, b_aug
