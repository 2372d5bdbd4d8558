"""Moving-horizon state estimation over a sliding measurement window.

The estimator fits the controller's own discrete-time model (rigid-column
RK4 with the penstock-wave correction) to the last ``N`` measurement samples
and ``N-1`` applied inputs.  Decision variables are the state and wave value
at the start of the window plus the input sequence; the window states are
eliminated by forward rollout, making the fit an unconstrained nonlinear
least-squares problem solved by Gauss-Newton through the shared NLP solver.

Output samples are timestamped at the start of each interval, so the
algebraic converter-power output at sample ``i`` uses the input that was
active just before it; the input one slot older than the window is carried
along as fixed data for the first sample.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from . import nlp
from .integrator import rk4_step_with_wave, rk4_wave_sensitivity
from .params import PlantParameters
from .plant import (
    DomainError,
    PlantInputs,
    PlantState,
    _coupling_partials,
    grid_coupling,
    turbine_head_partials,
    turbine_power_partials,
)

__all__ = [
    "OUTPUT_NAMES",
    "MheWeights",
    "MheConfig",
    "MeasurementWindow",
    "MheDiagnostics",
    "model_outputs",
    "model_output_jacobians",
    "MovingHorizonEstimator",
]

OUTPUT_NAMES = ("df", "g", "h_st", "omega", "h", "p_m", "p_g")
_NY = 7
_NU = 3
_NXA = 7  # augmented state: six dynamic states plus the wave value


@dataclass(frozen=True)
class MheWeights:
    """Output- and input-fit weights (reciprocal noise standard deviations)."""

    v: tuple[float, ...] = (50.0, 100.0, 100.0, 1000.0, 100.0, 1.0, 1.0)
    w: tuple[float, ...] = (100.0, 1000.0, 10.0)

    def __post_init__(self) -> None:
        if len(self.v) != _NY or len(self.w) != _NU:
            raise ValueError(f"weights must have {_NY} output and {_NU} input entries")
        if any(x <= 0.0 for x in self.v) or any(x <= 0.0 for x in self.w):
            raise ValueError("all fit weights must be positive")


@dataclass(frozen=True)
class MheConfig:
    window: int = 10
    dt: float = 0.252
    # Zero-residual fits converge quadratically, so the tight tolerance is
    # reachable; noisy fits have a linear Gauss-Newton tail and are cut off
    # by the iteration cap with no practical loss.
    solver: nlp.SolverConfig = field(default_factory=lambda: nlp.SolverConfig(
        kkt_tol=1e-9, feas_tol=1e-8, max_iterations=25))

    def __post_init__(self) -> None:
        if self.window < 2:
            raise ValueError("the estimation window needs at least two samples")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")


class MeasurementWindow:
    """Ring buffer of the most recent measurement and input samples.

    ``push(t, y, u_prev)`` appends the measurement taken at time ``t`` and
    the input that was applied over the preceding interval.  The window is
    ready once ``size`` samples have been collected; samples must arrive on
    a fixed time grid.
    """

    def __init__(self, size: int, dt: float):
        if size < 2:
            raise ValueError("window size must be at least 2")
        self.size = size
        self.dt = dt
        self._ys: deque[np.ndarray] = deque(maxlen=size)
        self._ts: deque[float] = deque(maxlen=size)
        self._us: deque[np.ndarray] = deque(maxlen=size - 1)
        self._u_before: np.ndarray | None = None

    def push(self, t: float, y: np.ndarray, u_prev: PlantInputs | np.ndarray) -> None:
        y = np.asarray(y, float)
        if y.size != _NY:
            raise ValueError(f"measurement must have {_NY} channels")
        if self._ts and abs((t - self._ts[-1]) - self.dt) > 1e-9 * max(1.0, abs(t)):
            raise ValueError("measurements must arrive on the fixed time grid")
        u_arr = u_prev.to_array() if isinstance(u_prev, PlantInputs) else np.asarray(u_prev, float)
        if len(self._us) == self._us.maxlen:
            self._u_before = self._us[0].copy()
        if self._ts:
            self._us.append(u_arr)
        else:
            self._u_before = u_arr
        self._ts.append(float(t))
        self._ys.append(y.copy())

    @property
    def full(self) -> bool:
        return len(self._ys) == self.size

    @property
    def outputs(self) -> np.ndarray:
        return np.array(self._ys)

    @property
    def inputs(self) -> np.ndarray:
        return np.array(self._us)

    @property
    def input_before(self) -> np.ndarray:
        assert self._u_before is not None
        return self._u_before

    @property
    def times(self) -> np.ndarray:
        return np.array(self._ts)


def model_outputs(state: PlantState, inputs: PlantInputs,
                  params: PlantParameters) -> np.ndarray:
    """Measured-output vector ``[df, g, h_st, omega, h, P_m, P_g]``."""
    h, *_ = turbine_head_partials(state.q, state.q_hr, state.h_st, state.h_p,
                                  params.hydraulic)
    p_m = turbine_power_partials(state.q, state.g, state.omega, h,
                                 params.turbine)[0]
    p_g, _ = grid_coupling(state.df, inputs.p_g_ref, inputs.p_pb,
                           params.vsg, params.grid)
    return np.array([state.df, state.g, state.h_st, state.omega, h, p_m, p_g])


def model_output_jacobians(state: PlantState, inputs: PlantInputs,
                           params: PlantParameters
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Outputs plus Jacobians over the augmented state and the inputs.

    Returns ``(y, C, D)`` with ``C`` of shape (7, 7) over
    ``[df, g, q, q_hr, h_st, omega, h_p]`` and ``D`` of shape (7, 3) over
    ``[p_g_ref, g_ref, p_pb]``.
    """
    hyd, tur = params.hydraulic, params.turbine
    h, dh_dq, dh_dqhr, dh_dhst, dh_dhp = turbine_head_partials(
        state.q, state.q_hr, state.h_st, state.h_p, hyd)
    p_m, dpm_dq, dpm_dg, dpm_dom, dpm_dh = turbine_power_partials(
        state.q, state.g, state.omega, h, tur)
    p_g, _ = grid_coupling(state.df, inputs.p_g_ref, inputs.p_pb,
                           params.vsg, params.grid)
    dpg_ddf, dpg_du = _coupling_partials(params.vsg, params.grid)[2:]

    y = np.array([state.df, state.g, state.h_st, state.omega, h, p_m, p_g])
    c = np.zeros((_NY, _NXA))
    c[0, 0] = 1.0
    c[1, 1] = 1.0
    c[2, 4] = 1.0
    c[3, 5] = 1.0
    c[4, 2] = dh_dq
    c[4, 3] = dh_dqhr
    c[4, 4] = dh_dhst
    c[4, 6] = dh_dhp
    c[5, 1] = dpm_dg
    c[5, 2] = dpm_dq + dpm_dh * dh_dq
    c[5, 3] = dpm_dh * dh_dqhr
    c[5, 4] = dpm_dh * dh_dhst
    c[5, 5] = dpm_dom
    c[5, 6] = dpm_dh * dh_dhp
    c[6, 0] = dpg_ddf

    d = np.zeros((_NY, _NU))
    d[6, 0] = 1.0 + dpg_du
    d[6, 2] = dpg_du
    return y, c, d


@dataclass
class MheDiagnostics:
    status: str
    iterations: int
    objective: float
    output_rms: np.ndarray  # per-channel root-mean-square fit residual
    trajectory: np.ndarray | None = None  # fitted window states, (N, 7)
    fallback: bool = False


class MovingHorizonEstimator:
    """Estimates the current plant state (including the wave value)."""

    def __init__(self, params: PlantParameters, weights: MheWeights,
                 config: MheConfig):
        self.params = params
        self.weights = weights
        self.config = config
        self._prev_start: tuple[np.ndarray, np.ndarray] | None = None
        self._prev_terminal: PlantState | None = None

    # -- decision vector layout: [x_0 (6), h_p_0, u_0 .. u_{N-2} (3 each)] --

    def _n_vars(self) -> int:
        return _NXA + _NU * (self.config.window - 1)

    def _rollout(self, z: np.ndarray, window: MeasurementWindow,
                 with_jacobian: bool):
        """Residual vector (and Jacobian) of the window fit at ``z``."""
        n_samples = self.config.window
        n = self._n_vars()
        # The fit weights are reciprocal noise sigmas, so scaling the raw
        # residuals by them directly gives the inverse-variance (maximum
        # likelihood) least squares.
        v_scale = np.asarray(self.weights.v)
        w_scale = np.asarray(self.weights.w)
        ys = window.outputs
        us_applied = window.inputs
        u_before = window.input_before

        m = _NY * n_samples + _NU * (n_samples - 1)
        res = np.zeros(m)
        jac = np.zeros((m, n)) if with_jacobian else None

        state = PlantState.from_array(z[:6], h_p=float(z[6]))
        sens = np.zeros((_NXA, n))
        sens[:, :_NXA] = np.eye(_NXA)
        trajectory = np.zeros((n_samples, _NXA))

        def u_slice(i: int) -> slice:
            return slice(_NXA + _NU * i, _NXA + _NU * (i + 1))

        row = 0
        for i in range(n_samples):
            trajectory[i, :6] = state.to_array()
            trajectory[i, 6] = state.h_p
            if i == 0:
                u_active = PlantInputs.from_array(u_before)
                du_cols = None
            else:
                u_active = PlantInputs.from_array(z[u_slice(i - 1)])
                du_cols = u_slice(i - 1)
            if with_jacobian:
                y_i, c_x, d_u = model_output_jacobians(state, u_active, self.params)
            else:
                y_i = model_outputs(state, u_active, self.params)
            res[row:row + _NY] = v_scale * (y_i - ys[i])
            if with_jacobian:
                block = c_x @ sens
                if du_cols is not None:
                    block[:, du_cols] += d_u
                jac[row:row + _NY] = v_scale[:, None] * block
            row += _NY

            if i < n_samples - 1:
                u_step = PlantInputs.from_array(z[u_slice(i)])
                if with_jacobian:
                    state, a_aug, b_aug = rk4_wave_sensitivity(
                        state, u_step, self.params, self.config.dt)
                    sens = a_aug @ sens
                    sens[:, u_slice(i)] += b_aug
                else:
                    state = rk4_step_with_wave(state, u_step, self.params,
                                               self.config.dt)

        for i in range(n_samples - 1):
            res[row:row + _NU] = w_scale * (z[u_slice(i)] - us_applied[i])
            if with_jacobian:
                jac[row:row + _NU, u_slice(i)] = np.diag(w_scale)
            row += _NU

        return res, jac, state, trajectory

    def _initial_guess(self, window: MeasurementWindow) -> np.ndarray:
        n = self._n_vars()
        z = np.zeros(n)
        us = window.inputs
        z[_NXA:] = us.reshape(-1)
        if self._prev_start is not None:
            prev_x, prev_hp = self._prev_start
            z[:6] = prev_x
            z[6] = prev_hp
            return z
        # Cold start from the raw measurements at the window head.
        y0 = window.outputs[0]
        hyd = self.params.hydraulic
        q2 = (y0[2] - y0[4]) / max(hyd.f_p1, 1e-9)
        q = float(np.sqrt(np.clip(q2, 0.04, 2.25)))
        z[:6] = [y0[0], y0[1], q, q, y0[2], y0[3]]
        z[6] = 0.0
        return z

    def estimate(self, window: MeasurementWindow
                 ) -> tuple[PlantState, MheDiagnostics]:
        """Fit the model to the window and return the state at its end.

        On solver failure the previous estimate is propagated open loop with
        the latest applied input and returned flagged.
        """
        if not window.full:
            raise ValueError("the measurement window must be full before estimating")

        n = self._n_vars()
        cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

        def fit_at(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            key = z.tobytes()
            hit = cache.get(key)
            if hit is None:
                res, jac, _, _ = self._rollout(z, window, with_jacobian=True)
                cache.clear()
                cache[key] = hit = (res, jac)
            return hit

        def objective(z: np.ndarray) -> tuple[float, np.ndarray]:
            res, jac = fit_at(z)
            return float(res @ res), 2.0 * jac.T @ res

        def hessian(z: np.ndarray) -> sp.csc_matrix:
            _, jac = fit_at(z)
            return sp.csc_matrix(2.0 * jac.T @ jac)

        problem = nlp.NlpProblem(n=n, objective=objective, hessian=hessian,
                                 x0=self._initial_guess(window))
        try:
            solution = nlp.solve(problem, self.config.solver)
        except DomainError:
            solution = None

        if solution is not None and solution.status in ("converged", "max-iterations") \
                and np.isfinite(solution.objective):
            res, _, terminal, trajectory = self._rollout(solution.x, window,
                                                         with_jacobian=False)
            fit = res[:_NY * self.config.window].reshape(self.config.window, _NY)
            rms = np.sqrt(np.mean(fit ** 2, axis=0)) / np.asarray(self.weights.v)
            # Warm start for the next window: shift one interval forward.
            shifted = rk4_step_with_wave(
                PlantState.from_array(solution.x[:6], h_p=float(solution.x[6])),
                PlantInputs.from_array(solution.x[_NXA:_NXA + _NU]),
                self.params, self.config.dt)
            self._prev_start = (shifted.to_array(), shifted.h_p)
            self._prev_terminal = terminal
            diag = MheDiagnostics(status=solution.status,
                                  iterations=solution.iterations,
                                  objective=solution.objective,
                                  output_rms=rms, trajectory=trajectory)
            return terminal, diag

        # Fallback: advance the last good estimate open loop.
        status = solution.status if solution is not None else "domain-error"
        iterations = solution.iterations if solution is not None else 0
        if self._prev_terminal is not None:
            held = rk4_step_with_wave(
                self._prev_terminal,
                PlantInputs.from_array(window.inputs[-1]),
                self.params, self.config.dt)
        else:
            z0 = self._initial_guess(window)
            held = self._rollout(z0, window, with_jacobian=False)[2]
        self._prev_terminal = held
        diag = MheDiagnostics(status=status, iterations=iterations,
                              objective=float("nan"),
                              output_rms=np.full(_NY, np.nan), fallback=True)
        return held, diag
