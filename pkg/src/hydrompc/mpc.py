"""Receding-horizon controller built by direct multiple shooting.

Each control step assembles a sparse NLP over the horizon: decision
variables are the inputs, the shot states, the penstock wave values, the
turbine head as an algebraic variable and one slack four-vector per stage.
Shooting equalities reproduce the simulator's RK4-plus-wave-correction map
exactly, so the prediction model and the plant agree to integrator
tolerance when their parameters match.

The quadratic cost terms (deviation, change and slack costs) are assembled
once per solve into a constant sparse Hessian plus linear vector; the
optional turbine-efficiency term enters through the objective evaluator as a
smooth nonlinear addition.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp

from . import nlp
from .integrator import flow_correction_gain, rk4_step_sensitivity
from .params import PlantParameters
from .plant import (
    PlantInputs,
    PlantState,
    _coupling_partials,
    efficiency_clamped_gradient,
    optimal_speed,
    plant_derivatives,
    plant_jacobian,
    turbine_head_partials,
)

__all__ = [
    "SlackSpec",
    "MpcWeights",
    "MpcBounds",
    "MpcConfig",
    "MpcReferences",
    "OcpSpec",
    "OcpLayout",
    "MpcDiagnostics",
    "assemble_references",
    "build_ocp",
    "ModelPredictiveController",
]

_NX = 6
_NU = 2          # decision inputs per stage: converter power ref, gate ref
_NEPS = 4        # slack variables per stage: q, h_st, h, omega
_STAGE = _NU + _NX + 1 + 1 + _NEPS  # u, x, h_p, h, eps

_IQ = 2      # index of the flow state
_IOM = 5     # index of the speed state
_IDF = 0     # index of the frequency state


@dataclass(frozen=True)
class SlackSpec:
    """Soft range with a quadratic violation cost."""

    minimum: float | None
    maximum: float | None
    cost: float

    def __post_init__(self) -> None:
        if self.cost < 0.0:
            raise ValueError("slack cost factor must be >= 0")
        if self.minimum is not None and self.maximum is not None \
                and self.minimum >= self.maximum:
            raise ValueError("slack range must satisfy min < max")


@dataclass(frozen=True)
class MpcWeights:
    """Cost factors of the stage objective."""

    omega: float = 1000.0
    omega_terminal: float = 10000.0   # extra weight on the final speed deviation
    p_g_ref: float = 1000.0
    freq: float = 1.0e7
    delta_g_ref: float = 1000.0
    delta_g_ref_slow: float = 1000.0  # five-step guide-vane reference change
    delta_h_p: float = 1.0e10
    efficiency_factor: float = 10.0
    rho: float = 0.0                  # linear slack cost (quadratic-only tuning)

    def __post_init__(self) -> None:
        for name in ("omega", "omega_terminal", "p_g_ref", "freq", "delta_g_ref",
                     "delta_g_ref_slow", "delta_h_p", "efficiency_factor", "rho"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"weight {name} must be >= 0")


@dataclass(frozen=True)
class MpcBounds:
    """Hard input/variable limits and the soft (slack-relaxed) ranges."""

    g_ref_min: float = 0.1
    g_ref_max: float = 1.2
    p_g_min: float = 0.0
    p_g_max: float = 1.0
    slack_q: SlackSpec = SlackSpec(0.3, 1.3, 1.0)
    slack_h_st: SlackSpec = SlackSpec(0.5, None, 1.0e5)
    slack_h: SlackSpec = SlackSpec(None, 1.1, 1.0e5)
    slack_omega: SlackSpec = SlackSpec(0.7, 2.0, 1.0e4)

    def __post_init__(self) -> None:
        if self.g_ref_min >= self.g_ref_max:
            raise ValueError("gate reference bounds must satisfy min < max")
        if self.p_g_min >= self.p_g_max:
            raise ValueError("converter power bounds must satisfy min < max")


@dataclass(frozen=True)
class MpcConfig:
    """Horizon layout and feature switches."""

    horizon: int = 20
    dt: float = 0.252
    history_length: int = 5
    pod_enabled: bool = False
    wave_model_enabled: bool = True
    efficiency_cost_enabled: bool = False
    efficiency_use_rated_angle: bool = False
    p_g_ref_setpoint: float = 0.8
    # Stationarity below 1e-5 is tight against the 1e3..1e10 cost scales;
    # demanding more grinds on the float64 noise floor.
    solver: nlp.SolverConfig = field(default_factory=lambda: nlp.SolverConfig(
        kkt_tol=1e-5, feas_tol=1e-8, max_iterations=30))

    def __post_init__(self) -> None:
        # Short horizons are permitted for reduced problems and oracle
        # comparisons; the receding-horizon controller itself insists on at
        # least five steps so the slow gate-change cost spans real stages.
        if self.horizon < 1:
            raise ValueError("horizon must be at least one step")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.history_length < 5:
            raise ValueError("the five-step change cost needs a history of >= 5 inputs")


@dataclass(frozen=True)
class MpcReferences:
    """Per-solve reference values, constant over the horizon."""

    omega_ref: float
    df_ref: float
    p_g_ref_setpoint: float
    freq_weight_active: bool


def assemble_references(p_g_measured: float, f_bar: float, config: MpcConfig,
                        params: PlantParameters) -> MpcReferences:
    """References for one solve.

    The speed reference is the optimal-speed map evaluated at the measured
    converter power and held constant over the horizon.  With damping of
    power oscillations enabled the frequency tracks the (held) grid-average
    frequency; otherwise the frequency cost is inactive.
    """
    omega_ref = optimal_speed(p_g_measured)
    if config.pod_enabled:
        df_ref = f_bar - params.vsg.f_star
    else:
        df_ref = 0.0
    return MpcReferences(omega_ref=omega_ref, df_ref=df_ref,
                         p_g_ref_setpoint=config.p_g_ref_setpoint,
                         freq_weight_active=config.pod_enabled)


class OcpLayout:
    """Index map of the interleaved decision vector.

    Stage block ``t`` (``t = 0..N-1``) holds ``[u_t, x_{t+1}, h_p_{t+1},
    h_{t+1}, eps_{t+1}]``.
    """

    def __init__(self, horizon: int):
        self.horizon = horizon
        self.n = _STAGE * horizon

    def u(self, t: int) -> slice:
        base = _STAGE * t
        return slice(base, base + _NU)

    def x(self, t: int) -> slice:
        if t < 1:
            raise IndexError("x_0 is fixed data, not a decision variable")
        base = _STAGE * (t - 1) + _NU
        return slice(base, base + _NX)

    def h_p(self, t: int) -> int:
        if t < 1:
            raise IndexError("h_p_0 is fixed data, not a decision variable")
        return _STAGE * (t - 1) + _NU + _NX

    def head(self, t: int) -> int:
        if t < 1:
            raise IndexError("h_0 is fixed data, not a decision variable")
        return _STAGE * (t - 1) + _NU + _NX + 1

    def eps(self, t: int) -> slice:
        if t < 1:
            raise IndexError("slacks start at stage 1")
        base = _STAGE * (t - 1) + _NU + _NX + 2
        return slice(base, base + _NEPS)


@dataclass
class OcpSpec:
    """The assembled discrete-time optimal control problem data."""

    params: PlantParameters
    weights: MpcWeights
    bounds: MpcBounds
    config: MpcConfig
    references: MpcReferences
    x0: np.ndarray                 # current state estimate (6,)
    h_p0: float                    # current wave value estimate
    p_pb: np.ndarray               # imbalance forecast, one entry per stage
    g_ref_history: np.ndarray      # applied gate references, oldest first
    layout: OcpLayout = field(init=False)
    wave_impedance: float = field(init=False)

    def __post_init__(self) -> None:
        self.layout = OcpLayout(self.config.horizon)
        if self.g_ref_history.size < self.config.history_length:
            raise ValueError(
                f"input history holds {self.g_ref_history.size} samples, "
                f"need {self.config.history_length}")
        if self.p_pb.size != self.config.horizon:
            raise ValueError("imbalance forecast must have one entry per stage")
        if self.config.wave_model_enabled:
            self.wave_impedance = self.params.hydraulic.z_0
        else:
            self.wave_impedance = 0.0
            self.h_p0 = 0.0
        # Sub-resolution wave estimates are measurement noise; the very large
        # wave-change weight would otherwise amplify them into phantom
        # gradients.
        if abs(self.h_p0) < 1e-12:
            self.h_p0 = 0.0


# ---------------------------------------------------------------------------
# Cost assembly
# ---------------------------------------------------------------------------

def _quadratic_cost(spec: OcpSpec) -> tuple[sp.csc_matrix, np.ndarray, float]:
    """Constant Hessian, linear vector and offset of the quadratic terms."""
    lay = spec.layout
    w = spec.weights
    refs = spec.references
    n_steps = spec.config.horizon

    diag = np.zeros(lay.n)
    lin = np.zeros(lay.n)
    const = 0.0
    coo_i: list[int] = []
    coo_j: list[int] = []
    coo_v: list[float] = []

    def add_square(idx_plus: list[int], idx_minus: list[int],
                   weight: float, offset: float = 0.0) -> float:
        """Accumulate 1/2*weight*(sum(z+) - sum(z-) - offset)^2; returns const part."""
        if weight == 0.0:
            return 0.0
        terms = [(i, 1.0) for i in idx_plus] + [(i, -1.0) for i in idx_minus]
        for i, si in terms:
            for j, sj in terms:
                if i == j:
                    diag[i] += weight * si * sj
                else:
                    coo_i.append(i)
                    coo_j.append(j)
                    coo_v.append(weight * si * sj)
            lin[i] += -weight * si * offset
        return 0.5 * weight * offset * offset

    # Deviation costs.
    for t in range(1, n_steps + 1):
        w_om = w.omega + (w.omega_terminal if t == n_steps else 0.0)
        const += add_square([lay.x(t).start + _IOM], [], w_om, refs.omega_ref)
        if refs.freq_weight_active:
            const += add_square([lay.x(t).start + _IDF], [], w.freq, refs.df_ref)
    for t in range(n_steps):
        const += add_square([lay.u(t).start], [], w.p_g_ref, refs.p_g_ref_setpoint)

    # Change costs on the gate reference (one step and five steps back).
    hist = spec.g_ref_history
    for t in range(n_steps):
        iu = lay.u(t).start + 1
        if t >= 1:
            const += add_square([iu], [lay.u(t - 1).start + 1], w.delta_g_ref)
        else:
            const += add_square([iu], [], w.delta_g_ref, float(hist[-1]))
        if t >= 5:
            const += add_square([iu], [lay.u(t - 5).start + 1], w.delta_g_ref_slow)
        else:
            const += add_square([iu], [], w.delta_g_ref_slow, float(hist[t - 5]))

    # Change cost on the penstock wave value.
    for t in range(1, n_steps + 1):
        if t >= 2:
            const += add_square([lay.h_p(t)], [lay.h_p(t - 1)], w.delta_h_p)
        else:
            const += add_square([lay.h_p(t)], [], w.delta_h_p, spec.h_p0)

    # Slack costs (quadratic plus optional linear part).
    slack_costs = (spec.bounds.slack_q.cost, spec.bounds.slack_h_st.cost,
                   spec.bounds.slack_h.cost, spec.bounds.slack_omega.cost)
    for t in range(1, n_steps + 1):
        eps = lay.eps(t)
        for k, cost in enumerate(slack_costs):
            diag[eps.start + k] += cost
            lin[eps.start + k] += w.rho

    coo_i.extend(range(lay.n))
    coo_j.extend(range(lay.n))
    coo_v.extend(diag.tolist())
    hess = sp.csc_matrix((coo_v, (coo_i, coo_j)), shape=(lay.n, lay.n))
    return hess, lin, const


def _efficiency_terms(spec: OcpSpec, z: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of the (negated) efficiency cost."""
    lay = spec.layout
    factor = spec.weights.efficiency_factor
    value = 0.0
    grad = np.zeros(lay.n)
    for t in range(1, spec.config.horizon + 1):
        xs = lay.x(t)
        omega = z[xs.start + _IOM]
        gate = z[xs.start + 1]
        eta, de_dom, de_dg = efficiency_clamped_gradient(
            omega, gate, spec.params.turbine,
            spec.config.efficiency_use_rated_angle)
        value -= factor * eta
        grad[xs.start + _IOM] -= factor * de_dom
        grad[xs.start + 1] -= factor * de_dg
    return value, grad


# ---------------------------------------------------------------------------
# Dynamics (shooting) constraints
# ---------------------------------------------------------------------------

def _stage_map(spec: OcpSpec, x_t: np.ndarray, u_t: np.ndarray, p_pb_t: float
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rigid-column RK4 over one stage with analytic Jacobians."""
    params = spec.params

    def f(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return plant_derivatives(PlantState.from_array(x, h_p=0.0),
                                 PlantInputs.from_array(u), params)

    def fj(x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return plant_jacobian(PlantState.from_array(x, h_p=0.0),
                              PlantInputs.from_array(u), params)

    u_full = np.array([u_t[0], u_t[1], p_pb_t])
    return rk4_step_sensitivity(f, fj, x_t, u_full, spec.config.dt)


def _equality_evaluator(spec: OcpSpec):
    """Residuals and Jacobian of shooting, wave and head equalities."""
    lay = spec.layout
    n_steps = spec.config.horizon
    gain = flow_correction_gain(spec.params, spec.config.dt)
    z0m = spec.wave_impedance
    hyd = spec.params.hydraulic
    m_eq = (_NX + 2) * n_steps

    def evaluate(z: np.ndarray) -> tuple[np.ndarray, sp.csc_matrix]:
        res = np.zeros(m_eq)
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []

        def put(r: int, c: int, v: float) -> None:
            rows.append(r)
            cols.append(c)
            vals.append(v)

        for t in range(n_steps):
            base = (_NX + 2) * t
            x_t = spec.x0 if t == 0 else z[lay.x(t)]
            hp_t = spec.h_p0 if t == 0 else z[lay.h_p(t)]
            u_t = z[lay.u(t)]
            x_next, a_d, b_d = _stage_map(spec, x_t, u_t, float(spec.p_pb[t]))

            q_pre = x_next[_IQ]
            hp_next = -z0m * (q_pre - x_t[_IQ]) - hp_t

            xs_next = lay.x(t + 1)
            ihp = lay.h_p(t + 1)
            ihead = lay.head(t + 1)

            # Shooting rows: x_{t+1} - rk4(x_t, u_t) - gain*h_p_{t+1}*e_q = 0.
            res[base:base + _NX] = z[xs_next] - x_next
            res[base + _IQ] -= gain * z[ihp]
            for k in range(_NX):
                put(base + k, xs_next.start + k, 1.0)
                for j in range(_NU):
                    put(base + k, lay.u(t).start + j, -b_d[k, j])
                if t >= 1:
                    for j in range(_NX):
                        put(base + k, lay.x(t).start + j, -a_d[k, j])
            put(base + _IQ, ihp, -gain)

            # Wave recursion row: h_p_{t+1} + h_p_t + z0m*(q_pre - q_t) = 0.
            r_wave = base + _NX
            res[r_wave] = z[ihp] + hp_t + z0m * (q_pre - x_t[_IQ])
            put(r_wave, ihp, 1.0)
            for j in range(_NU):
                put(r_wave, lay.u(t).start + j, z0m * b_d[_IQ, j])
            if t >= 1:
                put(r_wave, lay.h_p(t), 1.0)
                for j in range(_NX):
                    coeff = z0m * a_d[_IQ, j]
                    if j == _IQ:
                        coeff -= z0m
                    put(r_wave, lay.x(t).start + j, coeff)

            # Head definition row: h_{t+1} - head(x_{t+1}, h_p_{t+1}) = 0.
            r_head = base + _NX + 1
            xn = z[xs_next]
            head, dh_dq, dh_dqhr, dh_dhst, dh_dhp = turbine_head_partials(
                xn[_IQ], xn[3], xn[4], z[ihp], hyd)
            res[r_head] = z[ihead] - head
            put(r_head, ihead, 1.0)
            put(r_head, xs_next.start + _IQ, -dh_dq)
            put(r_head, xs_next.start + 3, -dh_dqhr)
            put(r_head, xs_next.start + 4, -dh_dhst)
            put(r_head, ihp, -dh_dhp)

        jac = sp.csc_matrix((vals, (rows, cols)), shape=(m_eq, lay.n))
        return res, jac

    return evaluate, m_eq


# ---------------------------------------------------------------------------
# Linear inequalities and bounds
# ---------------------------------------------------------------------------

def _linear_inequalities(spec: OcpSpec) -> tuple[sp.csc_matrix, np.ndarray]:
    lay = spec.layout
    b = spec.bounds
    n_steps = spec.config.horizon
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs: list[float] = []

    def add_row(entries: list[tuple[int, float]], bound: float) -> None:
        r = len(rhs)
        for c, v in entries:
            rows.append(r)
            cols.append(c)
            vals.append(v)
        rhs.append(bound)

    # Soft state/output ranges with shared slack per quantity.
    specs = ((lambda t: lay.x(t).start + _IQ, 0, b.slack_q),
             (lambda t: lay.x(t).start + 4, 1, b.slack_h_st),
             (lambda t: lay.head(t), 2, b.slack_h),
             (lambda t: lay.x(t).start + _IOM, 3, b.slack_omega))
    for t in range(1, n_steps + 1):
        eps = lay.eps(t)
        for var_index, k, sl in specs:
            i = var_index(t)
            if sl.maximum is not None:
                add_row([(i, 1.0), (eps.start + k, -1.0)], sl.maximum)
            if sl.minimum is not None:
                add_row([(i, -1.0), (eps.start + k, -1.0)], -sl.minimum)

    # Hard converter power bounds; the converter law is affine in the
    # frequency state and the power reference once the swing equation is
    # substituted for the frequency derivative.
    dpg_ddf, dpg_du = _coupling_partials(spec.params.vsg, spec.params.grid)[2:]
    for t in range(n_steps):
        iu = lay.u(t).start
        offset = dpg_du * float(spec.p_pb[t])
        entries = [(iu, 1.0 + dpg_du)]
        if t >= 1:
            entries.append((lay.x(t).start + _IDF, dpg_ddf))
        else:
            offset += dpg_ddf * float(spec.x0[_IDF])
        add_row(entries, b.p_g_max - offset)
        add_row([(c, -v) for c, v in entries], offset - b.p_g_min)

    mat = sp.csc_matrix((vals, (rows, cols)), shape=(len(rhs), lay.n))
    return mat, np.asarray(rhs)


def _simple_bounds(spec: OcpSpec) -> tuple[np.ndarray, np.ndarray]:
    lay = spec.layout
    lb = np.full(lay.n, -np.inf)
    ub = np.full(lay.n, np.inf)
    for t in range(spec.config.horizon):
        iu = lay.u(t)
        lb[iu.start + 1] = spec.bounds.g_ref_min
        ub[iu.start + 1] = spec.bounds.g_ref_max
        eps = lay.eps(t + 1)
        lb[eps] = 0.0
    return lb, ub


# ---------------------------------------------------------------------------
# Problem assembly, rollout and extraction
# ---------------------------------------------------------------------------

def predict_step(spec: OcpSpec, x: np.ndarray, h_p: float, u: np.ndarray,
                 p_pb: float) -> tuple[np.ndarray, float]:
    """One step of the controller's internal model (wave per configuration)."""
    x_next, _, _ = _stage_map(spec, x, u, p_pb)
    q_pre = x_next[_IQ]
    hp_next = -spec.wave_impedance * (q_pre - x[_IQ]) - h_p
    if abs(hp_next) < 1e-12:
        # Round-off-scale waves would be amplified by the wave-change weight
        # into phantom gradients; they carry no physical information.
        hp_next = 0.0
    x_out = x_next.copy()
    x_out[_IQ] = q_pre + flow_correction_gain(spec.params, spec.config.dt) * hp_next
    return x_out, hp_next


def rollout_guess(spec: OcpSpec, u_seq: np.ndarray) -> np.ndarray:
    """Dynamically consistent initial decision vector from an input sequence."""
    lay = spec.layout
    z = np.zeros(lay.n)
    x, hp = spec.x0.copy(), spec.h_p0
    hyd = spec.params.hydraulic
    for t in range(spec.config.horizon):
        u_t = np.clip(u_seq[t],
                      [-np.inf, spec.bounds.g_ref_min],
                      [np.inf, spec.bounds.g_ref_max])
        z[lay.u(t)] = u_t
        x, hp = predict_step(spec, x, hp, u_t, float(spec.p_pb[t]))
        z[lay.x(t + 1)] = x
        z[lay.h_p(t + 1)] = hp
        head = turbine_head_partials(x[_IQ], x[3], x[4], hp, hyd)[0]
        z[lay.head(t + 1)] = head
        eps = np.zeros(_NEPS)
        for k, (val, sl) in enumerate((
                (x[_IQ], spec.bounds.slack_q),
                (x[4], spec.bounds.slack_h_st),
                (head, spec.bounds.slack_h),
                (x[_IOM], spec.bounds.slack_omega))):
            lo = -np.inf if sl.minimum is None else sl.minimum
            hi = np.inf if sl.maximum is None else sl.maximum
            eps[k] = max(0.0, val - hi, lo - val)
        z[lay.eps(t + 1)] = eps
    return z


def build_ocp(spec: OcpSpec, initial_guess: np.ndarray | None = None
              ) -> nlp.NlpProblem:
    """Assemble the NLP for one control step."""
    hess, lin, const = _quadratic_cost(spec)
    eff_on = spec.config.efficiency_cost_enabled

    def objective(z: np.ndarray) -> tuple[float, np.ndarray]:
        val = 0.5 * float(z @ (hess @ z)) + float(lin @ z) + const
        grad = hess @ z + lin
        if eff_on:
            v_eff, g_eff = _efficiency_terms(spec, z)
            val += v_eff
            grad = grad + g_eff
        return val, grad

    def hessian(z: np.ndarray) -> sp.csc_matrix:
        return hess

    eq_eval, m_eq = _equality_evaluator(spec)
    ineq_mat, ineq_rhs = _linear_inequalities(spec)
    lb, ub = _simple_bounds(spec)

    if initial_guess is None:
        hold = np.tile([spec.references.p_g_ref_setpoint,
                        float(spec.g_ref_history[-1])],
                       (spec.config.horizon, 1))
        initial_guess = rollout_guess(spec, hold)

    return nlp.NlpProblem(n=spec.layout.n, objective=objective, hessian=hessian,
                          equalities=eq_eval, n_eq=m_eq,
                          ineq_matrix=ineq_mat, ineq_rhs=ineq_rhs,
                          lower=lb, upper=ub, x0=initial_guess, layout=spec.layout)


def cost_breakdown(spec: OcpSpec, z: np.ndarray) -> dict[str, float]:
    """Objective value split by term, evaluated at ``z``."""
    lay = spec.layout
    w = spec.weights
    refs = spec.references
    n_steps = spec.config.horizon
    out = {k: 0.0 for k in ("omega", "omega_terminal", "p_g_ref", "freq",
                            "delta_g_ref", "delta_g_ref_slow", "delta_h_p",
                            "slack", "efficiency")}
    for t in range(1, n_steps + 1):
        dev = z[lay.x(t).start + _IOM] - refs.omega_ref
        out["omega"] += 0.5 * w.omega * dev * dev
        if t == n_steps:
            out["omega_terminal"] += 0.5 * w.omega_terminal * dev * dev
        if refs.freq_weight_active:
            devf = z[lay.x(t).start + _IDF] - refs.df_ref
            out["freq"] += 0.5 * w.freq * devf * devf
        hp_prev = spec.h_p0 if t == 1 else z[lay.h_p(t - 1)]
        dhp = z[lay.h_p(t)] - hp_prev
        out["delta_h_p"] += 0.5 * w.delta_h_p * dhp * dhp
        eps = z[lay.eps(t)]
        costs = (spec.bounds.slack_q.cost, spec.bounds.slack_h_st.cost,
                 spec.bounds.slack_h.cost, spec.bounds.slack_omega.cost)
        out["slack"] += sum(0.5 * c * e * e + w.rho * e for c, e in zip(costs, eps))
    hist = spec.g_ref_history
    for t in range(n_steps):
        du = z[lay.u(t).start] - refs.p_g_ref_setpoint
        out["p_g_ref"] += 0.5 * w.p_g_ref * du * du
        g_now = z[lay.u(t).start + 1]
        g_prev = z[lay.u(t - 1).start + 1] if t >= 1 else float(hist[-1])
        out["delta_g_ref"] += 0.5 * w.delta_g_ref * (g_now - g_prev) ** 2
        g_slow = z[lay.u(t - 5).start + 1] if t >= 5 else float(hist[t - 5])
        out["delta_g_ref_slow"] += 0.5 * w.delta_g_ref_slow * (g_now - g_slow) ** 2
    if spec.config.efficiency_cost_enabled:
        out["efficiency"] = _efficiency_terms(spec, z)[0]
    return out


@dataclass
class MpcDiagnostics:
    """Per-solve bookkeeping carried into the trace."""

    status: str
    kkt_residual: float
    iterations: int
    objective: float
    slack_peaks: dict[str, float]
    predicted_states: np.ndarray   # (N+1, 6) including the current estimate
    predicted_waves: np.ndarray    # (N+1,)
    predicted_heads: np.ndarray    # (N,)
    planned_inputs: np.ndarray     # (N, 2)
    costs: dict[str, float]
    fallback: bool = False


def polish_slacks(spec: OcpSpec, z: np.ndarray) -> np.ndarray:
    """Replace each slack with its exact optimum for the solved trajectory.

    For fixed states the cost is increasing in every slack, so the optimal
    slack equals the actual constraint violation (zero when inactive).  The
    interior-point subproblems leave the low-cost slacks with a small
    positive residue; this polish restores exact complementarity without
    increasing the objective.
    """
    lay = spec.layout
    out = z.copy()
    for t in range(1, spec.config.horizon + 1):
        x = out[lay.x(t)]
        head = out[lay.head(t)]
        eps = out[lay.eps(t)]
        for k, (val, sl) in enumerate((
                (x[_IQ], spec.bounds.slack_q),
                (x[4], spec.bounds.slack_h_st),
                (head, spec.bounds.slack_h),
                (x[_IOM], spec.bounds.slack_omega))):
            lo = -np.inf if sl.minimum is None else sl.minimum
            hi = np.inf if sl.maximum is None else sl.maximum
            eps[k] = max(0.0, float(val - hi), float(lo - val))
        out[lay.eps(t)] = eps
    return out


def extract_plan(spec: OcpSpec, z: np.ndarray) -> tuple[np.ndarray, np.ndarray,
                                                         np.ndarray, np.ndarray,
                                                         np.ndarray]:
    lay = spec.layout
    n_steps = spec.config.horizon
    xs = np.zeros((n_steps + 1, _NX))
    hps = np.zeros(n_steps + 1)
    heads = np.zeros(n_steps)
    us = np.zeros((n_steps, _NU))
    eps = np.zeros((n_steps, _NEPS))
    xs[0] = spec.x0
    hps[0] = spec.h_p0
    for t in range(1, n_steps + 1):
        xs[t] = z[lay.x(t)]
        hps[t] = z[lay.h_p(t)]
        heads[t - 1] = z[lay.head(t)]
        eps[t - 1] = z[lay.eps(t)]
    for t in range(n_steps):
        us[t] = z[lay.u(t)]
    return xs, hps, heads, us, eps


class ModelPredictiveController:
    """Stateful receding-horizon controller with warm starting.

    Call :meth:`prime` once with the initial operating point, then
    :meth:`solve` once per control step.  The applied gate references are
    recorded internally to feed the slow-change cost.
    """

    def __init__(self, params: PlantParameters, weights: MpcWeights,
                 bounds: MpcBounds, config: MpcConfig):
        if config.horizon < 5:
            raise ValueError("the receding-horizon controller needs a horizon "
                             "of at least 5 steps")
        self.params = params
        self.weights = weights
        self.bounds = bounds
        self.config = config
        self._history: deque[float] = deque(maxlen=config.history_length)
        self._last_applied: PlantInputs | None = None
        self._last_inputs_plan: np.ndarray | None = None

    def prime(self, inputs: PlantInputs) -> None:
        """Seed the input history with a steady operating point."""
        self._history.clear()
        for _ in range(self.config.history_length):
            self._history.append(inputs.g_ref)
        self._last_applied = inputs
        self._last_inputs_plan = None

    def _warm_start_sequence(self) -> np.ndarray | None:
        if self._last_inputs_plan is None:
            return None
        shifted = np.vstack([self._last_inputs_plan[1:],
                             self._last_inputs_plan[-1:]])
        return shifted

    def solve(self, estimate: PlantState, p_pb: float, f_bar: float,
              p_g_measured: float) -> tuple[PlantInputs, MpcDiagnostics]:
        """Solve one control step and return the first input move.

        On solver failure the previously applied inputs are held (gate
        reference clipped to its hard range) and the diagnostics carry the
        flag; the fallback is a deliberate safety behavior.
        """
        if self._last_applied is None:
            raise RuntimeError("controller must be primed with an operating point")
        refs = assemble_references(p_g_measured, f_bar, self.config, self.params)
        spec = OcpSpec(params=self.params, weights=self.weights,
                       bounds=self.bounds, config=self.config, references=refs,
                       x0=estimate.to_array(), h_p0=estimate.h_p,
                       p_pb=np.full(self.config.horizon, p_pb),
                       g_ref_history=np.array(self._history))
        guess = None
        warm = self._warm_start_sequence()
        if warm is not None:
            guess = rollout_guess(spec, warm)
        problem = build_ocp(spec, initial_guess=guess)
        solution = nlp.solve(problem, self.config.solver)

        z = polish_slacks(spec, solution.x)
        xs, hps, heads, us, eps = extract_plan(spec, z)
        slack_peaks = {"q": float(eps[:, 0].max(initial=0.0)),
                       "h_st": float(eps[:, 1].max(initial=0.0)),
                       "h": float(eps[:, 2].max(initial=0.0)),
                       "omega": float(eps[:, 3].max(initial=0.0))}
        costs = cost_breakdown(spec, z)
        diag = MpcDiagnostics(
            status=solution.status, kkt_residual=solution.kkt_residual,
            iterations=solution.iterations,
            objective=float(sum(costs.values())),
            slack_peaks=slack_peaks, predicted_states=xs, predicted_waves=hps,
            predicted_heads=heads, planned_inputs=us, costs=costs)

        if solution.status == "converged" or solution.status == "max-iterations":
            # A best-effort iterate is still usable; a failed subproblem is not.
            usable = solution.status == "converged"
        else:
            usable = False
        if not usable and solution.status == "max-iterations":
            usable = solution.kkt_residual < 1e-2  # best effort, flagged in status
        if usable:
            move = PlantInputs(p_g_ref=float(us[0, 0]),
                               g_ref=float(np.clip(us[0, 1],
                                                   self.bounds.g_ref_min,
                                                   self.bounds.g_ref_max)),
                               p_pb=p_pb)
            self._last_inputs_plan = us
        else:
            held = self._last_applied
            move = PlantInputs(
                p_g_ref=held.p_g_ref,
                g_ref=float(np.clip(held.g_ref, self.bounds.g_ref_min,
                                    self.bounds.g_ref_max)),
                p_pb=p_pb)
            self._last_inputs_plan = None
            diag.fallback = True

        self._history.append(move.g_ref)
        self._last_applied = move
        return move, diag
