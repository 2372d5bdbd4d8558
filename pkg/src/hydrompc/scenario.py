"""Closed-loop scenario runner: simulator, estimator and controller wiring.

A scenario file (YAML) declares the operating point, the disturbance events
and the feature toggles; running it executes the measurement -> power-balance
estimate -> state estimate -> control solve -> plant step loop at the wave
round-trip period and writes a CSV trace plus a key:value metrics summary.

Traces are byte-reproducible: all stochastic parts draw from one seeded
generator and every number is printed with the same fixed format.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import yaml

from .grid import (
    PowerBalanceEstimatorState,
    TwoAreaState,
    estimate_power_balance,
    tie_line_power,
    two_area_average_frequency,
    vshp_two_area_outputs,
    vshp_two_area_step,
)
from .integrator import rk4_step_with_wave
from .mhe import (
    MeasurementWindow,
    MheConfig,
    MheWeights,
    MovingHorizonEstimator,
    model_outputs,
)
from .mpc import (
    ModelPredictiveController,
    MpcBounds,
    MpcConfig,
    MpcWeights,
    SlackSpec,
)
from .nlp import SolverConfig
from .params import PlantParameters, load_config, parameters_from_config
from .plant import PlantInputs, PlantState, find_equilibrium, grid_coupling, vsg_power

__all__ = [
    "Event",
    "Scenario",
    "ScenarioResult",
    "load_scenario",
    "run_scenario",
    "compare_runs",
    "write_comparison",
    "settling_time",
    "log_decrement_damping",
    "TRACE_COLUMNS",
]

# Measurement noise model: per-channel sigma is the reciprocal of the
# corresponding output-fit weight; the ROCOF channel has no fit weight and
# uses a documented fixed sigma.
ROCOF_NOISE_SIGMA = 0.002

TRACE_COLUMNS = (
    "time", "df", "g", "q", "q_hr", "h_st", "omega", "h_p", "h", "p_m", "p_g",
    "p_g_ref", "g_ref", "p_pb_true", "p_pb_est",
    "est_df", "est_g", "est_q", "est_q_hr", "est_h_st", "est_omega", "est_h_p",
    "slack_q", "slack_h_st", "slack_h", "slack_omega",
    "solver_status", "solver_kkt", "solver_iterations",
    "f_bar", "p_tie", "df_2",
)

_EVENT_KINDS = ("power_balance_step", "load_step_mva", "impulse")


@dataclass(frozen=True)
class Event:
    """One time-stamped disturbance.

    ``power_balance_step`` and ``load_step_mva`` change the net imbalance
    permanently; ``impulse`` applies only for ``duration`` seconds (one step
    by default).  Magnitudes are per-unit on the plant base; MVA values are
    converted with the configured plant rating.  ``area`` selects the
    injection bus in two-area runs.
    """

    time: float
    kind: str
    magnitude: float
    area: int = 1
    duration: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _EVENT_KINDS:
            raise ValueError(f"unknown event kind '{self.kind}'")
        if self.area not in (1, 2):
            raise ValueError("event area must be 1 or 2")


@dataclass
class Scenario:
    """A complete closed-loop experiment description."""

    name: str = "scenario"
    duration: float = 30.0
    seed: int = 0
    p_g0: float = 0.8
    controller: str = "mpc"          # mpc | hold (constant references, converter in power mode)
    pod: bool = False
    wave_model: bool = True
    efficiency_cost: bool = False
    noise: bool = False
    grid_model: str = "aggregated"   # aggregated | two-area
    events: list[Event] = field(default_factory=list)
    params_path: str | None = None
    control_period: float | None = None  # must equal the wave round-trip time
    two_area: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.controller not in ("mpc", "hold"):
            raise ValueError("controller must be 'mpc' or 'hold'")
        if self.grid_model not in ("aggregated", "two-area"):
            raise ValueError("grid model must be 'aggregated' or 'two-area'")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ValueError("events must be ordered by time")


def load_scenario(path: str | Path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return scenario_from_dict(raw)


def scenario_from_dict(raw: dict[str, Any]) -> Scenario:
    events = []
    for ev in raw.get("events", []) or []:
        events.append(Event(time=float(ev["time"]), kind=str(ev["type"]),
                            magnitude=float(ev.get("magnitude_pu",
                                                   ev.get("magnitude_mva", 0.0))),
                            area=int(ev.get("area", 1)),
                            duration=(float(ev["duration"])
                                      if "duration" in ev else None)))
    return Scenario(
        name=str(raw.get("name", "scenario")),
        duration=float(raw.get("duration", 30.0)),
        seed=int(raw.get("seed", 0)),
        p_g0=float(raw.get("operating_point", {}).get("p_g", 0.8)),
        controller=str(raw.get("controller", "mpc")),
        pod=bool(raw.get("pod", False)),
        wave_model=bool(raw.get("wave_model", True)),
        efficiency_cost=bool(raw.get("efficiency_cost", False)),
        noise=bool(raw.get("noise", False)),
        grid_model=str(raw.get("grid", "aggregated")),
        events=events,
        params_path=raw.get("params"),
        control_period=(float(raw["control_period"])
                        if raw.get("control_period") is not None else None),
        two_area={k: float(v) for k, v in (raw.get("two_area") or {}).items()},
    )


def _slack_from_cfg(entry: dict[str, Any]) -> SlackSpec:
    return SlackSpec(
        minimum=None if entry.get("min") is None else float(entry["min"]),
        maximum=None if entry.get("max") is None else float(entry["max"]),
        cost=float(entry["cost"]))


def controller_settings_from_config(raw: dict[str, Any], dt: float,
                                    scenario: Scenario
                                    ) -> tuple[MpcWeights, MpcBounds, MpcConfig]:
    """Realize the controller configuration section for a scenario."""
    m = raw["mpc"]
    wts = m["weights"]
    weights = MpcWeights(
        omega=float(wts["omega"]), omega_terminal=float(wts["omega_terminal"]),
        p_g_ref=float(wts["p_g_ref"]), freq=float(wts["freq"]),
        delta_g_ref=float(wts["delta_g_ref"]),
        delta_g_ref_slow=float(wts["delta_g_ref_slow"]),
        delta_h_p=float(wts["delta_h_p"]),
        efficiency_factor=float(wts["efficiency_factor"]))
    bds = m["bounds"]
    slk = m["slack"]
    bounds = MpcBounds(
        g_ref_min=float(bds["g_ref_min"]), g_ref_max=float(bds["g_ref_max"]),
        p_g_min=float(bds["p_g_min"]), p_g_max=float(bds["p_g_max"]),
        slack_q=_slack_from_cfg(slk["q"]), slack_h_st=_slack_from_cfg(slk["h_st"]),
        slack_h=_slack_from_cfg(slk["h"]),
        slack_omega=_slack_from_cfg(slk["omega"]))
    sol = raw.get("solver", {})
    solver = SolverConfig(kkt_tol=float(sol.get("kkt_tol", 1e-6)),
                          feas_tol=float(sol.get("feas_tol", 1e-8)),
                          max_iterations=int(sol.get("max_iterations", 60)))
    config = MpcConfig(
        horizon=int(m["horizon"]), dt=dt,
        history_length=int(m["history_length"]),
        pod_enabled=scenario.pod,
        wave_model_enabled=scenario.wave_model,
        efficiency_cost_enabled=scenario.efficiency_cost,
        p_g_ref_setpoint=float(m["setpoints"]["p_g_ref"]),
        solver=solver)
    return weights, bounds, config


def estimator_settings_from_config(raw: dict[str, Any], dt: float
                                   ) -> tuple[MheWeights, MheConfig]:
    m = raw["mhe"]
    weights = MheWeights(v=tuple(float(x) for x in m["v"]),
                         w=tuple(float(x) for x in m["w"]))
    return weights, MheConfig(window=int(m["window"]), dt=dt)


@dataclass
class ScenarioResult:
    scenario: Scenario
    trace_path: Path | None
    metrics_path: Path | None
    metrics: dict[str, float]
    columns: tuple[str, ...]
    rows: list[dict[str, Any]]

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.rows])


def _p_pb_level(events: Iterable[Event], p_pb0: float, t: float, dt: float,
                plant_mva: float) -> tuple[float, float, float]:
    """Net imbalance (plant base) and per-area transient injection at time t."""
    level = p_pb0
    area = [0.0, 0.0]
    for ev in events:
        if ev.time > t + 1e-9:
            break
        if ev.kind == "power_balance_step":
            level += ev.magnitude
            area[ev.area - 1] += ev.magnitude
        elif ev.kind == "load_step_mva":
            step = -ev.magnitude / plant_mva
            level += step
            area[ev.area - 1] += step
        elif ev.kind == "impulse":
            dur = ev.duration if ev.duration is not None else dt
            if t < ev.time + dur - 1e-9:
                level += ev.magnitude
                area[ev.area - 1] += ev.magnitude
    return level, area[0], area[1]


def _fmt(value: Any) -> str:
    if isinstance(value, str):
        return value
    v = float(value)
    if math.isnan(v):
        return "nan"
    return format(v, ".12g")


def run_scenario(scenario: Scenario, out_dir: str | Path | None = None,
                 seed: int | None = None) -> ScenarioResult:
    """Execute one closed-loop scenario.

    Writes ``<name>_trace.csv`` and ``<name>_metrics.txt`` under ``out_dir``
    when given.  On an unexpected model error the trace collected so far is
    flushed before the exception propagates.
    """
    raw = load_config(scenario.params_path)
    params = parameters_from_config(raw)
    dt = params.hydraulic.wave_step
    if scenario.control_period is not None \
            and abs(scenario.control_period - dt) > 1e-9:
        raise ValueError("the control period must equal the wave round-trip time")
    n_steps = int(round(scenario.duration / dt))
    if abs(n_steps * dt - scenario.duration) > 1e-6:
        raise ValueError(
            f"duration {scenario.duration} is not a multiple of dt = {dt}")

    run_seed = scenario.seed if seed is None else seed
    rng = np.random.default_rng(run_seed)

    mhe_weights, mhe_cfg = estimator_settings_from_config(raw, dt)
    sigma_y = 1.0 / np.asarray(mhe_weights.v)

    sim_params = params
    use_mpc = scenario.controller == "mpc"
    if not use_mpc:
        # Baseline: converter in constant-power mode, references held.
        sim_params = replace(params, vsg=replace(params.vsg, k_vsg_p=0.0,
                                                 k_vsg_d=0.0))

    state, eq_inputs = find_equilibrium(sim_params, scenario.p_g0)
    p_pb0 = -scenario.p_g0

    two_area_mode = scenario.grid_model == "two-area"
    ta = TwoAreaState(**scenario.two_area) if scenario.two_area else TwoAreaState()

    controller = estimator = None
    if use_mpc:
        weights, bounds, mpc_cfg = controller_settings_from_config(raw, dt, scenario)
        controller = ModelPredictiveController(sim_params, weights, bounds, mpc_cfg)
        controller.prime(eq_inputs)
        estimator = MovingHorizonEstimator(sim_params, mhe_weights, mhe_cfg)

    window = MeasurementWindow(mhe_cfg.window, dt)
    pb_state = PowerBalanceEstimatorState()
    applied = eq_inputs
    p_pb_est_prev = p_pb0

    # Pre-fill the window with noiseless steady samples so estimation can
    # start at the first loop step.
    eq_y = model_outputs(state, eq_inputs, sim_params)
    for j in range(mhe_cfg.window - 1, 0, -1):
        window.push(-j * dt, eq_y,
                    PlantInputs(eq_inputs.p_g_ref, eq_inputs.g_ref, p_pb0))

    rows: list[dict[str, Any]] = []
    error: Exception | None = None
    try:
        for k in range(n_steps):
            t = k * dt
            p_pb_true, p_a1, p_a2 = _p_pb_level(
                scenario.events, p_pb0, t, dt, sim_params.plant_mva)

            # Measure.
            meas_inputs = PlantInputs(applied.p_g_ref, applied.g_ref, p_pb_true)
            if two_area_mode:
                p_dist = (p_a1 / sim_params.grid.s_n - scenario.p_g0 / sim_params.grid.s_n,
                          p_a2 / sim_params.grid.s_n)
                p_g_true, df_dot_true = vshp_two_area_outputs(
                    state, ta, meas_inputs, p_dist, sim_params)
                f_bar = two_area_average_frequency(ta)
                p_tie = tie_line_power(ta)
            else:
                p_g_true, df_dot_true = grid_coupling(
                    state.df, applied.p_g_ref, p_pb_true,
                    sim_params.vsg, sim_params.grid)
                f_bar = 1.0 + state.df
                p_tie = 0.0

            y_true = model_outputs(state, meas_inputs, sim_params)
            if scenario.noise:
                y_meas = y_true + sigma_y * rng.standard_normal(y_true.size)
                df_dot_meas = df_dot_true + ROCOF_NOISE_SIGMA * rng.standard_normal()
            else:
                y_meas = y_true
                df_dot_meas = df_dot_true
            df_meas = float(y_meas[0])

            # Power-balance estimate from the frequency measurements.
            p_g_recon = vsg_power(df_meas, df_dot_meas, applied.p_g_ref,
                                  sim_params.vsg)
            p_pb_est, pb_state = estimate_power_balance(
                p_g_recon, df_meas, df_dot_meas, pb_state, sim_params.grid, dt)

            window.push(t, y_meas,
                        PlantInputs(applied.p_g_ref, applied.g_ref, p_pb_est_prev))

            # Estimate and control.
            if use_mpc:
                x_hat, mhe_diag = estimator.estimate(window)
                p_g_hat = float(model_outputs(
                    x_hat, PlantInputs(applied.p_g_ref, applied.g_ref, p_pb_est),
                    sim_params)[6])
                move, diag = controller.solve(x_hat, p_pb_est, f_bar, p_g_hat)
                solver_status = diag.status + ("/fallback" if diag.fallback else "")
                solver_kkt = diag.kkt_residual
                solver_iters = diag.iterations
                slacks = diag.slack_peaks
            else:
                x_hat = state
                move = PlantInputs(eq_inputs.p_g_ref, eq_inputs.g_ref, p_pb_est)
                solver_status = "hold"
                solver_kkt = 0.0
                solver_iters = 0
                slacks = {"q": 0.0, "h_st": 0.0, "h": 0.0, "omega": 0.0}

            rows.append({
                "time": t, "df": state.df, "g": state.g, "q": state.q,
                "q_hr": state.q_hr, "h_st": state.h_st, "omega": state.omega,
                "h_p": state.h_p, "h": float(y_true[4]), "p_m": float(y_true[5]),
                "p_g": p_g_true, "p_g_ref": move.p_g_ref, "g_ref": move.g_ref,
                "p_pb_true": p_pb_true, "p_pb_est": p_pb_est,
                "est_df": x_hat.df, "est_g": x_hat.g, "est_q": x_hat.q,
                "est_q_hr": x_hat.q_hr, "est_h_st": x_hat.h_st,
                "est_omega": x_hat.omega, "est_h_p": x_hat.h_p,
                "slack_q": slacks["q"], "slack_h_st": slacks["h_st"],
                "slack_h": slacks["h"], "slack_omega": slacks["omega"],
                "solver_status": solver_status, "solver_kkt": solver_kkt,
                "solver_iterations": solver_iters,
                "f_bar": f_bar, "p_tie": p_tie,
                "df_2": ta.df_2 if two_area_mode else 0.0,
            })

            # Integrate one step with the applied move.
            sim_inputs = PlantInputs(move.p_g_ref, move.g_ref, p_pb_true)
            if two_area_mode:
                state, ta, _, _ = vshp_two_area_step(
                    state, ta, sim_inputs, p_dist, sim_params, dt)
            else:
                state = rk4_step_with_wave(state, sim_inputs, sim_params, dt)

            applied = move
            p_pb_est_prev = p_pb_est
    except Exception as exc:  # flush the partial trace, then re-raise
        error = exc

    metrics = _metrics(rows, scenario, dt)
    trace_path = metrics_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_path = out / f"{scenario.name}_trace.csv"
        _write_trace(trace_path, rows)
        metrics_path = out / f"{scenario.name}_metrics.txt"
        _write_metrics(metrics_path, metrics)
    if error is not None:
        raise error
    return ScenarioResult(scenario=scenario, trace_path=trace_path,
                          metrics_path=metrics_path, metrics=metrics,
                          columns=TRACE_COLUMNS, rows=rows)


def _write_trace(path: Path, rows: list[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])


def _write_metrics(path: Path, metrics: dict[str, float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key in sorted(metrics):
            fh.write(f"{key}: {_fmt(metrics[key])}\n")


def settling_time(times: np.ndarray, signal: np.ndarray, reference: float,
                  band: float) -> float:
    """Last time the signal sits outside ``reference +- band`` (0 if never)."""
    outside = np.abs(signal - reference) > band
    if not np.any(outside):
        return 0.0
    return float(times[np.where(outside)[0][-1]])


def log_decrement_damping(times: np.ndarray, signal: np.ndarray,
                          t_start: float = 0.0) -> float:
    """Damping ratio of the dominant oscillation via the log decrement.

    Detrends by the final value, collects successive positive peaks after
    ``t_start`` and fits the log amplitude decay.  Returns NaN when fewer
    than three peaks exist.
    """
    mask = times >= t_start
    t = times[mask]
    x = signal[mask] - signal[mask][-1]
    peaks_t: list[float] = []
    peaks_a: list[float] = []
    for i in range(1, len(x) - 1):
        if x[i] > x[i - 1] and x[i] >= x[i + 1] and x[i] > 0.0:
            peaks_t.append(float(t[i]))
            peaks_a.append(float(x[i]))
    if len(peaks_a) < 3:
        return float("nan")
    amps = np.asarray(peaks_a)
    idx = np.arange(len(amps))
    # Least-squares slope of log amplitude per cycle.
    slope = np.polyfit(idx, np.log(np.maximum(amps, 1e-15)), 1)[0]
    delta = -slope
    return float(delta / math.sqrt(4.0 * math.pi ** 2 + delta ** 2))


def _metrics(rows: list[dict[str, Any]], scenario: Scenario, dt: float
             ) -> dict[str, float]:
    if not rows:
        return {"steps": 0.0}
    times = np.array([r["time"] for r in rows])
    df = np.array([r["df"] for r in rows])
    omega = np.array([r["omega"] for r in rows])
    h = np.array([r["h"] for r in rows])
    h_st = np.array([r["h_st"] for r in rows])
    kkt = np.array([r["solver_kkt"] for r in rows])
    fallbacks = sum(1 for r in rows if str(r["solver_status"]).endswith("fallback"))
    metrics = {
        "steps": float(len(rows)),
        "freq_nadir_pu": float(np.abs(df).max()),
        "df_min": float(df.min()),
        "df_max": float(df.max()),
        "omega_min": float(omega.min()),
        "omega_max": float(omega.max()),
        "h_max": float(h.max()),
        "h_st_min": float(h_st.min()),
        "settling_time_f_s": settling_time(times, df, float(df[-1]), 1e-3),
        "settling_time_omega_s": settling_time(times, omega, float(omega[-1]), 5e-3),
        "solver_kkt_max": float(kkt.max()),
        "solver_fallbacks": float(fallbacks),
    }
    if scenario.grid_model == "two-area":
        p_tie = np.array([r["p_tie"] for r in rows])
        first_event = scenario.events[0].time if scenario.events else 0.0
        metrics["p_tie_damping_ratio"] = log_decrement_damping(
            times, p_tie, t_start=first_event + 1.0)
        metrics["p_tie_peak"] = float(np.abs(p_tie - p_tie[-1]).max())
    return metrics


def read_trace(path: str | Path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Load a trace CSV into named numeric columns (strings preserved)."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data: dict[str, list] = {name: [] for name in header}
        for line in reader:
            for name, cell in zip(header, line):
                data[name].append(cell)
    out: dict[str, np.ndarray] = {}
    for name, cells in data.items():
        if name == "solver_status":
            out[name] = np.array(cells)
        else:
            out[name] = np.array([float(c) for c in cells])
    return header, out


def compare_runs(path_a: str | Path, path_b: str | Path) -> dict[str, float]:
    """Per-signal maximum and integrated absolute differences of two traces."""
    header_a, a = read_trace(path_a)
    header_b, b = read_trace(path_b)
    if header_a != header_b:
        raise ValueError("traces have different column sets")
    if a["time"].size != b["time"].size or not np.allclose(a["time"], b["time"],
                                                           rtol=0, atol=1e-9):
        raise ValueError("traces are on different time grids")
    dt = float(a["time"][1] - a["time"][0]) if a["time"].size > 1 else 0.0
    diffs: dict[str, float] = {}
    for name in header_a:
        if name in ("time", "solver_status"):
            continue
        d = np.abs(a[name] - b[name])
        diffs[f"max_abs_diff.{name}"] = float(d.max(initial=0.0))
        diffs[f"int_abs_diff.{name}"] = float(d.sum() * dt)
    return diffs


def write_comparison(path: str | Path, diffs: dict[str, float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key in sorted(diffs):
            fh.write(f"{key}: {_fmt(diffs[key])}\n")
