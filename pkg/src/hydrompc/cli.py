"""Command line interface: run scenarios, compare traces, self-check."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import nlp
from .mhe import MeasurementWindow, MheConfig, MovingHorizonEstimator, model_outputs
from .mpc import OcpSpec, assemble_references, build_ocp
from .params import load_config, parameters_from_config
from .plant import PlantInputs, find_equilibrium, plant_derivatives
from .scenario import (
    compare_runs,
    controller_settings_from_config,
    estimator_settings_from_config,
    load_scenario,
    run_scenario,
    scenario_from_dict,
    write_comparison,
)


def _toggle(value: str | None) -> bool | None:
    if value is None:
        return None
    return value == "on"


@click.group()
def main() -> None:
    """Variable-speed hydropower control stack."""


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out",
              show_default=True, help="Directory for the trace and metrics files.")
@click.option("--seed", type=int, default=None, help="Override the scenario RNG seed.")
@click.option("--pod", type=click.Choice(["on", "off"]), default=None,
              help="Override the power-oscillation-damping toggle.")
@click.option("--wave", type=click.Choice(["on", "off"]), default=None,
              help="Override the controller's penstock wave model toggle.")
@click.option("--noise", type=click.Choice(["on", "off"]), default=None,
              help="Override measurement noise injection.")
@click.option("--controller", type=click.Choice(["mpc", "hold"]), default=None,
              help="Override the controller slot (hold = constant references).")
def run(scenario_file: str, out_dir: str, seed: int | None, pod: str | None,
        wave: str | None, noise: str | None, controller: str | None) -> None:
    """Run a closed-loop scenario and write CSV trace plus metrics."""
    scenario = load_scenario(scenario_file)
    for name, value in (("pod", _toggle(pod)), ("wave_model", _toggle(wave)),
                        ("noise", _toggle(noise))):
        if value is not None:
            setattr(scenario, name, value)
    if controller is not None:
        scenario.controller = controller
    result = run_scenario(scenario, out_dir=out_dir, seed=seed)
    click.echo(f"trace:   {result.trace_path}")
    click.echo(f"metrics: {result.metrics_path}")
    for key in sorted(result.metrics):
        click.echo(f"  {key}: {result.metrics[key]:.6g}")


@main.command()
@click.argument("trace_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("trace_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_file", type=click.Path(dir_okay=False), required=True,
              help="File for the per-signal difference table.")
def compare(trace_a: str, trace_b: str, out_file: str) -> None:
    """Compare two trace files signal by signal."""
    diffs = compare_runs(trace_a, trace_b)
    write_comparison(out_file, diffs)
    click.echo(f"wrote {out_file}")
    interesting = {k: v for k, v in diffs.items()
                   if k.startswith("max_abs_diff.") and v > 0.0}
    for key in sorted(interesting):
        click.echo(f"  {key}: {interesting[key]:.6g}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Parameter file (defaults to the packaged one).")
def check(config_path: str | None) -> None:
    """Run derivative and equilibrium self-tests."""
    raw = load_config(config_path)
    params = parameters_from_config(raw)
    dt = params.hydraulic.wave_step
    failures = 0

    state, inputs = find_equilibrium(params, 0.8)
    resid = float(np.abs(plant_derivatives(state, inputs, params)).max())
    ok = resid < 1e-10
    failures += not ok
    click.echo(f"[{'ok' if ok else 'FAIL'}] equilibrium residual {resid:.3e}")

    scenario = scenario_from_dict({})
    weights, bounds, mpc_cfg = controller_settings_from_config(raw, dt, scenario)
    refs = assemble_references(0.8, 1.0, mpc_cfg, params)
    spec = OcpSpec(params=params, weights=weights, bounds=bounds, config=mpc_cfg,
                   references=refs, x0=state.to_array(), h_p0=0.0,
                   p_pb=np.full(mpc_cfg.horizon, inputs.p_pb),
                   g_ref_history=np.full(mpc_cfg.history_length, inputs.g_ref))
    problem = build_ocp(spec)
    report = nlp.check_derivatives(problem, problem.x0)
    ok = report.max_error < 1e-5
    failures += not ok
    click.echo(f"[{'ok' if ok else 'FAIL'}] controller problem derivatives "
               f"(max rel err {report.max_error:.3e})")

    mhe_weights, mhe_cfg = estimator_settings_from_config(raw, dt)
    estimator = MovingHorizonEstimator(params, mhe_weights, mhe_cfg)
    window = MeasurementWindow(mhe_cfg.window, dt)
    y_eq = model_outputs(state, inputs, params)
    for j in range(mhe_cfg.window):
        window.push(j * dt, y_eq, inputs)
    x_hat, diag = estimator.estimate(window)
    err = float(np.abs(x_hat.to_array() - state.to_array()).max())
    ok = err < 1e-6 and not diag.fallback
    failures += not ok
    click.echo(f"[{'ok' if ok else 'FAIL'}] estimator steady-window recovery "
               f"(max state err {err:.3e})")

    click.echo("all checks passed" if failures == 0 else f"{failures} check(s) failed")
    if failures:
        sys.exit(1)


if __name__ == "__main__":
    main()
