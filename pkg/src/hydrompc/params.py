"""Parameter blocks for the plant, converter and grid models.

All quantities are per-unit on the plant base unless a field comment in the
configuration file says otherwise.  Parameters are normally loaded from a
YAML file (see ``data/default_config.yaml`` for the schema); the dataclasses
validate their own physical invariants on construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

__all__ = [
    "ParameterError",
    "HydraulicParams",
    "TurbineParams",
    "MachineParams",
    "VsgParams",
    "GridParams",
    "PlantParameters",
    "load_parameters",
    "load_config",
    "default_config_path",
]


class ParameterError(ValueError):
    """Raised when a parameter set violates its physical invariants."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ParameterError(message)


@dataclass(frozen=True)
class HydraulicParams:
    """Waterway constants: surge tank, head-race tunnel and penstock."""

    c_s: float      # surge tank storage constant [p.u.*s]
    t_w2: float     # head-race water time constant [s]
    t_w1: float     # penstock water time constant [s]
    f_0: float      # surge-tank orifice loss coefficient [p.u.]
    f_p1: float     # penstock friction coefficient [p.u.]
    f_p2: float     # head-race friction coefficient [p.u.]
    z_0: float      # penstock surge impedance [p.u.]
    t_e: float      # pressure-wave travel time [s]

    def __post_init__(self) -> None:
        for f in fields(self):
            _require(getattr(self, f.name) > 0.0, f"hydraulic.{f.name} must be > 0")
        _require(self.t_e < self.t_w1,
                 "wave travel time t_e must be well below the penstock water "
                 "time constant t_w1")

    @property
    def wave_step(self) -> float:
        """Round-trip wave time; the natural discretization step."""
        return 2.0 * self.t_e


@dataclass(frozen=True)
class TurbineParams:
    """Euler turbine-equation constants."""

    h_r: float       # rated head [p.u.]
    h_rt: float      # rated turbine head [p.u.]
    q_r: float       # rated flow [p.u.]
    q_rt: float      # rated turbine flow [p.u.]
    xi: float        # speed/velocity ratio coefficient
    psi: float       # friction/windage coefficient
    sigma: float     # self-governing coefficient
    alpha_1r: float  # rated inlet guide-vane angle [rad]
    g_max: float = 1.2  # largest admissible gate opening, used for the angle domain check

    def __post_init__(self) -> None:
        for name in ("h_r", "h_rt", "q_r", "q_rt"):
            _require(getattr(self, name) > 0.0, f"turbine.{name} must be > 0")
        _require(0.0 < self.alpha_1r < math.pi / 2.0,
                 "turbine.alpha_1r must lie in (0, pi/2)")
        _require((self.q_r / self.q_rt) * self.g_max * math.sin(self.alpha_1r) <= 1.0,
                 "(q_r/q_rt) * g_max * sin(alpha_1r) must not exceed 1; the "
                 "inlet-angle arcsine would leave its domain")


@dataclass(frozen=True)
class MachineParams:
    """Guide-vane servo and rotating-mass constants."""

    t_g: float  # guide-vane servo time constant [s]
    h: float    # turbine+generator inertia constant [s]
    d: float    # mechanical damping coefficient [p.u.]

    def __post_init__(self) -> None:
        _require(self.t_g > 0.0, "machine.t_g must be > 0")
        _require(self.h > 0.0, "machine.h must be > 0")
        _require(self.d >= 0.0, "machine.d must be >= 0")


@dataclass(frozen=True)
class VsgParams:
    """Virtual-synchronous-generator converter control law gains.

    The power law is ``P_g = k_vsg_p*df + k_vsg_d*dfdot + p_g_ref`` with
    ``df = f - f_star``.  Gains may be of either sign; negative values give a
    conventional droop/inertia response.
    """

    k_vsg_p: float  # proportional gain [p.u./p.u.]
    k_vsg_d: float  # derivative gain [p.u.*s]
    f_star: float = 1.0  # frequency reference [p.u.]


@dataclass(frozen=True)
class GridParams:
    """Aggregated-grid swing equation and power-balance estimator constants."""

    h_g: float         # aggregate grid inertia [s]
    s_n: float         # grid base power relative to plant base [p.u.]
    omega_s: float     # synchronous speed base [p.u.]
    d_m: float         # load damping [p.u. on plant base]
    omega_f: float     # low-pass corner of the df estimator channel [rad/s]
    omega_fdot: float  # low-pass corner of the dfdot estimator channel [rad/s]

    def __post_init__(self) -> None:
        for name in ("h_g", "s_n", "omega_s"):
            _require(getattr(self, name) > 0.0, f"grid.{name} must be > 0")
        for name in ("d_m", "omega_f", "omega_fdot"):
            _require(getattr(self, name) >= 0.0, f"grid.{name} must be >= 0")


@dataclass(frozen=True)
class PlantParameters:
    """Complete parameter set shared by simulator, controller and estimator."""

    hydraulic: HydraulicParams
    turbine: TurbineParams
    machine: MachineParams
    vsg: VsgParams
    grid: GridParams
    plant_mva: float = 800.0  # plant rated power [MVA], for MVA<->p.u. conversion

    @property
    def grid_mva(self) -> float:
        return self.plant_mva * self.grid.s_n


def default_config_path() -> Path:
    """Path of the packaged default configuration file."""
    return Path(str(resources.files("hydrompc").joinpath("data/default_config.yaml")))


def load_config(path: str | Path | None = None) -> dict[str, Any]:
    """Load a raw configuration mapping from ``path`` (default: packaged file)."""
    cfg_path = default_config_path() if path is None else Path(path)
    with open(cfg_path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ParameterError(f"configuration file {cfg_path} is not a mapping")
    return raw


def _section(raw: dict[str, Any], name: str) -> dict[str, Any]:
    try:
        sec = raw[name]
    except KeyError as exc:
        raise ParameterError(f"configuration is missing the '{name}' section") from exc
    if not isinstance(sec, dict):
        raise ParameterError(f"configuration section '{name}' must be a mapping")
    return sec


def parameters_from_config(raw: dict[str, Any]) -> PlantParameters:
    """Build a validated :class:`PlantParameters` from a raw config mapping."""
    base = raw.get("base", {})
    return PlantParameters(
        hydraulic=HydraulicParams(**_section(raw, "hydraulic")),
        turbine=TurbineParams(**_section(raw, "turbine")),
        machine=MachineParams(**_section(raw, "machine")),
        vsg=VsgParams(**_section(raw, "vsg")),
        grid=GridParams(**_section(raw, "grid")),
        plant_mva=float(base.get("plant_mva", 800.0)),
    )


def load_parameters(path: str | Path | None = None) -> PlantParameters:
    """Load and validate plant parameters from a configuration file."""
    return parameters_from_config(load_config(path))
