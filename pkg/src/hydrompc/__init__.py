"""Variable-speed hydropower control stack.

Plant simulation, nonlinear model-predictive control and moving-horizon
estimation for a converter-connected hydropower unit providing fast
frequency reserves.
"""

from .params import (
    GridParams,
    HydraulicParams,
    MachineParams,
    ParameterError,
    PlantParameters,
    TurbineParams,
    VsgParams,
    load_config,
    load_parameters,
)
from .plant import (
    DomainError,
    PlantInputs,
    PlantState,
    find_equilibrium,
    inlet_angle,
    optimal_speed,
    plant_derivatives,
    turbine_efficiency,
    turbine_head,
    turbine_power,
    vsg_power,
    wave_update,
)
from .integrator import StepConfig, rk4_step, rk4_step_with_wave

__version__ = "0.1.0"
