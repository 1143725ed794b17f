"""Coalitional MPC for canal level control with switching network topology."""

__version__ = "0.1.0"

from .canal import DEZ_REACHES, ReachParams, build_chain  # noqa: F401
from .control import ControllerConfig  # noqa: F401
from .simulate import (  # noqa: F401
    PlantConfig,
    Scenario,
    accumulate_costs,
    run_centralized,
    run_closed_loop,
    scenario_1,
    scenario_2,
)
