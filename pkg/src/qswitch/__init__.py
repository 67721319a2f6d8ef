"""Request/LLE two-sided queue model of an entanglement switch, its schedulers and analysis tools."""

from .model import (
    ArrivalSpec,
    ArrivalStream,
    Config,
    ConfigError,
    Schedule,
    ScheduleError,
    SwitchTopology,
    enumerate_feasible_schedules,
    load_config,
    loads_config,
    make_arrivals,
)
from .dynamics import AgnosticPolicy, SimTrace, SwitchState, simulate, step, build_transition_matrix
from .mdp import MdpSolution, StationaryAnalysis, evaluate_policy, policy_iteration, solve_average_reward

__version__ = "0.1.0"
