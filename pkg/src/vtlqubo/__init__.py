"""Virtual-traffic-light phase sequencing as a QUBO, with classical solvers,
an intersection simulator and an experiment runner."""
from .delays import DelayMatrix, VehicleSnapshot, build_delay_matrix, eta, transition_delay
from .phases import MOVEMENTS, Movement, PhaseGroup, SignalTiming, movements_conflict, standard_phase_groups
from .qubo import (
    IsingModel,
    PhaseSequence,
    QuboModel,
    auto_gamma,
    build_qubo,
    decode,
    encode,
    evaluate,
    sequence_cost,
    to_ising,
)
from .sim import LatencyModel, ScenarioConfig, run_scenario
from .solvers import SolverConfig, SolverResult, solve, solve_exact, solve_model
from .stats import RunMetrics, Trip, summarize, welch_one_tailed

__version__ = "0.1.0"
