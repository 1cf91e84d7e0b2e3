"""Optimal dispatch of pumped hydro storage under reservoir constraints.

Solvers for the dispatch problem as a state-constrained stochastic control
problem: a direct monotone semi-Lagrangian scheme (valid when inflow stays
inside control capacity), a controllable-region analysis, and a level-set
reformulation on an augmented state space that removes the constraints
entirely, plus Monte Carlo replay of the extracted feedback policies.
"""

from .prices import (PriceModel, drift, diffusion, expected_price,
                     accumulated_price, simulate_step, simulate_paths)
from .system import (HydroSystem, Inflow, ControlPoint, inflow, power_output,
                     max_power_output, reservoir_drift, capacity_distance,
                     check_controllability, control_table)
from .grids import Axis, GridSpec, ValueField, FeedbackPolicy
from .hjb import solve_constrained_hjb, sl_step_constrained, ControllabilityError
from .viability import (overflow_window, controllable_level,
                        solve_violation_cost, controllable_boundary,
                        compute_viability, ViabilityResult)
from .levelset import (AugmentedGrid, shifted_payoff_rate, sl_step_augmented,
                       solve_levelset_value, reconstruct_value,
                       reconstruct_feedback, solve_levelset,
                       ReconstructionResult, LevelsetSolution)
from .simulate import SimConfig, SimReport, simulate_policy, compare_values
from .config import RunConfig, parse_config
from .pipeline import run_pipeline

__version__ = "0.1.0"
