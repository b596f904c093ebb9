"""Mean-field interacting multi-type birth-death processes.

Subpackages: ``model`` (parameterizations), ``ode`` (adaptive integration
with dense output), ``scf`` (moment trajectories, self-consistent fields,
steady states), ``master`` (truncated forward equation), ``ensemble``
(exact finite-N simulation), ``phylo`` (typed trees and likelihoods), and
``cli`` (command-line front end).
"""

from .model import ModelSpec, SamplingSpec, mu_tilde, validate
from .ode import DenseSolution, Tolerances, integrate
from .scf import (
    FieldTrajectory,
    ScfConfig,
    ScfResult,
    moment_map,
    solve_moment_direct,
    solve_scf,
    steady_states,
)
from .master import TruncatedLattice, solve_master, moments
from .ensemble import simulate, simulate_general, convergence_study
from .phylo import parse_tree, serialize_tree, solve_nonobs, log_likelihood

__version__ = "0.1.0"

__all__ = [
    "ModelSpec",
    "SamplingSpec",
    "mu_tilde",
    "validate",
    "DenseSolution",
    "Tolerances",
    "integrate",
    "FieldTrajectory",
    "ScfConfig",
    "ScfResult",
    "moment_map",
    "solve_moment_direct",
    "solve_scf",
    "steady_states",
    "TruncatedLattice",
    "solve_master",
    "moments",
    "simulate",
    "simulate_general",
    "convergence_study",
    "parse_tree",
    "serialize_tree",
    "solve_nonobs",
    "log_likelihood",
    "__version__",
]
