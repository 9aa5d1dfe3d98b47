"""Monte Carlo laboratory for backward SDEs with linear-growth generators.

Closed-form test functions and constants, Brownian scenarios and
generators, regression-based backward solvers, empirical checks of the
a priori estimate, and uniqueness experiments comparing two solvers.
"""

from .errors import (ConfigError, ConvergenceError, DomainError, NonFiniteError, PreconditionError,
                     RegressionError, ResourceError)
from .regression import RegressionConfig
from .report import VerificationReport, config_hash
from .scenario import (GeneratorSpec, PathEnsemble, TerminalSpec, TimeGrid, builtin_generators, eval_terminal,
                       get_generator, simulate_brownian, verify_assumptions)
from .solver import SolutionField, SolverConfig, monotone_approximation, picard_solve, solve_backward_euler
from .special_functions import (CriticalParams, PhiPoint, apriori_constant_C, exp_moment_bound, growth_constant_K,
                                hjb_residual, phi_jet, psi, young_gap)

__version__ = "0.1.0"
