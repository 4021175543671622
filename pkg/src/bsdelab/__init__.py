"""bsdelab: a numerical laboratory for backward SDEs driven by a Brownian
motion, a finite-activity Poisson random measure, and an orthogonal
auxiliary martingale, with monotone drivers and L^p data."""

__version__ = "1.0.0"

from .errors import (BsdeLabError, ConfigurationError, DomainError, ModelError,
                     NumericError, ResourceError, StateError)
from .model import (ComparisonData, GeneratorSpec, SamplerConfig, TerminalSpec,
                    TerminalState, shift_alpha_to_zero, verify_h3prime,
                    verify_integrability, verify_lipschitz, verify_monotonicity)
from .noise import (JumpActivity, PathEnsemble, TimeGrid,
                    compensated_increments, load_ensemble, save_ensemble,
                    simulate, simulate_two_point)
from .oracle import TreeModel, TreeSolution, decompose_increment, solve_exact
from .regression import RegressionBasis
from .solver import (PicardParams, SolutionEnsemble, StoppingRule, apply_xi,
                     backward_solve, beta_norm, load_solution,
                     measure_contraction, random_horizon_solve, save_solution,
                     unshift_solution)

__all__ = [name for name in dir() if not name.startswith("_")]
