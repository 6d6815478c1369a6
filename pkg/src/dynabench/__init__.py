"""dynabench: learned feed-forward dynamics models evaluated by planning.

Trains deterministic / stochastic MLP dynamics models (and bootstrapped
ensembles) on trajectory data from analytic control environments, then
scores them by running a CEM-based model-predictive controller against the
real system, with a ground-truth-model planner as the baseline.
"""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, NumericError, StructuralError
from .numerics import Rng

__all__ = ["Rng", "ConfigError", "FormatError", "NumericError",
           "StructuralError", "__version__"]
