"""Stochastic-gradient MCMC: estimators, samplers, diagnostics and test-beds."""

__version__ = "0.1.0"

from .errors import (CorrectionInfeasibleError, DivergenceError, NoStationaryDistributionError,
                     OptimizationError, ParseError, SGMCMCError)
from .model import DataSet, MiniBatch, PotentialModel, QuadraticModel, grad_full, load_dataset, \
    sample_minibatch, split_dataset
from .samplers import RunConfig, StepSchedule, Trace, read_trace, run_recipe, run_sgld, write_trace

__all__ = [
    "__version__", "SGMCMCError", "DivergenceError", "CorrectionInfeasibleError",
    "NoStationaryDistributionError", "OptimizationError", "ParseError", "DataSet", "MiniBatch",
    "PotentialModel", "QuadraticModel", "grad_full", "load_dataset", "sample_minibatch",
    "split_dataset", "RunConfig", "StepSchedule", "Trace", "read_trace", "run_recipe", "run_sgld",
    "write_trace",
]
