"""Sequentially constrained Monte Carlo: particle samplers that move from an
easy distribution to a constrained target through a sequence of
increasingly strict soft constraints."""

from .engine import DensitySequence, RunTrace, SMCResult, StageRecord, run_scmc
from .errors import ConfigError, DegenerateEnsembleError, NumericalError, SCMCError
from .particles import ParticleEnsemble, ResampleMethod, ess, resample

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateEnsembleError",
    "DensitySequence",
    "NumericalError",
    "ParticleEnsemble",
    "ResampleMethod",
    "RunTrace",
    "SCMCError",
    "SMCResult",
    "StageRecord",
    "ess",
    "resample",
    "run_scmc",
]
