"""Likelihood, consistency and concentration experiments for parameterized hidden Markov models."""
from .core import Init, ModelSpec, ParameterBox, log_g, log_q, simulate, simulate_observations
from .errors import LabError
from .rng import RngStream

__all__ = ["Init", "LabError", "ModelSpec", "ParameterBox", "RngStream", "log_g", "log_q",
           "simulate", "simulate_observations"]
__version__ = "0.1.0"
