"""Convexification of a 1-d coefficient inverse problem for the wave
equation, with a Laguerre expansion in the pseudofrequency, followed by
adjoint-state refinement."""

from .basis import LaguerreBasis, PseudoFrequencyGrid, QuadratureConfig
from .forward import CoefficientProfile, SpaceTimeGrid, TimeTraces, simulate
from .pipeline import ExperimentConfig, RunReport, builtin_profile, metrics, run_hybrid, run_local_only

__all__ = [
    "CoefficientProfile",
    "ExperimentConfig",
    "LaguerreBasis",
    "PseudoFrequencyGrid",
    "QuadratureConfig",
    "RunReport",
    "SpaceTimeGrid",
    "TimeTraces",
    "builtin_profile",
    "metrics",
    "run_hybrid",
    "run_local_only",
    "simulate",
]

__version__ = "0.1.0"
