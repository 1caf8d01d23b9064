"""Perturbed compressed SGD with error feedback."""
from .compressors import CompressorSpec, Kind
from .optimizer import HyperParams, PlannerConstants, RunAborted, RunTrace, comm_plan, plan, randomk_size, run

__all__ = ["CompressorSpec", "Kind", "HyperParams", "PlannerConstants", "RunAborted", "RunTrace",
           "comm_plan", "plan", "randomk_size", "run"]
__version__ = "0.1.0"
