"""Hierarchical driving stack at desk scale.

Grid potential maps as continuous intention, a sinusoidal-basis neural
trajectory with exact analytic derivatives, imitation training with
high-order supervision, causal data relabeling, a rear-wheel feedback
tracking controller, and a deterministic asynchronous planner/tracker
simulator with injectable latency.
"""

__version__ = "0.1.0"

from .gridmap import GridSpec, IntentionPath, PotentialMap
from .trajectory import ContinuousTrajectory, KinematicState

__all__ = [
    "GridSpec",
    "IntentionPath",
    "PotentialMap",
    "ContinuousTrajectory",
    "KinematicState",
    "__version__",
]
