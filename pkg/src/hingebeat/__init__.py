"""Beat and downbeat tracking with a separable hinge network over frozen features."""

__version__ = "0.1.0"

from .estimators import AdapterTracker, HingeNetTracker, LinearProbeTracker, LoRATracker
from .hingenet import HingeConfig, HingeModel, count_parameters, harmonic_intervals

__all__ = [
    "AdapterTracker",
    "HingeConfig",
    "HingeModel",
    "HingeNetTracker",
    "LinearProbeTracker",
    "LoRATracker",
    "count_parameters",
    "harmonic_intervals",
]
