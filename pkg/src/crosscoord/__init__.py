"""crosscoord: roadside-unit coordination of connected vehicles.

A numpy-based research library pairing a deterministic 2D intersection
simulator with a two-stage reinforcement learning pipeline (conservative
offline pre-training followed by on-policy multi-agent fine-tuning) and a
binary V2I message layer for dispatching the learned policies from a
roadside unit.
"""
from crosscoord.tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "__version__"]
