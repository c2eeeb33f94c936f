"""Asynchronous multi-band measurement fusion with latent dynamics.

Two irregularly sampled measurement streams (beam SNR vectors and CSI
embeddings) are encoded into initial latent conditions, unrolled through
learnable continuous-time dynamics to shared label times for fusion and to
their native times for reconstruction, and decoded into continuous 2-D
trajectory estimates.  Includes a synthetic testbed, the CSI calibration
frontend, frame-to-frame and sequence-to-sequence baselines, and a training
and evaluation CLI.
"""

__version__ = "0.1.0"

from .data_model import DatasetConfig, MeasurementWindow, Region, SplitSpec
from .model import DynamicFusionModel, LossWeights, ModelConfig
from .ode import SolverConfig

__all__ = [
    "DatasetConfig",
    "MeasurementWindow",
    "Region",
    "SplitSpec",
    "DynamicFusionModel",
    "LossWeights",
    "ModelConfig",
    "SolverConfig",
    "__version__",
]
