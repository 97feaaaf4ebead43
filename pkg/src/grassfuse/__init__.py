"""Subspace-fusion networks on Grassmann manifolds.

Covariance features are normalized on the SPD manifold, decomposed into
orthonormal atoms, regrouped into adaptively selected subspaces, projected
through Stiefel-constrained channel maps, fused by Fréchet means on the
Grassmannian, and read out from the fused projectors.  Everything is float64
and deterministic given a seed.
"""

from .config import (
    ArchitectureConfig,
    BlockSpec,
    DataConfig,
    KarcherConfig,
    LossConfig,
    OptimizerConfig,
    RunConfig,
    ScheduleConfig,
    SpdBnConfig,
    SyntheticSpec,
    load_config,
)
from .layers import SubspaceFusionModel, init_model, model_forward
from .training import evaluate, fit, gradcheck

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "BlockSpec",
    "DataConfig",
    "KarcherConfig",
    "LossConfig",
    "OptimizerConfig",
    "RunConfig",
    "ScheduleConfig",
    "SpdBnConfig",
    "SubspaceFusionModel",
    "SyntheticSpec",
    "__version__",
    "evaluate",
    "fit",
    "gradcheck",
    "init_model",
    "load_config",
    "model_forward",
]
