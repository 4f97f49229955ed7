"""Set-prediction multi-instance 2D pose estimation toolkit.

Pose vectorization, bipartite matching with a Hungarian solver, the composite
matched-pair training loss with verified gradients, OKS/AP evaluation, a
small transformer trained end to end on synthetic data, and a CLI tying it
together.
"""

from . import autodiff, checkpoint, config, data, gradcheck, loss, matching, metrics, model, pose, training

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "checkpoint",
    "config",
    "data",
    "gradcheck",
    "loss",
    "matching",
    "metrics",
    "model",
    "pose",
    "training",
    "__version__",
]
