"""Physics-guided terahertz tomographic imaging.

Submodules:
    thz_signal  wave-propagation forward model and band extraction
    phantom     synthetic objects, view rendering, corruption, datasets
    sarnet      restoration network (subspace attention, channel attention)
    train       loss, init, schedules, two-stage training harness
    tomo        forward Radon, FBP, SART, volume assembly
    metrics     PSNR, cross-section MSE, IoU, F-score, Chamfer
    cli         thz-tomo command line entry point

sarnet/train/cli import torch and are loaded lazily; the numpy-only
modules import eagerly.
"""

import importlib

from . import metrics, phantom, thz_signal, tomo
from .errors import ConfigError, DataMismatchError, MissingInputError, ShapeError

__version__ = "0.1.0"

_LAZY = ("sarnet", "train", "cli")


def __getattr__(name):
    if name in _LAZY:
        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    "thz_signal", "phantom", "sarnet", "train", "tomo", "metrics", "cli",
    "ShapeError", "ConfigError", "MissingInputError", "DataMismatchError",
    "__version__",
]
