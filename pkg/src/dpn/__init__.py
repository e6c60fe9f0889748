"""Detail-preserving network for retinal vessel segmentation.

A self-contained CPU stack: NCHW tensor kernels, a tape-based reverse-mode
autodiff engine, the DP-Block/DPN model with deep supervision, class-balanced
training, offline augmentation, and FOV-masked evaluation.
"""

__version__ = "0.1.0"

from .autograd import Param, Tape, backward, grad_check
from .model import DpnConfig, DpnModel, count_parameters, dpn_forward, \
    init_xavier

__all__ = [
    "Param", "Tape", "backward", "grad_check",
    "DpnConfig", "DpnModel", "count_parameters", "dpn_forward",
    "init_xavier", "__version__",
]
