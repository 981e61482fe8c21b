"""Orientation-disentangled VAE with SE(2,N) group-equivariant networks."""

from .backend import backend_name
from .rng import RngStream
from .tensor import Tensor, Tape, backward, no_grad, tape

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "RngStream", "backward", "backend_name",
           "no_grad", "tape", "__version__"]
