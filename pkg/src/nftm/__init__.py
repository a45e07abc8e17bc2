"""nftm: differentiable fields, heads, and controllers for spatial computation."""

from . import autodiff, bench, ca, dataio, field, gradcheck, heat, inpaint, kernels, optim
from .autodiff import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "autodiff",
    "bench",
    "ca",
    "dataio",
    "field",
    "gradcheck",
    "heat",
    "inpaint",
    "kernels",
    "optim",
]
