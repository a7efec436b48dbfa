from . import functional
from .modules import BatchNorm, Conv3d, Linear, Module, Parameter, SharedMLP, count_parameters
from .tensor import Tensor, concat, finite_checks, no_grad

__all__ = [
    "BatchNorm", "Conv3d", "Linear", "Module", "Parameter", "SharedMLP", "Tensor",
    "concat", "count_parameters", "finite_checks", "functional", "no_grad",
]
