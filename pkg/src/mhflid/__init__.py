"""Desk-scale simulator of heterogeneous federated learning with a
lightweight messenger model carrying knowledge between clients."""

from .tensor import Parameter, ShapeError, Tensor, no_grad, set_debug_checks

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "ShapeError", "no_grad", "set_debug_checks", "__version__"]
