"""Kernel backend selection.

The compiled extension is preferred when importable; the NumPy reference
backend is the fallback.  ``MHFLID_KERNELS`` forces a choice: ``compiled``,
``python`` or ``auto`` (default).  Both backends share signatures and the
float32-storage/float64-accumulation contract, so swapping them changes
speed, not results beyond final-rounding noise.
"""
from __future__ import annotations

import os

from . import reference

_choice = os.environ.get("MHFLID_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(f"MHFLID_KERNELS must be auto|compiled|python, got {_choice!r}")

if _choice == "python":
    _active = reference
    BACKEND = "python"
else:
    try:
        from . import _fastconv as _active  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        _active = reference
        BACKEND = "python"

conv2d_forward = _active.conv2d_forward
conv2d_grad_input = _active.conv2d_grad_input
conv2d_grad_weight = _active.conv2d_grad_weight
maxpool2d_forward = _active.maxpool2d_forward
maxpool2d_backward = _active.maxpool2d_backward
convt2d_forward = _active.convt2d_forward
convt2d_grad_input = _active.convt2d_grad_input
convt2d_grad_weight = _active.convt2d_grad_weight

__all__ = [
    "BACKEND",
    "reference",
    "conv2d_forward",
    "conv2d_grad_input",
    "conv2d_grad_weight",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "convt2d_forward",
    "convt2d_grad_input",
    "convt2d_grad_weight",
]
