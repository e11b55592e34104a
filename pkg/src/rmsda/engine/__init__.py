"""Minimal tensor engine: 4-D tensors, a gradient tape, and the primitives."""
from .gradcheck import GradcheckReport, gradcheck
from .tensor import GradTape, Tensor, active_tape

__all__ = ["GradTape", "GradcheckReport", "Tensor", "active_tape", "gradcheck"]
