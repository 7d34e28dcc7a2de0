"""Minimal float32 tensor core with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .ops import tensor_op
from .optim import Adam, OptimizerState, adam_step, clip_grad_norm
from .tensor import DTYPE, Node, Tape, Tensor, active_tape, backward

__all__ = [
    "DTYPE", "Tensor", "Tape", "Node", "active_tape", "backward", "ops", "tensor_op",
    "OptimizerState", "Adam", "adam_step", "clip_grad_norm", "grad_check", "GradCheckReport",
]
