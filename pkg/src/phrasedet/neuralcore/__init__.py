"""Dense float64 tensors with tape-based reverse-mode differentiation."""
from .tensor import Tape, Tensor, as_tensor, backward, no_tape
from .params import GROUPS, Parameter, ParameterStore, glorot_uniform
from .optim import adam_step, sgd_momentum_step, weight_decay_penalty
from . import ops
from .ops import ShapeError

__all__ = [
    "Tape", "Tensor", "as_tensor", "backward", "no_tape", "GROUPS", "Parameter",
    "ParameterStore", "glorot_uniform", "adam_step", "sgd_momentum_step",
    "weight_decay_penalty", "ops", "ShapeError",
]
