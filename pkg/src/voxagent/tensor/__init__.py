from . import ops
from .engine import (
    DTensor,
    ShapeError,
    TapeError,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
    parameter,
    set_default_dtype,
)
from .gradcheck import finite_diff_check, run_suite
from .ops import cross_entropy, forward_op, soft_dice_loss
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "DTensor",
    "ShapeError",
    "TapeError",
    "adam_step",
    "as_tensor",
    "backward",
    "cross_entropy",
    "default_dtype",
    "finite_diff_check",
    "forward_op",
    "get_default_dtype",
    "no_grad",
    "ops",
    "parameter",
    "run_suite",
    "set_default_dtype",
    "soft_dice_loss",
]
