"""Minimal float64 tensor kernel with reverse-mode differentiation and ADAM."""

from .checkpoint import digest as checkpoint_digest
from .checkpoint import dumps as checkpoint_dumps
from .checkpoint import load as load_checkpoint
from .checkpoint import loads as checkpoint_loads
from .checkpoint import save as save_checkpoint
from .gradcheck import finite_difference_check
from .optim import AdamState, adam_step, clip_grad_norm, step_decay_schedule
from .tensor import (
    OP_KINDS,
    DiffTensor,
    Tape,
    add,
    as_tensor,
    backward,
    batch_norm,
    batched_contract,
    conv_time,
    is_grad_enabled,
    l2_norm,
    matmul,
    mean,
    mul,
    no_grad,
    prelu,
    record,
    relu6,
    reshape,
    scale,
    sub,
    sum_,
    tensor_op,
    transpose,
    zero_grad,
)

__all__ = [
    "OP_KINDS",
    "AdamState",
    "DiffTensor",
    "Tape",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "batched_contract",
    "checkpoint_digest",
    "checkpoint_dumps",
    "checkpoint_loads",
    "clip_grad_norm",
    "conv_time",
    "finite_difference_check",
    "is_grad_enabled",
    "l2_norm",
    "load_checkpoint",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "prelu",
    "record",
    "relu6",
    "reshape",
    "save_checkpoint",
    "scale",
    "step_decay_schedule",
    "sub",
    "sum_",
    "tensor_op",
    "transpose",
    "zero_grad",
]
