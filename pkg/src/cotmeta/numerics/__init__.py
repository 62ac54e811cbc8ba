from .optim import AdamWState, adamw_step, sgd_step, xavier_bound, xavier_uniform
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    cross_entropy,
    div,
    enable_grad,
    exp,
    grad,
    index_select,
    is_grad_enabled,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    scatter_add,
    softmax,
    softmax_rows,
    stack,
    sub,
    sum_,
    sum_to,
    swap_last,
    token_nll,
    transpose,
)

__all__ = [
    "AdamWState",
    "Tensor",
    "adamw_step",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "cross_entropy",
    "div",
    "enable_grad",
    "exp",
    "grad",
    "index_select",
    "is_grad_enabled",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "relu",
    "reshape",
    "scatter_add",
    "sgd_step",
    "softmax",
    "softmax_rows",
    "stack",
    "sub",
    "sum_",
    "sum_to",
    "swap_last",
    "token_nll",
    "transpose",
    "xavier_bound",
    "xavier_uniform",
]
