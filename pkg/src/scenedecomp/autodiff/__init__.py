"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .checkpoint import CheckpointError, load_checkpoint, read_entries, save_checkpoint, write_entries
from .gradcheck import grad_check, numerical_grad, rel_error
from .nn import (
    avg_pool_global,
    broadcast_conv2d,
    conv2d,
    conv_weight,
    coordinate_grid,
    dense_weight,
    linear,
    lstm_cell,
    spatial_broadcast,
)
from .optim import ParamStore, adam_step, clip_global_norm, global_norm
from .tensor import (
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    debug_mode,
    div,
    elu,
    exp,
    gaussian_logpdf,
    getitem,
    layernorm,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    neg,
    reparam_sample,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    square,
    stack,
    stop_gradient,
    sub,
    tanh,
    transpose,
    tmean,
    tsum,
    untracked,
)

__all__ = [name for name in dir() if not name.startswith("_")]
