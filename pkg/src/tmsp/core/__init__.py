"""Minimal dense tensor engine with reverse-mode autodiff."""

from tmsp.core.gradcheck import check_gradients, corrupt_op, finite_diff_grad, relative_error
from tmsp.core.ops import (
    adaptive_avg_pool1d,
    adaptive_max_pool1d,
    bce_loss,
    conv1d,
    dropout,
    key_padding_mask,
    layer_norm,
    linear,
    linear_resample,
    pool_segments,
    scaled_dot_attention,
    softmax,
)
from tmsp.core.optim import OptimizerState, adam_step, clip_grad_norm
from tmsp.core.tensor import (
    Graph,
    Tensor,
    add,
    as_tensor,
    backward,
    build_graph,
    checked,
    concat,
    exp,
    gelu,
    get_default_dtype,
    log,
    matmul,
    mean,
    mul,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    swapaxes,
    tanh,
    transpose,
    tsum,
)
