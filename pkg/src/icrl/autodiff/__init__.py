"""Small dense-tensor core with reverse-mode automatic differentiation."""
from .checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import AdamState, adam_step, clip_grad_norm, global_norm
from .tensor import (
    Tensor,
    add,
    attention_mask,
    causal_attention,
    concat,
    cross_entropy,
    default_dtype,
    dropout,
    embedding,
    gelu,
    getitem,
    layer_norm,
    leaky_relu,
    linear,
    log_softmax,
    log_sum_exp,
    masked_mean,
    matmul,
    mse,
    mul,
    no_grad,
    precision,
    reshape,
    scale,
    softmax,
    square,
    sub,
    take_along,
    transpose,
)
