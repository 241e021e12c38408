"""Dense tensors with reverse-mode gradients, seeded RNG and core kernels."""

from .gradcheck import grad_check
from .params import ParamStore, ParamView
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    div,
    exp,
    gelu,
    get_dtype,
    getitem,
    layer_norm,
    linear_forward,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    reshape,
    softmax,
    softplus,
    stable_softmax,
    sub,
    top_k_indices,
    top_k_mask,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
