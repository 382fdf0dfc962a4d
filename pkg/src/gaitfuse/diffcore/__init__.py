"""Deterministic differentiable primitives used by the encoders, fusion and losses."""
from .gradcheck import Probe, all_passed, check_gradients
from .nn import (conv2d, conv3d, layer_norm, linear, log_softmax, matmul, pairwise_euclidean, pool,
                 reduce_max, reduce_mean, relu, sigmoid, softmax_rows)
from .tensor import (Tensor, as_tensor, check_finite, concat, exp, no_grad, reshape, split, sqrt,
                     square, stack, transpose)

__all__ = [
    "Tensor", "as_tensor", "check_finite", "concat", "conv2d", "conv3d", "exp", "layer_norm", "linear",
    "log_softmax", "matmul", "no_grad", "pairwise_euclidean", "pool", "reduce_max", "reduce_mean",
    "relu", "reshape", "sigmoid", "softmax_rows", "split", "sqrt", "square", "stack", "transpose",
    "Probe", "all_passed", "check_gradients",
]
