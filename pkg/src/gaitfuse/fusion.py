"""Co-attention alignment and mutual (cross-attention) learning over part features.

Both blocks work on part matrices of shape ``(P, C)`` or batched ``(N, P, C)``.
"""
from __future__ import annotations

import math

import numpy as np

from .diffcore import Tensor, as_tensor, concat, layer_norm, linear, matmul, relu, sigmoid, softmax_rows, split


def init_cam_params(channels, reduction, rng, dtype=np.float32) -> dict:
    """Bottleneck ``2C -> 2C/r -> 2C`` for the alignment gate."""
    width = 2 * channels
    if width % reduction:
        raise ValueError(f"reduction {reduction} must divide {width}")
    hidden = width // reduction
    b1, b2 = 1.0 / math.sqrt(width), 1.0 / math.sqrt(hidden)
    return {
        "cam.w1": Tensor(rng.uniform(-b1, b1, (width, hidden)).astype(dtype), requires_grad=True),
        "cam.b1": Tensor(np.zeros(hidden, dtype), requires_grad=True),
        "cam.w2": Tensor(rng.uniform(-b2, b2, (hidden, width)).astype(dtype), requires_grad=True),
        "cam.b2": Tensor(np.zeros(width, dtype), requires_grad=True),
    }


def init_mlm_params(channels, dtype=np.float32) -> dict:
    params = {}
    for side in ("mlm.ln1", "mlm.ln2"):
        params[f"{side}.gain"] = Tensor(np.ones(channels, dtype), requires_grad=True)
        params[f"{side}.shift"] = Tensor(np.zeros(channels, dtype), requires_grad=True)
    return params


def cam_gate(y_m, params) -> Tensor:
    """Per-element score in (0, 1) computed row by row from the concatenated features."""
    hidden = relu(linear(y_m, params["cam.w1"], params["cam.b1"]))
    return sigmoid(linear(hidden, params["cam.w2"], params["cam.b2"]))


def cam_forward(y_sil, y_ske, params) -> Tensor:
    """Gate the channel-wise concatenation and add it back: ``score * Y_m + Y_m``."""
    y_sil, y_ske = as_tensor(y_sil), as_tensor(y_ske)
    if y_sil.shape != y_ske.shape:
        raise ValueError(f"modality shapes differ: {y_sil.shape} vs {y_ske.shape}")
    y_m = concat([y_sil, y_ske], axis=-1)
    return cam_gate(y_m, params) * y_m + y_m


def split_modalities(y_align):
    c = y_align.shape[-1] // 2
    return split(y_align, [c, c], axis=-1)


def cross_attention(query, value, scale):
    """``softmax(Q V^T / sqrt(d)) V`` with the attention matrix over parts; also returns the weights."""
    logits = matmul(query, value.swapaxes(-1, -2)) / math.sqrt(scale)
    attn = softmax_rows(logits)
    return matmul(attn, value), attn


def mlm_forward(y1, y2, params, scale=None, return_attention=False):
    """Symmetric cross-attention with residual and layer norm on each side.

    ``scale`` defaults to the channel count. Returns ``(y1', y2')`` and, if
    requested, the two ``P x P`` attention matrices.
    """
    y1, y2 = as_tensor(y1), as_tensor(y2)
    if y1.shape != y2.shape:
        raise ValueError(f"modality shapes differ: {y1.shape} vs {y2.shape}")
    d = y1.shape[-1] if scale is None else scale
    if not d > 0:
        raise ValueError(f"scale must be positive, got {d}")
    att1, a1 = cross_attention(y1, y2, d)
    att2, a2 = cross_attention(y2, y1, d)
    y1p = layer_norm(att1 + y1, params["mlm.ln1.gain"], params["mlm.ln1.shift"])
    y2p = layer_norm(att2 + y2, params["mlm.ln2.gain"], params["mlm.ln2.shift"])
    if return_attention:
        return y1p, y2p, (a1, a2)
    return y1p, y2p


def fuse_output(y1p, y2p) -> Tensor:
    """Per-part channel concatenation ``(.., P, C) + (.., P, C) -> (.., P, 2C)``."""
    y1p, y2p = as_tensor(y1p), as_tensor(y2p)
    if y1p.shape != y2p.shape:
        raise ValueError(f"shapes differ: {y1p.shape} vs {y2p.shape}")
    return concat([y1p, y2p], axis=-1)
