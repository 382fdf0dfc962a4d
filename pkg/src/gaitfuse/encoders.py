"""Asymmetric two-branch backbone: 3D convolutions for silhouettes, per-frame 2D
convolutions for skeleton heatmaps, then horizontal strip pooling and a max
over time.

Parameters live in a flat ``name -> Tensor`` dict so the trainer and the
checkpoint writer can treat every model the same way.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, concat, conv2d, conv3d, matmul, pool, reduce_max, reduce_mean, relu
from .errors import ConfigError


@dataclass(frozen=True)
class BackboneConfig:
    sil_channels: tuple = (16, 32, 64)
    ske_channels: tuple = (16, 32, 64)
    parts: int = 8
    embed_dim: int = 64
    sil_size: tuple = (64, 44)
    ske_size: tuple = (64, 44)
    ske_in_channels: int = 29

    def __post_init__(self):
        for name in ("sil_channels", "ske_channels"):
            widths = getattr(self, name)
            if not widths or any(int(w) <= 0 for w in widths):
                raise ConfigError(f"{name} must be positive widths, got {widths}")
        if self.embed_dim <= 0 or self.parts <= 0 or self.ske_in_channels <= 0:
            raise ConfigError("embed_dim, parts and ske_in_channels must be positive")
        for name in ("sil_size", "ske_size"):
            h, w = self.feature_size(getattr(self, name), len(getattr(self, name.replace("size", "channels"))))
            if h < 1 or w < 1:
                raise ConfigError(f"{name} {getattr(self, name)} is too small for the backbone depth")
            if h % self.parts:
                raise ConfigError(f"parts={self.parts} must divide the post-backbone height {h} ({name})")

    @staticmethod
    def feature_size(size, stages):
        h, w = size
        for _ in range(stages):
            h, w = h // 2, w // 2
        return h, w


def _uniform(rng, shape, fan_in, gain, dtype):
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_branch(prefix, in_ch, widths, kernel_dims, rng, dtype) -> dict:
    """Conv stage params: two 3-wide convs per stage plus a 1x1 projection skip if widths change."""
    params = {}
    relu_gain = np.sqrt(2.0)
    for s, out_ch in enumerate(widths):
        k = (3,) * kernel_dims
        fan1, fan2 = in_ch * 3**kernel_dims, out_ch * 3**kernel_dims
        p = f"{prefix}.stage{s}"
        params[f"{p}.conv1.weight"] = _uniform(rng, (out_ch, in_ch) + k, fan1, relu_gain, dtype)
        params[f"{p}.conv1.bias"] = _zeros((out_ch,), dtype)
        params[f"{p}.conv2.weight"] = _uniform(rng, (out_ch, out_ch) + k, fan2, relu_gain, dtype)
        params[f"{p}.conv2.bias"] = _zeros((out_ch,), dtype)
        if in_ch != out_ch:
            params[f"{p}.skip.weight"] = _uniform(rng, (out_ch, in_ch) + (1,) * kernel_dims, in_ch, 1.0, dtype)
        in_ch = out_ch
    return params


def init_encoder_params(cfg: BackboneConfig, rng, dtype=np.float32, skeleton=True) -> dict:
    params = init_branch("sil", 1, cfg.sil_channels, 3, rng, dtype)
    c_sil = cfg.sil_channels[-1]
    params["sil.proj"] = _uniform(rng, (cfg.parts, c_sil, cfg.embed_dim), c_sil, 1.0, dtype)
    if skeleton:
        params.update(init_branch("ske", cfg.ske_in_channels, cfg.ske_channels, 2, rng, dtype))
        c_ske = cfg.ske_channels[-1]
        params["ske.proj"] = _uniform(rng, (cfg.parts, c_ske, cfg.embed_dim), c_ske, 1.0, dtype)
    return params


def _run_stages(x, params, prefix, n_stages, conv, spatial_axes):
    for s in range(n_stages):
        p = f"{prefix}.stage{s}"
        h = relu(conv(x, params[f"{p}.conv1.weight"], params[f"{p}.conv1.bias"], pad=1))
        h = conv(h, params[f"{p}.conv2.weight"], params[f"{p}.conv2.bias"], pad=1)
        skip = params.get(f"{p}.skip.weight")
        h = h + (x if skip is None else conv(x, skip))
        x = pool(relu(h), "max", spatial_axes, (2, 2))
    return x


def encode_silhouette(seq, params, cfg: BackboneConfig) -> Tensor:
    """``(N, 1, T, H, W)`` silhouettes -> ``(N, C, T, H', W')`` features; time stride 1."""
    seq = as_tensor(seq)
    if seq.ndim != 5 or seq.shape[1] != 1:
        raise ValueError(f"silhouette batch must be (N, 1, T, H, W), got {seq.shape}")
    if tuple(seq.shape[3:]) != tuple(cfg.sil_size):
        raise ValueError(f"silhouette resolution {seq.shape[3:]} does not match config {cfg.sil_size}")
    return _run_stages(seq, params, "sil", len(cfg.sil_channels), conv3d, (3, 4))


def encode_skeleton(vol, params, cfg: BackboneConfig) -> Tensor:
    """``(N, T, K, H, W)`` heatmaps -> ``(N, C, T, H', W')``, same 2D weights on every frame."""
    vol = as_tensor(vol)
    if vol.ndim != 5:
        raise ValueError(f"heatmap batch must be (N, T, K, H, W), got {vol.shape}")
    if tuple(vol.shape[3:]) != tuple(cfg.ske_size):
        raise ValueError(f"heatmap resolution {vol.shape[3:]} does not match config {cfg.ske_size}")
    N, T = vol.shape[:2]
    frames = vol.reshape((N * T,) + vol.shape[2:])
    out = _run_stages(frames, params, "ske", len(cfg.ske_channels), conv2d, (2, 3))
    return out.reshape((N, T) + out.shape[1:]).transpose(0, 2, 1, 3, 4)


def strip_bounds(height, parts):
    """Contiguous row ranges covering ``[0, height)``; sizes differ by at most one."""
    if parts > height:
        raise ValueError(f"cannot split height {height} into {parts} strips")
    edges = [round(i * height / parts) for i in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))


def horizontal_mapping(fmap, parts) -> Tensor:
    """``(N, C, T, H', W')`` -> ``(N, T, P, C)``: per strip, spatial max plus spatial mean."""
    fmap = as_tensor(fmap)
    H = fmap.shape[3]
    if parts > H:
        raise ValueError(f"parts={parts} exceeds feature height {H}")
    if H % parts == 0:
        N, C, T, _, W = fmap.shape
        strips = fmap.reshape(N, C, T, parts, H // parts, W)
        feat = reduce_max(strips, (4, 5)) + reduce_mean(strips, (4, 5))
    else:
        pieces = []
        for lo, hi in strip_bounds(H, parts):
            strip = fmap[:, :, :, lo:hi, :]
            pieces.append(reduce_max(strip, (3, 4)) + reduce_mean(strip, (3, 4)))
        feat = concat([p.reshape(p.shape + (1,)) for p in pieces], axis=3)
    return feat.transpose(0, 2, 3, 1)


def temporal_aggregate(x) -> Tensor:
    """Elementwise max over the time axis of ``(N, T, P, C)`` (or ``(T, P, C)``)."""
    x = as_tensor(x)
    return reduce_max(x, 1 if x.ndim == 4 else 0)


def part_projection(x, weight) -> Tensor:
    """Separate ``C_in x C`` map per part: ``(N, P, C_in)`` x ``(P, C_in, C)`` -> ``(N, P, C)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-2] != weight.shape[0] or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"part projection mismatch: input {x.shape}, weight {weight.shape}")
    if x.ndim == 2:
        return matmul(x.reshape(x.shape[0], 1, x.shape[1]), weight).reshape(x.shape[0], weight.shape[2])
    return matmul(x.transpose(1, 0, 2), weight).transpose(1, 0, 2)


def branch_features(seq, params, cfg: BackboneConfig, modality) -> Tensor:
    """Full branch: backbone, horizontal mapping, temporal max, part projection -> ``(N, P, C)``."""
    if modality == "silhouette":
        fmap = encode_silhouette(seq, params, cfg)
        proj = params["sil.proj"]
    elif modality == "skeleton":
        fmap = encode_skeleton(seq, params, cfg)
        proj = params["ske.proj"]
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return part_projection(temporal_aggregate(horizontal_mapping(fmap, cfg.parts)), proj)
