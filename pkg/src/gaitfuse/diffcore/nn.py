"""Layer-level differentiable ops: dense, convolution, activations, pooling."""
from __future__ import annotations

import itertools

import numpy as np

from .tensor import Tensor, as_tensor, make, reshape, unbroadcast


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least two dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dim mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear dim mismatch: input {x.shape}, weight {weight.shape}")
    if x.ndim == 1:
        out = matmul(reshape(x, (1, -1)), weight)
        out = reshape(out, (weight.shape[1],))
    else:
        out = matmul(x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
        out = out + bias
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))  # NaN propagates


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return make(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gain, shift, eps=1e-5) -> Tensor:
    """Standardize over the last axis (population variance + eps), then scale and shift."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    M = x.shape[-1]
    if gain.shape != (M,) or shift.shape != (M,):
        raise ValueError(f"layer_norm affine params must have shape ({M},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(xhat * gd + shift.data, (x, gain, shift), backward)


def pool(x, kind, axes, window=None) -> Tensor:
    """Non-overlapping max or mean pooling over ``axes``.

    ``window`` gives one size per axis (``None`` pools the whole axis). Trailing
    elements that do not fill a window are dropped. Pooled axes are kept.
    """
    x = as_tensor(x)
    if kind not in ("max", "mean"):
        raise ValueError(f"unknown pool kind {kind!r}")
    axes = [a % x.ndim for a in ((axes,) if isinstance(axes, int) else axes)]
    if window is None:
        window = [None] * len(axes)
    elif isinstance(window, int):
        window = [window] * len(axes)
    win = {ax: (x.shape[ax] if w is None else int(w)) for ax, w in zip(axes, window)}
    crop = []
    new_shape, win_axes = [], []
    for ax, n in enumerate(x.shape):
        if ax in win:
            w = win[ax]
            if w < 1 or n // w == 0:
                raise ValueError(f"empty pooling window on axis {ax} (extent {n}, window {w})")
            crop.append(slice(0, (n // w) * w))
            new_shape += [n // w, w]
            win_axes.append(len(new_shape) - 1)
        else:
            crop.append(slice(None))
            new_shape.append(n)
    crop = tuple(crop)
    r = x.data[crop].reshape(new_shape)
    keep = [a for a in range(r.ndim) if a not in win_axes]
    perm = keep + win_axes
    rt = r.transpose(perm)
    lead = rt.shape[: len(keep)]
    flat = rt.reshape(lead + (-1,))
    out_shape = tuple(r.shape[a] for a in keep)
    inv = np.argsort(perm)

    def scatter(gflat):
        g = gflat.reshape(rt.shape).transpose(inv).reshape(x.data[crop].shape)
        if g.shape == x.shape:
            return g
        full = np.zeros(x.shape, dtype=x.dtype)
        full[crop] = g
        return full

    if kind == "max":
        arg = flat.argmax(axis=-1)[..., None]
        out = np.take_along_axis(flat, arg, axis=-1)[..., 0]

        def backward(g):
            gflat = np.zeros(flat.shape, dtype=x.dtype)
            np.put_along_axis(gflat, arg, g.reshape(lead)[..., None], axis=-1)
            return (scatter(gflat),)
    else:
        size = flat.shape[-1]
        out = flat.mean(axis=-1)

        def backward(g):
            gflat = np.broadcast_to((g.reshape(lead) / size)[..., None], flat.shape)
            return (scatter(np.ascontiguousarray(gflat)),)

    return make(out.reshape(out_shape), (x,), backward)


def reduce_max(x, axis) -> Tensor:
    x = as_tensor(x)
    axes = [a % x.ndim for a in ((axis,) if isinstance(axis, int) else axis)]
    out = pool(x, "max", axes)
    return reshape(out, tuple(n for a, n in enumerate(out.shape) if a not in axes))


def reduce_mean(x, axis) -> Tensor:
    x = as_tensor(x)
    axes = [a % x.ndim for a in ((axis,) if isinstance(axis, int) else axis)]
    out = pool(x, "mean", axes)
    return reshape(out, tuple(n for a, n in enumerate(out.shape) if a not in axes))


def _per_dim(v, nd, what):
    v = (v,) * nd if isinstance(v, int) else tuple(v)
    if len(v) != nd:
        raise ValueError(f"{what} needs {nd} values, got {v}")
    return v


def _conv(x, kernels, bias, stride, pad, nd) -> Tensor:
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != nd + 2:
        raise ValueError(f"kernels must have {nd + 2} dims, got {kernels.shape}")
    unbatched = x.ndim == nd + 1
    if x.ndim not in (nd + 1, nd + 2):
        raise ValueError(f"input must have {nd + 1} or {nd + 2} dims, got {x.shape}")
    xd = x.data[None] if unbatched else x.data
    N, Cin = xd.shape[:2]
    S = xd.shape[2:]
    Cout, Ckin = kernels.shape[:2]
    ks = kernels.shape[2:]
    if Ckin != Cin:
        raise ValueError(f"input has {Cin} channels, kernels expect {Ckin}")
    if any(k % 2 == 0 for k in ks):
        raise ValueError(f"kernel sizes must be odd, got {ks}")
    strides = _per_dim(stride, nd, "stride")
    pads = _per_dim(pad, nd, "pad")
    O = []
    for n, k, s, p in zip(S, ks, strides, pads):
        span = n + 2 * p - k
        if span < 0 or span % s:
            raise ValueError(f"non-integral output extent: ({n} + 2*{p} - {k}) / {s}")
        O.append(span // s + 1)
    O = tuple(O)
    # channel-major layout (Cin, N, *S) so every kernel tap is one GEMM
    xt = np.zeros((Cin, N) + tuple(n + 2 * p for n, p in zip(S, pads)), dtype=xd.dtype)
    inner = (slice(None), slice(None)) + tuple(slice(p, p + n) for n, p in zip(S, pads))
    xt[inner] = xd.swapaxes(0, 1)
    kd = kernels.data
    taps = list(itertools.product(*[range(k) for k in ks]))

    def tap_slice(off):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(off, strides, O))

    cols = N * int(np.prod(O))
    kflat = kd.reshape(Cout, Cin, len(taps))
    groups = _tap_groups(len(taps), Cin * cols)

    def gather(grp):
        buf = np.empty((len(grp), Cin, N) + O, dtype=xt.dtype)
        for i, t in enumerate(grp):
            buf[i] = xt[tap_slice(taps[t])]
        return buf.reshape(len(grp) * Cin, cols)

    def group_kernel(grp):
        return kflat[:, :, grp].transpose(0, 2, 1).reshape(Cout, len(grp) * Cin)

    out = np.zeros((Cout, cols), dtype=np.result_type(xd.dtype, kd.dtype))
    kept = None
    for grp in groups:
        buf = gather(grp)
        out += group_kernel(grp) @ buf
        if len(groups) == 1 and _grad_needed(x, kernels, bias):
            kept = buf
    out = out.reshape((Cout, N) + O).swapaxes(0, 1)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Cout,):
            raise ValueError(f"bias shape {bias.shape} does not match {Cout} kernels")
        out = out + bias.data.reshape((1, Cout) + (1,) * nd)
        parents.append(bias)
    else:
        out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def backward(g):
        gb = g[None] if unbatched else g
        gt = np.ascontiguousarray(gb.swapaxes(0, 1)).reshape(Cout, cols)
        gk = np.zeros_like(kflat)
        gx = np.zeros_like(xt) if x.requires_grad else None
        for grp in groups:
            buf = kept if kept is not None else gather(grp)
            gk[:, :, grp] = (gt @ buf.T).reshape(Cout, len(grp), Cin).transpose(0, 2, 1)
            if gx is not None:
                gbuf = (group_kernel(grp).T @ gt).reshape((len(grp), Cin, N) + O)
                for i, t in enumerate(grp):
                    gx[tap_slice(taps[t])] += gbuf[i]
        grads = [None, gk.reshape(kd.shape)]
        if gx is not None:
            gxd = gx[inner].swapaxes(0, 1)
            grads[0] = gxd[0] if unbatched else np.ascontiguousarray(gxd)
        if bias is not None:
            grads.append(gb.sum(axis=(0,) + tuple(range(2, nd + 2))))
        return tuple(grads)

    return make(out, parents, backward)


# im2col buffers are capped at this many elements; larger problems run in tap groups
_GATHER_LIMIT = 1 << 23


def _grad_needed(*ts):
    from . import tensor

    return tensor._grad_enabled and any(isinstance(t, Tensor) and t.requires_grad for t in ts)


def _tap_groups(n_taps, per_tap):
    size = max(1, min(n_taps, _GATHER_LIMIT // max(per_tap, 1)))
    return [list(range(i, min(i + size, n_taps))) for i in range(0, n_taps, size)]


def conv2d(x, kernels, bias=None, stride=1, pad=0) -> Tensor:
    """Cross-correlation with zero padding. ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``."""
    return _conv(x, kernels, bias, stride, pad, 2)


def conv3d(x, kernels, bias=None, stride=1, pad=0) -> Tensor:
    """Cross-correlation with zero padding. ``x`` is ``(C, T, H, W)`` or ``(N, C, T, H, W)``."""
    return _conv(x, kernels, bias, stride, pad, 3)


def pairwise_euclidean(a, b) -> Tensor:
    """``(N, D) x (M, D) -> (N, M)`` Euclidean distances; zero distance has zero gradient."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise distance needs (N, D) and (M, D), got {a.shape}, {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))

    def backward(g):
        coef = np.where(d > 0, g / np.where(d > 0, d, 1.0), 0.0)[..., None] * diff
        return coef.sum(axis=1), -coef.sum(axis=0)

    return make(d, (a, b), backward)
