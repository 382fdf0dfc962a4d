"""Registered finite-difference checks: every differentiable op, the fusion
blocks, the losses and the whole model at tiny widths, all in float64.

Each case maps a name to a builder ``rng -> (fn, tensors)`` that
:func:`~gaitfuse.diffcore.check_gradients` consumes. Inputs to non-smooth
ops (ReLU, max) are kept away from their kinks so central differences are
meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import fusion, losses
from .diffcore import tensor as tops

CASES = {}


def case(name):
    def register(builder):
        CASES[name] = builder
        return builder

    return register


def _param(rng, *shape, scale=1.0, away_from_zero=False):
    x = rng.standard_normal(shape) * scale
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05 + x, x)
    return dc.Tensor(x, requires_grad=True)


def _weighted(out, rng):
    """Fixed random projection to a scalar so no gradient entry cancels by symmetry."""
    r = rng.standard_normal(out.shape)
    return lambda t: (t * r).sum()


def _unary(op, shape=(3, 4), **kw):
    def build(rng):
        x = _param(rng, *shape, **kw)
        proj = _weighted(op(x), rng)
        return (lambda: proj(op(x))), {"x": x}

    return build


def _binary(op, sa=(3, 4), sb=(3, 4)):
    def build(rng):
        a, b = _param(rng, *sa), _param(rng, *sb)
        proj = _weighted(op(a, b), rng)
        return (lambda: proj(op(a, b))), {"a": a, "b": b}

    return build


# --- elementwise and structural ops -------------------------------------------

case("add")(_binary(lambda a, b: a + b))
case("add_broadcast")(_binary(lambda a, b: a + b, (3, 4), (4,)))
case("sub")(_binary(lambda a, b: a - b, (2, 3), (2, 1)))
case("mul")(_binary(lambda a, b: a * b, (3, 4), (1, 4)))
case("neg")(_unary(lambda x: -x))
case("reciprocal")(_unary(lambda x: tops.reciprocal(x * x + 0.5)))
case("div")(_binary(lambda a, b: a / (b * b + 0.5)))
case("square")(_unary(dc.square))
case("sqrt")(_unary(lambda x: dc.sqrt(x * x + 0.1)))
case("exp")(_unary(dc.exp))
case("sum_axis")(_unary(lambda x: x.sum(axis=1), (3, 4, 2)))
case("mean_axis")(_unary(lambda x: x.mean(axis=(0, 2), keepdims=True), (3, 4, 2)))
case("reshape")(_unary(lambda x: x.reshape(4, 6), (2, 3, 4)))
case("transpose")(_unary(lambda x: x.transpose(2, 0, 1), (2, 3, 4)))
case("getitem_slice")(_unary(lambda x: x[1:, ::2], (3, 5)))
case("getitem_fancy")(_unary(lambda x: x[np.array([0, 2, 2]), np.array([1, 1, 3])], (3, 4)))
case("concat")(_binary(lambda a, b: dc.concat([a, b], axis=1), (2, 3), (2, 2)))
case("split")(_unary(lambda x: dc.split(x, [1, 3], axis=1)[1] * dc.split(x, [1, 3], axis=1)[0], (3, 4)))
case("stack")(_binary(lambda a, b: dc.stack([a, b], axis=1)))
case("matmul")(_binary(dc.matmul, (3, 4), (4, 2)))
case("matmul_batched")(_binary(dc.matmul, (2, 3, 4), (4, 5)))
case("relu")(_unary(dc.relu, away_from_zero=True))
case("sigmoid")(_unary(lambda x: dc.sigmoid(3 * x)))
case("softmax_rows")(_unary(dc.softmax_rows, (3, 5)))
case("log_softmax")(_unary(dc.log_softmax, (3, 5)))
case("reduce_max")(_unary(lambda x: dc.reduce_max(x, 1), (3, 5, 2)))
case("reduce_mean")(_unary(lambda x: dc.reduce_mean(x, (0, 2)), (3, 5, 2)))
case("pool_max")(_unary(lambda x: dc.pool(x, "max", (2, 3), (2, 2)), (2, 3, 5, 4)))
case("pool_mean")(_unary(lambda x: dc.pool(x, "mean", (1, 2), (2, 3)), (2, 4, 6)))


@case("linear")
def _linear(rng):
    x, w, b = _param(rng, 4, 3), _param(rng, 3, 5), _param(rng, 5)
    proj = _weighted(dc.linear(x, w, b), rng)
    return (lambda: proj(dc.linear(x, w, b))), {"x": x, "w": w, "b": b}


@case("layer_norm")
def _layer_norm(rng):
    x, g, s = _param(rng, 3, 6), _param(rng, 6), _param(rng, 6)
    proj = _weighted(dc.layer_norm(x, g, s), rng)
    return (lambda: proj(dc.layer_norm(x, g, s))), {"x": x, "gain": g, "shift": s}


def _conv_case(nd, in_shape, k_shape, stride, pad):
    conv = dc.conv2d if nd == 2 else dc.conv3d

    def build(rng):
        x, k, b = _param(rng, *in_shape), _param(rng, *k_shape, scale=0.5), _param(rng, k_shape[0])
        proj = _weighted(conv(x, k, b, stride=stride, pad=pad), rng)
        return (lambda: proj(conv(x, k, b, stride=stride, pad=pad))), {"x": x, "kernel": k, "bias": b}

    return build


case("conv2d")(_conv_case(2, (2, 3, 6, 5), (4, 3, 3, 3), 1, 1))
case("conv2d_strided")(_conv_case(2, (1, 2, 7, 7), (3, 2, 3, 3), 2, 0))
case("conv3d")(_conv_case(3, (1, 2, 4, 5, 4), (3, 2, 3, 3, 3), 1, 1))
case("conv3d_pointwise")(_conv_case(3, (2, 3, 2, 3, 3), (2, 3, 1, 1, 1), 1, 0))
case("pairwise_euclidean")(_binary(dc.pairwise_euclidean, (4, 3), (5, 3)))


# --- fusion blocks and losses -------------------------------------------------


def _as_trainable(params):
    out = {}
    for k, v in params.items():
        out[k] = dc.Tensor(np.asarray(v.data, dtype=np.float64) + 0.0, requires_grad=True)
    return out


@case("cam")
def _cam(rng):
    params = _as_trainable(fusion.init_cam_params(4, 2, rng, np.float64))
    for k in ("cam.b1", "cam.b2"):
        params[k].data[:] = rng.standard_normal(params[k].shape) * 0.3
    ys, yk = _param(rng, 2, 3, 4), _param(rng, 2, 3, 4)
    tensors = {"y_sil": ys, "y_ske": yk, **params}
    proj = _weighted(fusion.cam_forward(ys, yk, params), rng)
    return (lambda: proj(fusion.cam_forward(ys, yk, params))), tensors


@case("mlm")
def _mlm(rng):
    params = _as_trainable(fusion.init_mlm_params(4, np.float64))
    for v in params.values():
        v.data += rng.standard_normal(v.shape) * 0.3
    y1, y2 = _param(rng, 2, 3, 4), _param(rng, 2, 3, 4)

    def fn():
        a, b = fusion.mlm_forward(y1, y2, params)
        return proj(fusion.fuse_output(a, b))

    proj = _weighted(fusion.fuse_output(*fusion.mlm_forward(y1, y2, params)), rng)
    return fn, {"y1": y1, "y2": y2, **params}


@case("cross_entropy")
def _ce(rng):
    logits = _param(rng, 6, 4)
    labels = rng.integers(0, 4, 6)
    return (lambda: losses.cross_entropy_logits(logits, labels)), {"logits": logits}


@case("part_cross_entropy")
def _part_ce(rng):
    emb, w, b = _param(rng, 4, 3, 5), _param(rng, 3, 5, 4), _param(rng, 3, 4)
    labels = np.array([0, 1, 2, 3])
    return (lambda: losses.part_cross_entropy(losses.part_logits(emb, w, b), labels)), {"embedding": emb, "weight": w,
                                                                                          "bias": b}


@case("triplet")
def _triplet(rng):
    emb = _param(rng, 6, 5, scale=0.3)
    labels = np.array([0, 0, 1, 1, 2, 2])
    return (lambda: losses.triplet_loss(emb, labels, margin=0.5)), {"embedding": emb}


@case("wasserstein")
def _wasserstein(rng):
    y1, y2 = _param(rng, 5, 2, 3), _param(rng, 5, 2, 3)
    return (lambda: losses.modality_wasserstein(y1, y2)), {"y1": y1, "y2": y2}


@case("wasserstein_statistics")
def _wasserstein_stats(rng):
    m1, m2 = _param(rng, 4), _param(rng, 4)
    v1, v2 = dc.Tensor(rng.uniform(0.5, 2.0, 4), requires_grad=True), dc.Tensor(rng.uniform(0.5, 2.0, 4),
                                                                               requires_grad=True)
    fn = lambda: losses.wasserstein_loss(losses.GaussianStats(m1, v1), losses.GaussianStats(m2, v2))
    return fn, {"mean1": m1, "mean2": m2, "var1": v1, "var2": v2}


# --- whole model --------------------------------------------------------------

TINY_MODEL = [
    "model.sil_size=8x6", "model.ske_size=8x6", "model.sil_channels=2,3", "model.ske_channels=2,3",
    "model.parts=2", "model.embed_dim=4", "fusion.reduction=2", "train.dtype=float64",
    "loss.margin=1.0",
]


def tiny_model(seed=0, overrides=()):
    from .config import load_config
    from .model import GaitModel

    cfg = load_config(overrides=list(TINY_MODEL) + list(overrides))
    return GaitModel(cfg, num_classes=3, seed=seed)


@case("full_model")
def _full_model(rng):
    model = tiny_model(int(rng.integers(1 << 30)))
    bb = model.cfg.backbone
    N, T = 6, 3
    sil = rng.random((N, 1, T) + tuple(bb.sil_size))
    hm = rng.random((N, T, bb.ske_in_channels) + tuple(bb.ske_size))
    labels = np.array([0, 0, 1, 1, 2, 2])

    def fn():
        total, _ = model.loss(model.forward(sil, hm), labels)
        return total

    return fn, dict(model.params)


@dataclass
class CaseResult:
    name: str
    probes: list

    @property
    def passed(self) -> bool:
        return dc.all_passed(self.probes)

    @property
    def worst_error(self) -> float:
        """Largest relative error among probes judged by the relative rule."""
        return max((p.rel_error for p in self.probes if not p.absolute_pass), default=0.0)


def run_suite(seed=0, model_probes=200, names=None):
    """Check every registered case; elementwise ops exhaustively, the model on random probes."""
    results = []
    for name in names or CASES:
        rng = np.random.default_rng([seed, sorted(CASES).index(name)])
        fn, tensors = CASES[name](rng)
        n = model_probes if name == "full_model" else None
        results.append(CaseResult(name, dc.check_gradients(fn, tensors, n_probes=n, rng=rng)))
    return results
