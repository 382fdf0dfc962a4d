"""The two-modality recognition network and its training objective.

Variants (all driven by :class:`~gaitfuse.config.FusionConfig`):

* skeleton branch off: the embedding is the silhouette part matrix alone;
* alignment and cross-attention both off: silhouette and skeleton part
  matrices are added elementwise;
* alignment on, cross-attention off: the aligned halves are added;
* cross-attention on: the two attended halves are concatenated per part.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import encoders, fusion, losses
from .config import RunConfig
from .diffcore import Tensor


@dataclass
class ModelOutput:
    embedding: Tensor  # (N, P, D)
    logits: Tensor  # (N, P, n_classes)
    modality_a: Tensor | None  # features entering the Wasserstein term
    modality_b: Tensor | None


class GaitModel:
    def __init__(self, cfg: RunConfig, num_classes: int, seed=0, dtype=None):
        self.cfg = cfg
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype or cfg.train.dtype)
        rng = np.random.default_rng(seed)
        bb, fu = cfg.backbone, cfg.fusion
        self.params = encoders.init_encoder_params(bb, rng, self.dtype, skeleton=fu.skeleton_branch)
        if fu.skeleton_branch and fu.cam:
            self.params.update(fusion.init_cam_params(bb.embed_dim, fu.reduction, rng, self.dtype))
        if fu.skeleton_branch and fu.mlm:
            self.params.update(fusion.init_mlm_params(bb.embed_dim, self.dtype))
        d = self.embed_width
        bound = 1.0 / math.sqrt(d)
        self.params["head.weight"] = Tensor(
            rng.uniform(-bound, bound, (bb.parts, d, self.num_classes)).astype(self.dtype), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros((bb.parts, self.num_classes), self.dtype), requires_grad=True)
        for name, t in self.params.items():
            t.name = name

    @property
    def embed_width(self) -> int:
        fu = self.cfg.fusion
        c = self.cfg.backbone.embed_dim
        return 2 * c if (fu.skeleton_branch and fu.mlm) else c

    @property
    def uses_wasserstein(self) -> bool:
        return self.cfg.fusion.skeleton_branch and self.cfg.loss.wasserstein

    def named_parameters(self):
        return sorted(self.params.items())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def forward(self, silhouettes, heatmaps=None) -> ModelOutput:
        cfg, p = self.cfg, self.params
        y_sil = encoders.branch_features(silhouettes, p, cfg.backbone, "silhouette")
        ya = yb = None
        if not cfg.fusion.skeleton_branch:
            emb = y_sil
        else:
            if heatmaps is None:
                raise ValueError("skeleton branch enabled but no heatmaps given")
            y_ske = encoders.branch_features(heatmaps, p, cfg.backbone, "skeleton")
            if cfg.fusion.cam:
                y1, y2 = fusion.split_modalities(fusion.cam_forward(y_sil, y_ske, p))
            else:
                y1, y2 = y_sil, y_ske
            if cfg.fusion.mlm:
                scale = cfg.fusion.scale or None
                ya, yb = fusion.mlm_forward(y1, y2, p, scale=scale)
                emb = fusion.fuse_output(ya, yb)
            else:
                ya, yb = y1, y2
                emb = y1 + y2
        logits = losses.part_logits(emb, p["head.weight"], p["head.bias"])
        return ModelOutput(emb, logits, ya, yb)

    def loss(self, out: ModelOutput, labels):
        """Joint objective; returns ``(total, components)`` with float components."""
        lc = self.cfg.loss
        l_tri = losses.triplet_loss(out.embedding, labels, lc.margin)
        l_ce = losses.part_cross_entropy(out.logits, labels)
        if self.uses_wasserstein:
            l_w = losses.modality_wasserstein(out.modality_a, out.modality_b, labels,
                                              per_identity=lc.wasserstein_stats == "identity")
            weights = lc.weights
        else:
            l_w = 0.0
            weights = losses.LossWeights(lc.weights.triplet, lc.weights.cross_entropy, 0.0)
        total = losses.joint_loss(l_tri, l_ce, l_w, weights)
        parts = {"triplet": float(l_tri.data), "cross_entropy": float(l_ce.data),
                 "wasserstein": float(l_w.data) if isinstance(l_w, Tensor) else 0.0,
                 "total": float(total.data)}
        return total, parts

    def embed(self, silhouettes, heatmaps=None) -> np.ndarray:
        """Flattened retrieval embeddings ``(N, P * D)`` without recording a tape."""
        from .diffcore import no_grad

        with no_grad():
            emb = self.forward(silhouettes, heatmaps).embedding.data
        return emb.reshape(emb.shape[0], -1)
