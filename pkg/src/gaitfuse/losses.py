"""Training objectives: per-part cross-entropy, batch-all triplet, Gaussian
2-Wasserstein between modality features, and their weighted sum."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, log_softmax, matmul, pairwise_euclidean, relu, sqrt, square

DEFAULT_MARGIN = 0.2


@dataclass(frozen=True)
class LossWeights:
    triplet: float = 1.0
    cross_entropy: float = 0.1
    wasserstein: float = 0.1

    def __post_init__(self):
        if min(self.triplet, self.cross_entropy, self.wasserstein) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class GaussianStats:
    mean: Tensor
    var: Tensor


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax of ``(N, n)`` logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {logits.shape[0]} rows")
    if np.any((labels < 0) | (labels >= n)):
        raise ValueError(f"labels must lie in [0, {n})")
    logp = log_softmax(logits)
    return -logp[np.arange(len(labels)), labels].mean()


def cross_entropy(features, labels, weight, bias) -> Tensor:
    """Linear classifier then cross-entropy: ``features @ weight + bias``."""
    features = as_tensor(features)
    return cross_entropy_logits(matmul(features, weight) + bias, labels)


def part_logits(embedding, weight, bias) -> Tensor:
    """One classifier per part: ``(N, P, D)`` x ``(P, D, n)`` + ``(P, n)`` -> ``(N, P, n)``."""
    emb = as_tensor(embedding)
    logits = matmul(emb.transpose(1, 0, 2), weight) + as_tensor(bias).reshape(bias.shape[0], 1, bias.shape[1])
    return logits.transpose(1, 0, 2)


def part_cross_entropy(logits, labels) -> Tensor:
    """Average of the per-part cross-entropies of ``(N, P, n)`` logits."""
    logits = as_tensor(logits)
    N, P, n = logits.shape
    flat = logits.transpose(1, 0, 2).reshape(P * N, n)
    return cross_entropy_logits(flat, np.tile(np.asarray(labels), P))


def valid_triplets(labels):
    """Index arrays ``(anchor, positive, negative)`` for every valid triplet in the batch."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    a, p, n = np.nonzero(pos[:, :, None] & ~same[:, None, :])
    return a, p, n


def triplet_loss(embeddings, labels, margin=DEFAULT_MARGIN, return_stats=False):
    """Batch-all hinge ``max(d(a,p) - d(a,n) + m, 0)`` averaged over the non-zero terms.

    A batch without any valid triplet gives 0 and a :class:`RuntimeWarning`.
    """
    emb = as_tensor(embeddings)
    if emb.ndim != 2:
        emb = emb.reshape(emb.shape[0], -1)
    a, p, n = valid_triplets(labels)
    stats = {"triplets": len(a), "active": 0, "degenerate": len(a) == 0}
    if len(a) == 0:
        warnings.warn("no valid triplet in batch; triplet loss set to 0", RuntimeWarning, stacklevel=2)
        loss = (emb * 0.0).sum()
        return (loss, stats) if return_stats else loss
    dist = pairwise_euclidean(emb, emb)
    hinge = relu(dist[a, p] - dist[a, n] + margin)
    active = int(np.count_nonzero(hinge.data > 0))
    stats["active"] = active
    loss = hinge.sum() / max(active, 1)
    return (loss, stats) if return_stats else loss


def estimate_gaussian(features) -> GaussianStats:
    """Batch mean and diagonal population variance of ``(N, C)`` features."""
    x = as_tensor(features)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise ValueError("need at least two samples to estimate a Gaussian")
    mu = x.mean(axis=0)
    centred = x - mu
    return GaussianStats(mu, square(centred).mean(axis=0))


def wasserstein_loss(s1: GaussianStats, s2: GaussianStats) -> Tensor:
    """Squared 2-Wasserstein distance between diagonal Gaussians."""
    if s1.mean.shape != s2.mean.shape or s1.var.shape != s2.var.shape:
        raise ValueError("Gaussian statistics have different dimensions")
    if np.any(s1.var.data < 0) or np.any(s2.var.data < 0):
        raise ValueError("negative variance")
    return square(s1.mean - s2.mean).sum() + square(sqrt(s1.var) - sqrt(s2.var)).sum()


def modality_wasserstein(y1, y2, labels=None, per_identity=False) -> Tensor:
    """Wasserstein loss between two modality feature sets, parts flattened.

    With ``per_identity`` the statistics are estimated per label and the
    losses averaged; otherwise one estimate over the whole batch.
    """
    y1, y2 = as_tensor(y1), as_tensor(y2)
    if not per_identity:
        return wasserstein_loss(estimate_gaussian(y1), estimate_gaussian(y2))
    labels = np.asarray(labels)
    terms = []
    for lab in np.unique(labels):
        idx = np.nonzero(labels == lab)[0]
        if len(idx) >= 2:
            terms.append(wasserstein_loss(estimate_gaussian(y1[idx]), estimate_gaussian(y2[idx])))
    if not terms:
        raise ValueError("per-identity statistics need two samples of some identity")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def joint_loss(l_tri, l_ce, l_w, weights: LossWeights = LossWeights()):
    return weights.triplet * l_tri + weights.cross_entropy * l_ce + weights.wasserstein * l_w
