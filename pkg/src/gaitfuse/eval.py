"""Retrieval metrics over probe/gallery embeddings: rank-k, mAP and mINP.

Rankings sort gallery entries by ascending distance with ties broken by
gallery index. A gallery entry sharing the probe's sample id is dropped from
that probe's ranking. Probes without any gallery match are excluded from mAP
and mINP (and counted); for rank-k they count as misses.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MINP_DEFINITION = "matches / rank of the hardest (last-ranked) match"


@dataclass
class EmbeddingRecord:
    id: str
    label: int
    embedding: np.ndarray


def pairwise_distances(probes, gallery) -> np.ndarray:
    """Euclidean distances ``(N, D) x (M, D) -> (N, M)``."""
    p = np.asarray(probes, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if p.ndim != 2 or g.ndim != 2 or p.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: {p.shape} vs {g.shape}")
    out = np.empty((len(p), len(g)))
    step = max(1, (1 << 22) // max(len(g) * p.shape[1], 1))
    for start in range(0, len(p), step):
        diff = p[start:start + step, None, :] - g[None, :, :]
        out[start:start + step] = np.sqrt((diff * diff).sum(-1))
    return out


def _rankings(dist, probe_labels, gallery_labels, probe_ids=None, gallery_ids=None):
    """Per probe: the boolean match vector in ranked order (self-matches removed)."""
    dist = np.asarray(dist, dtype=np.float64)
    pl, gl = np.asarray(probe_labels), np.asarray(gallery_labels)
    if dist.shape != (len(pl), len(gl)):
        raise ValueError(f"distance matrix {dist.shape} does not match {len(pl)} probes x {len(gl)} gallery")
    order = np.argsort(dist, axis=1, kind="stable")
    out = []
    for i in range(len(pl)):
        ranked = order[i]
        if probe_ids is not None and gallery_ids is not None:
            ranked = ranked[np.asarray(gallery_ids, dtype=object)[ranked] != probe_ids[i]]
            if len(ranked) == 0:
                raise ValueError(f"gallery is empty for probe {probe_ids[i]} after excluding itself")
        out.append(gl[ranked] == pl[i])
    return out


def rank_k(dist, probe_labels, gallery_labels, k=1, probe_ids=None, gallery_ids=None) -> float:
    """Fraction of probes with a correct identity among their ``k`` nearest gallery entries."""
    if k < 1 or k > np.shape(dist)[1]:
        raise ValueError(f"k={k} outside [1, {np.shape(dist)[1]}]")
    ranked = _rankings(dist, probe_labels, gallery_labels, probe_ids, gallery_ids)
    if not ranked:
        raise ValueError("no probes")
    return float(np.mean([m[:k].any() for m in ranked]))


def _per_probe(dist, probe_labels, gallery_labels, probe_ids, gallery_ids, fn):
    vals, skipped = [], 0
    for m in _rankings(dist, probe_labels, gallery_labels, probe_ids, gallery_ids):
        if not m.any():
            skipped += 1
            continue
        vals.append(fn(m))
    if skipped:
        warnings.warn(f"{skipped} probe(s) without a gallery match excluded", RuntimeWarning, stacklevel=3)
    if not vals:
        raise ValueError("no probe has a gallery match")
    return float(np.mean(vals)), skipped


def _average_precision(m):
    hits = np.cumsum(m)
    pos = np.nonzero(m)[0]
    return float(np.mean(hits[pos] / (pos + 1)))


def _inverse_penalty(m):
    last = np.nonzero(m)[0][-1]
    return m.sum() / (last + 1)


def mean_ap(dist, probe_labels, gallery_labels, probe_ids=None, gallery_ids=None, return_skipped=False):
    value, skipped = _per_probe(dist, probe_labels, gallery_labels, probe_ids, gallery_ids, _average_precision)
    return (value, skipped) if return_skipped else value


def mean_inp(dist, probe_labels, gallery_labels, probe_ids=None, gallery_ids=None, return_skipped=False):
    value, skipped = _per_probe(dist, probe_labels, gallery_labels, probe_ids, gallery_ids, _inverse_penalty)
    return (value, skipped) if return_skipped else value


# --- naive references (used by the test-suite oracles) ------------------------


def naive_pairwise_distances(probes, gallery):
    out = np.zeros((len(probes), len(gallery)))
    for i, p in enumerate(probes):
        for j, g in enumerate(gallery):
            out[i, j] = sum((float(a) - float(b)) ** 2 for a, b in zip(p, g)) ** 0.5
    return out


def naive_metrics(dist, probe_labels, gallery_labels, ks=(1, 5)):
    """Full sort by (distance, index) then direct formulas; no shared code with the fast path."""
    hits = {k: 0 for k in ks}
    aps, inps = [], []
    for i in range(len(probe_labels)):
        ranked = sorted(range(len(gallery_labels)), key=lambda j: (dist[i][j], j))
        matches = [gallery_labels[j] == probe_labels[i] for j in ranked]
        for k in ks:
            hits[k] += any(matches[:k])
        positions = [r + 1 for r, m in enumerate(matches) if m]
        if not positions:
            continue
        aps.append(sum((n + 1) / pos for n, pos in enumerate(positions)) / len(positions))
        inps.append(len(positions) / positions[-1])
    n = len(probe_labels)
    return {
        **{f"rank{k}": hits[k] / n for k in ks},
        "mAP": sum(aps) / len(aps) if aps else float("nan"),
        "mINP": sum(inps) / len(inps) if inps else float("nan"),
    }


# --- protocol and files -------------------------------------------------------


def gallery_probe_split(records):
    """First sequence (in record order) of each identity goes to the gallery, the rest are probes."""
    seen, gallery, probes = set(), [], []
    for r in records:
        if r.label in seen:
            probes.append(r)
        else:
            seen.add(r.label)
            gallery.append(r)
    return gallery, probes


def evaluate(records, ks=(1, 5)) -> dict:
    gallery, probes = gallery_probe_split(records)
    if not probes:
        raise ValueError("no probes: every identity has a single sequence")
    g = np.stack([r.embedding for r in gallery])
    p = np.stack([r.embedding for r in probes])
    dist = pairwise_distances(p, g)
    pl, gl = [r.label for r in probes], [r.label for r in gallery]
    pid, gid = [r.id for r in probes], [r.id for r in gallery]
    report = {f"rank{k}": rank_k(dist, pl, gl, min(k, len(gl)), pid, gid) for k in ks}
    report["mAP"], skipped = mean_ap(dist, pl, gl, pid, gid, return_skipped=True)
    report["mINP"] = mean_inp(dist, pl, gl, pid, gid)
    report.update({"probes": len(probes), "gallery": len(gallery), "probes_without_match": skipped,
                   "mINP_definition": MINP_DEFINITION})
    return report


def write_embeddings(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "label": int(r.label),
                                 "embedding": [float(v) for v in r.embedding]}) + "\n")


def read_embeddings(path):
    records, dim = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                emb = np.asarray(obj["embedding"], dtype=np.float64)
                rec = EmbeddingRecord(str(obj["id"]), int(obj["label"]), emb)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad embedding record ({exc})") from exc
            if emb.ndim != 1 or not np.all(np.isfinite(emb)):
                raise FormatError(f"{path}:{lineno}: embedding must be a finite vector")
            if dim is not None and len(emb) != dim:
                raise FormatError(f"{path}:{lineno}: dimension {len(emb)} differs from {dim}")
            dim = len(emb)
            records.append(rec)
    return records


def embed_dataset(model, dataset, labels=None, frames=0, batch=8):
    """Embeddings for every sequence of ``dataset`` (restricted to ``labels``), in dataset order."""
    from .data import make_batch

    keep = set(dataset.labels if labels is None else labels)
    idx = [i for i, s in enumerate(dataset.sequences) if s.label in keep]
    use_ske = model.cfg.fusion.skeleton_branch
    records = []
    for start in range(0, len(idx), batch):
        chunk = idx[start:start + batch]
        sil, hm = make_batch(dataset, chunk, dtype=model.dtype)
        if frames:
            sil, hm = sil[:, :, :frames], (hm[:, :frames] if hm is not None else None)
        emb = model.embed(sil, hm if use_ske else None)
        for i, e in zip(chunk, emb):
            s = dataset.sequences[i]
            records.append(EmbeddingRecord(s.id, s.label, e.astype(np.float64)))
    return records


def write_report(report, path):
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
