"""Loading a synthetic dataset from disk and assembling model inputs.

Silhouettes are stored at the dataset resolution and mean-pooled by an
integer factor to the model's silhouette size. Heatmaps are generated at the
model's skeleton size from keypoints mapped onto the coarser pixel grid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .heatmap import SkeletonTopology, read_pose_jsonl, stack_sequence


def read_pgm(path) -> np.ndarray:
    """Binary 8-bit PGM (P5) -> float64 array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header ({exc})") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    pix = raw[pos + 1:]
    if len(pix) != H * W:
        raise FormatError(f"{path}: expected {H * W} pixel bytes, found {len(pix)}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(H, W) / 255.0


def downsample(images, size) -> np.ndarray:
    """Mean-pool ``(..., H, W)`` to ``size`` by integer factors."""
    H, W = images.shape[-2:]
    h, w = size
    if H % h or W % w:
        raise ValueError(f"cannot downsample {H}x{W} to {h}x{w} by an integer factor")
    fh, fw = H // h, W // w
    if fh == fw == 1:
        return images
    return images.reshape(*images.shape[:-2], h, fh, w, fw).mean(axis=(-3, -1))


def rescale_poses(poses, src_size, dst_size) -> np.ndarray:
    """Map keypoints to the pixel grid of a block-averaged image: ``(x - (f-1)/2) / f``."""
    out = np.array(poses, dtype=np.float64, copy=True)
    for axis in (0, 1):
        f = src_size[axis] / dst_size[axis]
        out[..., axis] = (out[..., axis] - (f - 1) / 2) / f
    return out


@dataclass
class Sequence:
    id: str
    label: int
    poses: np.ndarray  # (T, K, 3) at dataset resolution
    silhouettes: np.ndarray  # (T, h, w) at model resolution
    heatmaps: np.ndarray | None = None  # (T, K_total, H', W')

    @property
    def frames(self) -> int:
        return len(self.poses)


@dataclass
class Dataset:
    root: Path
    manifest: dict
    sequences: list
    topology: SkeletonTopology
    by_label: dict = field(default_factory=dict)

    def __post_init__(self):
        self.by_label = {}
        for i, s in enumerate(self.sequences):
            self.by_label.setdefault(s.label, []).append(i)

    @property
    def labels(self):
        return sorted(self.by_label)

    def subset(self, labels) -> "Dataset":
        keep = set(labels)
        return Dataset(self.root, self.manifest, [s for s in self.sequences if s.label in keep], self.topology)


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    try:
        manifest = json.loads(text)
        manifest["sequences"], manifest["size"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    return manifest


def load_dataset(root, sil_size, ske_size, sigma, topology: SkeletonTopology, heatmaps=True) -> Dataset:
    """Read every sequence listed in the manifest; labels are the manifest identities."""
    root = Path(root)
    manifest = load_manifest(root)
    src = tuple(manifest["size"])
    seqs = []
    for entry in manifest["sequences"]:
        poses = read_pose_jsonl(root / entry["poses"], topology.joint_count)
        sil_dir = root / entry["silhouettes"]
        files = sorted(sil_dir.glob("*.pgm"))
        if len(files) != len(poses):
            raise FormatError(f"{sil_dir}: {len(files)} silhouettes for {len(poses)} pose frames")
        sils = downsample(np.stack([read_pgm(f) for f in files]), sil_size).astype(np.float32)
        seq = Sequence(entry["id"], int(entry["identity"]), poses, sils)
        if heatmaps:
            seq.heatmaps = stack_sequence(rescale_poses(poses, src, ske_size), topology, sigma, *ske_size)
        seqs.append(seq)
    return Dataset(root, manifest, seqs, topology)


def dataset_for_config(root, cfg, heatmaps=None) -> Dataset:
    bb = cfg.backbone
    if heatmaps is None:
        heatmaps = cfg.fusion.skeleton_branch
    return load_dataset(root, bb.sil_size, bb.ske_size, cfg.data.sigma, cfg.topology(), heatmaps)


def sample_frames(n_frames, count, rng) -> np.ndarray:
    """``count`` sorted frame indices; without replacement when the sequence is long enough."""
    replace = n_frames < count
    return np.sort(rng.choice(n_frames, size=count, replace=replace))


def make_batch(dataset: Dataset, indices, frames=None, rng=None, dtype=np.float32):
    """Stack sequences into ``(N, 1, T, h, w)`` silhouettes and ``(N, T, K, H', W')`` heatmaps.

    With ``frames`` set, each sample gets its own random sorted frame subset;
    otherwise all frames are used (sequences must then share a length).
    """
    sils, hms = [], []
    for i in indices:
        s = dataset.sequences[i]
        sel = sample_frames(s.frames, frames, rng) if frames else np.arange(s.frames)
        sils.append(s.silhouettes[sel])
        if s.heatmaps is not None:
            hms.append(s.heatmaps[sel])
    sil = np.stack(sils)[:, None].astype(dtype)
    hm = np.stack(hms).astype(dtype) if hms else None
    return sil, hm
