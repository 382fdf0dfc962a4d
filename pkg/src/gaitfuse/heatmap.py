"""Joint and limb Gaussian heatmaps from 2D keypoint sequences.

Axis convention: a joint ``(x, y, c)`` has ``x`` along the image rows
(height, index ``i``) and ``y`` along the columns (width, index ``j``).

A pose frame is a ``(K, 3)`` array and a pose sequence a ``(T, K, 3)``
array. Generation runs in float64; volumes are stored as float32.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, TopologyError

HEATMAP_MAGIC = b"GMHM"
HEATMAP_VERSION = 1
DEFAULT_SIGMA = 2.0


@dataclass(frozen=True)
class SkeletonTopology:
    joint_count: int
    limbs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.joint_count < 1:
            raise TopologyError(f"joint_count must be positive, got {self.joint_count}")
        seen = set()
        for a, b in self.limbs:
            if not (0 <= a < self.joint_count and 0 <= b < self.joint_count):
                raise TopologyError(f"limb ({a}, {b}) out of range for {self.joint_count} joints")
            if a == b:
                raise TopologyError(f"limb ({a}, {b}) connects a joint to itself")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise TopologyError(f"duplicate limb ({a}, {b})")
            seen.add(key)

    @property
    def limb_count(self) -> int:
        return len(self.limbs)

    @property
    def total_channels(self) -> int:
        return self.joint_count + self.limb_count

    @classmethod
    def from_dict(cls, obj) -> "SkeletonTopology":
        try:
            k = int(obj["joint_count"])
            limbs = tuple((int(a), int(b)) for a, b in obj["limbs"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed topology: {exc}") from exc
        return cls(k, limbs)

    @classmethod
    def from_json(cls, path) -> "SkeletonTopology":
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return {"joint_count": self.joint_count, "limbs": [list(l) for l in self.limbs]}


def default_topology() -> SkeletonTopology:
    """17-joint layout with 12 limbs (four two-segment limbs, connectors, torso sides)."""
    text = resources.files("gaitfuse.resources").joinpath("coco17_topology.json").read_text()
    return SkeletonTopology.from_dict(json.loads(text))


def _check_frame(frame, joint_count=None) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.shape[1] != 3:
        raise ValueError(f"pose frame must be (K, 3), got {frame.shape}")
    if joint_count is not None and frame.shape[0] != joint_count:
        raise TopologyError(f"frame has {frame.shape[0]} joints, topology expects {joint_count}")
    if not np.all(np.isfinite(frame)):
        raise ValueError("pose frame contains non-finite values")
    c = frame[:, 2]
    if np.any((c < 0) | (c > 1)):
        raise ValueError("joint confidences must lie in [0, 1]")
    return frame


def _check_grid(sigma, H, W):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if H < 1 or W < 1:
        raise ValueError(f"heatmap size must be at least 1x1, got {H}x{W}")


def point_segment_distance(p, a, b) -> float:
    """Euclidean distance from point ``p`` to the closed segment ``[a, b]``."""
    p, a, b = (np.asarray(v, dtype=np.float64) for v in (p, a, b))
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite coordinates")
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else min(max(float((p - a) @ ab) / denom, 0.0), 1.0)
    return float(np.hypot(*(p - (a + t * ab))))


def _segment_sq_distance(ii, jj, a, b):
    """Squared distance from grid points to segments, broadcast over leading dims.

    ``a`` and ``b`` have shape ``(..., 2)``; ``ii``/``jj`` broadcast against
    ``(..., H, W)``.
    """
    ax, ay = a[..., 0, None, None], a[..., 1, None, None]
    dx = (b[..., 0] - a[..., 0])[..., None, None]
    dy = (b[..., 1] - a[..., 1])[..., None, None]
    denom = dx * dx + dy * dy
    px, py = ii - ax, jj - ay
    safe = np.where(denom > 0, denom, 1.0)
    t = np.where(denom > 0, np.clip((px * dx + py * dy) / safe, 0.0, 1.0), 0.0)
    ex, ey = px - t * dx, py - t * dy
    return ex * ex + ey * ey


def _grid(H, W):
    ii = np.arange(H, dtype=np.float64)[:, None]
    jj = np.arange(W, dtype=np.float64)[None, :]
    return ii, jj


def joint_heatmap(frame, sigma, H, W) -> np.ndarray:
    """Gaussian map per joint, scaled by its confidence. Returns ``(K, H, W)``."""
    frame = _check_frame(frame)
    _check_grid(sigma, H, W)
    return _joint_maps(frame[None], sigma, H, W)[0]


def limb_heatmap(frame, topo: SkeletonTopology, sigma, H, W) -> np.ndarray:
    """Gaussian tube around each limb segment, gated by the weaker endpoint confidence."""
    frame = _check_frame(frame, topo.joint_count)
    _check_grid(sigma, H, W)
    return _limb_maps(frame[None], topo, sigma, H, W)[0]


def _joint_maps(seq, sigma, H, W):
    ii, jj = _grid(H, W)
    x = seq[:, :, 0, None, None]
    y = seq[:, :, 1, None, None]
    c = seq[:, :, 2, None, None]
    d2 = (ii - x) ** 2 + (jj - y) ** 2
    return np.exp(-d2 / (2 * sigma**2)) * c


def _limb_maps(seq, topo, sigma, H, W):
    T = seq.shape[0]
    if topo.limb_count == 0:
        return np.zeros((T, 0, H, W))
    ii, jj = _grid(H, W)
    idx_a = np.array([a for a, _ in topo.limbs])
    idx_b = np.array([b for _, b in topo.limbs])
    pa, pb = seq[:, idx_a, :2], seq[:, idx_b, :2]
    gate = np.minimum(seq[:, idx_a, 2], seq[:, idx_b, 2])[:, :, None, None]
    d2 = _segment_sq_distance(ii, jj, pa, pb)
    return np.exp(-d2 / (2 * sigma**2)) * gate


def stack_sequence(frames, topo: SkeletonTopology, sigma=DEFAULT_SIGMA, H=64, W=44) -> np.ndarray:
    """Stack joint maps then limb maps per frame into a ``(T, K + L, H, W)`` volume."""
    seq = np.asarray(frames, dtype=np.float64)
    if seq.size == 0 or seq.ndim != 3 or len(seq) == 0:
        raise ValueError("empty sequence")
    for t in range(len(seq)):
        _check_frame(seq[t], topo.joint_count)
    _check_grid(sigma, H, W)
    return np.concatenate([_joint_maps(seq, sigma, H, W), _limb_maps(seq, topo, sigma, H, W)], axis=1)


def naive_stack_sequence(frames, topo: SkeletonTopology, sigma, H, W) -> np.ndarray:
    """Per-pixel reference loop; slow, used to verify :func:`stack_sequence`."""
    frames = np.asarray(frames, dtype=np.float64)
    T, K, _ = frames.shape
    out = np.zeros((T, K + topo.limb_count, H, W))
    two_s2 = 2.0 * sigma * sigma
    for t in range(T):
        f = frames[t].tolist()
        for k in range(K):
            x, y, c = f[k]
            for i in range(H):
                for j in range(W):
                    out[t, k, i, j] = math.exp(-((i - x) ** 2 + (j - y) ** 2) / two_s2) * c
        for n, (a, b) in enumerate(topo.limbs):
            xa, ya, ca = f[a]
            xb, yb, cb = f[b]
            gate = min(ca, cb)
            for i in range(H):
                for j in range(W):
                    d = _naive_distance(i, j, xa, ya, xb, yb)
                    out[t, K + n, i, j] = math.exp(-(d * d) / two_s2) * gate
    return out


def _naive_distance(px, py, ax, ay, bx, by):
    # endpoint distances, and the perpendicular one only when the foot falls inside
    best = min(math.hypot(px - ax, py - ay), math.hypot(px - bx, py - by))
    dx, dy = bx - ax, by - ay
    length2 = dx * dx + dy * dy
    if length2 > 0:
        t = ((px - ax) * dx + (py - ay) * dy) / length2
        if 0.0 <= t <= 1.0:
            best = min(best, abs((px - ax) * dy - (py - ay) * dx) / math.sqrt(length2))
    return best


# --- file formats -----------------------------------------------------------


def read_pose_jsonl(path, joint_count=None) -> np.ndarray:
    """Read a pose sequence. Each line: ``{"frame": t, "joints": [[x, y, c], ...]}``."""
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                t = rec["frame"]
                joints = np.asarray(rec["joints"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed pose record ({exc})") from exc
            if t != len(frames):
                raise FormatError(f"{path}:{lineno}: expected frame {len(frames)}, got {t}")
            if joints.ndim != 2 or joints.shape[1] != 3:
                raise FormatError(f"{path}:{lineno}: frame {t}: joints must be [x, y, c] triplets")
            if joint_count is None:
                joint_count = joints.shape[0]
            if joints.shape[0] != joint_count:
                raise FormatError(
                    f"{path}:{lineno}: frame {t} has {joints.shape[0]} joints, expected {joint_count}"
                )
            if not np.all(np.isfinite(joints)):
                raise FormatError(f"{path}:{lineno}: frame {t} has non-finite values")
            if np.any((joints[:, 2] < 0) | (joints[:, 2] > 1)):
                raise FormatError(f"{path}:{lineno}: frame {t} has confidences outside [0, 1]")
            frames.append(joints)
    if not frames:
        raise FormatError(f"{path}: empty sequence")
    return np.stack(frames)


def write_pose_jsonl(seq, path):
    seq = np.asarray(seq, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for t, frame in enumerate(seq):
            fh.write(json.dumps({"frame": t, "joints": frame.tolist()}) + "\n")


def write_heatmap_bin(volume, path):
    vol = np.asarray(volume)
    if vol.ndim != 4 or min(vol.shape) < 1:
        raise ValueError(f"heatmap volume must be (T, K, H, W) with positive dims, got {vol.shape}")
    header = HEATMAP_MAGIC + struct.pack("<5I", HEATMAP_VERSION, *vol.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vol, dtype="<f4").tobytes())


def read_heatmap_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != HEATMAP_MAGIC:
        raise FormatError(f"{path}: offset 0: bad magic {raw[:4]!r}")
    if len(raw) < 24:
        raise FormatError(f"{path}: offset 4: truncated header")
    version, T, K, H, W = struct.unpack_from("<5I", raw, 4)
    if version != HEATMAP_VERSION:
        raise FormatError(f"{path}: offset 4: unsupported version {version}")
    if min(T, K, H, W) < 1:
        raise FormatError(f"{path}: offset 8: non-positive dims {(T, K, H, W)}")
    expected = 24 + 4 * T * K * H * W
    if len(raw) != expected:
        raise FormatError(f"{path}: offset 24: payload size {len(raw) - 24}, expected {expected - 24}")
    return np.frombuffer(raw, dtype="<f4", offset=24).reshape(T, K, H, W).astype(np.float32)
