"""Synthetic side-view walker: identity-specific kinematics, coupled pose and
silhouette rendering, occlusion corruption, and an on-disk dataset builder.

Lengths are in pixels at a 64-pixel reference height and scale with the
rendered frame height. Joint layout follows the 17-joint default topology.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .heatmap import default_topology, write_pose_jsonl

REF_HEIGHT = 64
JOINTS = 17

# (low, high) sampling range per identity field
RANGES = {
    "torso": (14.0, 19.0),
    "upper_arm": (8.0, 11.0),
    "lower_arm": (7.0, 10.0),
    "upper_leg": (11.0, 15.0),
    "lower_leg": (10.0, 14.0),
    "head": (4.5, 6.0),
    "limb_width": (2.5, 4.0),
    "torso_width": (6.0, 9.0),
    "frequency": (0.28, 0.42),
    "hip_amplitude": (0.25, 0.5),
    "knee_amplitude": (0.3, 0.6),
    "shoulder_amplitude": (0.2, 0.5),
    "elbow_amplitude": (0.1, 0.4),
    "height_scale": (0.92, 1.05),
}
LIMB_FIELDS = ("torso", "upper_arm", "lower_arm", "upper_leg", "lower_leg")
MIN_IDENTITY_GAP = 1.5
LEAN = 0.05
FOOT_MARGIN = 4.0


@dataclass(frozen=True)
class IdentityParams:
    torso: float
    upper_arm: float
    lower_arm: float
    upper_leg: float
    lower_leg: float
    head: float
    limb_width: float
    torso_width: float
    frequency: float
    hip_amplitude: float
    knee_amplitude: float
    shoulder_amplitude: float
    elbow_amplitude: float
    height_scale: float

    def limb_lengths(self) -> np.ndarray:
        """Scaled limb-length vector used for the identity separation gap."""
        return np.array([getattr(self, f) for f in LIMB_FIELDS]) * self.height_scale

    @property
    def period(self) -> float:
        return 2 * math.pi / self.frequency


def generate_identity(seed) -> IdentityParams:
    """Draw every field uniformly from :data:`RANGES`; deterministic per seed."""
    rng = np.random.default_rng(seed)
    return IdentityParams(**{f.name: float(rng.uniform(*RANGES[f.name])) for f in fields(IdentityParams)})


@dataclass
class CorruptionSpec:
    """``occlusions`` holds ``{"rect": [r0, c0, r1, c1], "prob": p}`` entries in
    pixels (half-open). Each fires independently per frame. ``dropout`` removes
    foreground pixels at random; keypoints inside a fired rectangle have their
    confidence multiplied by ``1 - confidence_noise * u`` with ``u ~ U(0, 1)``."""

    occlusions: list = field(default_factory=list)
    dropout: float = 0.0
    confidence_noise: float = 0.0

    def __post_init__(self):
        for occ in self.occlusions:
            if len(occ["rect"]) != 4 or not 0 <= occ["prob"] <= 1:
                raise ValueError(f"bad occlusion entry {occ}")
        if not (0 <= self.dropout <= 1 and 0 <= self.confidence_noise <= 1):
            raise ValueError("dropout and confidence_noise must lie in [0, 1]")

    @property
    def empty(self) -> bool:
        return not self.occlusions and self.dropout == 0 and self.confidence_noise == 0

    @classmethod
    def from_json(cls, path) -> "CorruptionSpec":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(occlusions=list(obj.get("occlusions", [])), dropout=float(obj.get("dropout", 0.0)),
                   confidence_noise=float(obj.get("confidence_noise", 0.0)))

    def to_dict(self) -> dict:
        return {"occlusions": self.occlusions, "dropout": self.dropout, "confidence_noise": self.confidence_noise}


# --- kinematics ---------------------------------------------------------------


def joint_angles(params: IdentityParams, t, phase=0.0) -> dict:
    """Hip, knee, shoulder and elbow angles (radians) at time ``t`` (frames).

    Right-side angles are the left-side formulas shifted by half a period.
    """
    theta = params.frequency * np.asarray(t, dtype=np.float64) + phase
    out = {}
    for side, shift in (("left", 0.0), ("right", math.pi)):
        th = theta + shift
        out[f"{side}_hip"] = params.hip_amplitude * np.sin(th)
        out[f"{side}_knee"] = params.knee_amplitude * 0.5 * (1.0 + np.cos(th))
        out[f"{side}_shoulder"] = -params.shoulder_amplitude * np.sin(th)
        out[f"{side}_elbow"] = params.elbow_amplitude * 0.5 * (1.0 + np.sin(th))
    return out


def _direction(angle):
    # angle 0 points down the rows; positive angles swing forward (increasing columns)
    return np.array([math.cos(angle), math.sin(angle)])


def render_pose_sequence(params: IdentityParams, T, phase=0.0, size=(REF_HEIGHT, 44)) -> np.ndarray:
    """Forward kinematics of the walker for frames ``0..T-1`` -> ``(T, 17, 3)``, confidence 1."""
    if T < 1:
        raise ValueError("T must be at least 1")
    H, W = size
    s = H / REF_HEIGHT * params.height_scale
    hip_row = H * (1 - FOOT_MARGIN / REF_HEIGHT) - (params.upper_leg + params.lower_leg) * s
    centre = np.array([hip_row, W / 2.0 - 0.5])
    side = np.array([0.0, 0.75 * H / REF_HEIGHT])
    ang = joint_angles(params, np.arange(T), phase)
    seq = np.zeros((T, JOINTS, 3))
    seq[:, :, 2] = 1.0
    for t in range(T):
        pts = np.zeros((JOINTS, 2))
        neck = centre + params.torso * s * np.array([-math.cos(LEAN), math.sin(LEAN)])
        nose = neck + params.head * s * np.array([-1.0, 0.15])
        u = H / REF_HEIGHT
        pts[0] = nose
        pts[1] = nose + np.array([-0.8, -0.4]) * u
        pts[2] = nose + np.array([-0.8, -0.9]) * u
        pts[3] = nose + np.array([-0.4, -2.2]) * u
        pts[4] = nose + np.array([-0.4, -2.6]) * u
        for k, (sign, name) in enumerate(((1.0, "left"), (-1.0, "right"))):
            sh = neck + sign * side
            ua = ang[f"{name}_shoulder"][t]
            elbow = sh + params.upper_arm * s * _direction(ua)
            wrist = elbow + params.lower_arm * s * _direction(ua + ang[f"{name}_elbow"][t])
            hip = centre + sign * side
            th = ang[f"{name}_hip"][t]
            knee = hip + params.upper_leg * s * _direction(th)
            ankle = knee + params.lower_leg * s * _direction(th - ang[f"{name}_knee"][t])
            pts[5 + k], pts[7 + k], pts[9 + k] = sh, elbow, wrist
            pts[11 + k], pts[13 + k], pts[15 + k] = hip, knee, ankle
        seq[t, :, :2] = pts
    return seq


# --- rasterization ------------------------------------------------------------

_ARM_LEG_SEGMENTS = ((5, 7), (7, 9), (6, 8), (8, 10), (11, 13), (13, 15), (12, 14), (14, 16))


def render_primitives(frame, params: IdentityParams, H):
    """Thick segments ``(a, b, width)`` and the torso ellipse for one frame."""
    u = H / REF_HEIGHT * params.height_scale
    frame = np.asarray(frame)
    lw = params.limb_width * u
    segments = [(frame[a, :2], frame[b, :2], lw) for a, b in _ARM_LEG_SEGMENTS]
    neck = 0.5 * (frame[5, :2] + frame[6, :2])
    pelvis = 0.5 * (frame[11, :2] + frame[12, :2])
    segments.append((neck, frame[0, :2], 1.8 * params.head * u))
    ellipse = {
        "centre": 0.5 * (neck + pelvis),
        "axis": (neck - pelvis) / max(np.linalg.norm(neck - pelvis), 1e-9),
        "semi_major": 0.5 * np.linalg.norm(neck - pelvis) + 0.5 * lw,
        "semi_minor": 0.5 * params.torso_width * u,
    }
    return segments, ellipse


def _segment_coverage(ii, jj, a, b, width):
    from .heatmap import _segment_sq_distance

    d = np.sqrt(_segment_sq_distance(ii, jj, np.asarray(a, float)[None], np.asarray(b, float)[None])[0])
    return np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0)


def _ellipse_coverage(ii, jj, e):
    pr, pc = ii - e["centre"][0], jj - e["centre"][1]
    ar, ac = e["axis"]
    along = pr * ar + pc * ac
    across = -pr * ac + pc * ar
    A, B = e["semi_major"], e["semi_minor"]
    rho = np.sqrt((along / A) ** 2 + (across / B) ** 2)
    return np.clip(0.5 - (rho - 1.0) * min(A, B), 0.0, 1.0)


def rasterize_silhouette(frame, params: IdentityParams, H, W) -> np.ndarray:
    """Anti-aliased union of limbs, head and torso, thresholded at 0.5 -> binary ``(H, W)``."""
    if H < 1 or W < 1:
        raise ValueError("silhouette size must be at least 1x1")
    ii = np.arange(H, dtype=np.float64)[:, None]
    jj = np.arange(W, dtype=np.float64)[None, :]
    segments, ellipse = render_primitives(frame, params, H)
    cov = _ellipse_coverage(ii, jj, ellipse)
    for a, b, w in segments:
        cov = np.maximum(cov, _segment_coverage(ii, jj, a, b, w))
    return (cov >= 0.5).astype(np.float64)


def render_silhouettes(poses, params, H, W) -> np.ndarray:
    return np.stack([rasterize_silhouette(f, params, H, W) for f in poses])


# --- corruption ---------------------------------------------------------------


def apply_corruption(poses, silhouettes, spec: CorruptionSpec, rng):
    """Occlude silhouettes and down-weight occluded keypoint confidences.

    Pose coordinates are never modified. Returns ``(poses, silhouettes,
    fired)`` where ``fired`` is a ``(T, n_rects)`` boolean trace.
    """
    poses = np.array(poses, dtype=np.float64, copy=True)
    sils = np.array(silhouettes, dtype=np.float64, copy=True)
    T = len(sils)
    fired = np.zeros((T, len(spec.occlusions)), dtype=bool)
    if spec.empty:
        return poses, sils, fired
    for t in range(T):
        for r, occ in enumerate(spec.occlusions):
            fired[t, r] = rng.random() < occ["prob"]
        if spec.dropout > 0:
            keep = rng.random(sils[t].shape) >= spec.dropout
            sils[t] *= keep
        noise = rng.random(poses.shape[1])
        for r, occ in enumerate(spec.occlusions):
            if not fired[t, r]:
                continue
            r0, c0, r1, c1 = occ["rect"]
            sils[t, max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = 0.0
            x, y = poses[t, :, 0], poses[t, :, 1]
            inside = (x >= r0) & (x < r1) & (y >= c0) & (y < c1)
            poses[t, inside, 2] *= 1.0 - spec.confidence_noise * noise[inside]
    return poses, sils, fired


# --- dataset ------------------------------------------------------------------


def draw_identities(n, seed, gap=MIN_IDENTITY_GAP, max_attempts=1000):
    """Rejection-sample ``n`` identities whose limb-length vectors differ by ``gap`` in L-inf."""
    found = []
    for i in range(n):
        for attempt in range(max_attempts):
            cand = generate_identity([seed, i, attempt])
            if all(np.max(np.abs(cand.limb_lengths() - p.limb_lengths())) >= gap for p in found):
                found.append(cand)
                break
        else:
            raise RuntimeError(f"could not place identity {i} with gap {gap}")
    return found


def write_pgm(path, image):
    img = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def sequence_name(identity, sequence):
    return f"id{identity:03d}_seq{sequence:02d}"


def build_dataset(n_identities, seqs_per_identity, T, out_dir, seed=0, corruption=None, size=(64, 44)):
    """Write poses, PGM silhouettes and ``manifest.json`` under ``out_dir``; returns the manifest."""
    if min(n_identities, seqs_per_identity, T) < 1:
        raise ValueError("identity, sequence and frame counts must be at least 1")
    corruption = corruption or CorruptionSpec()
    H, W = size
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    topo = default_topology()
    (out / "topology.json").write_text(json.dumps(topo.to_dict(), sort_keys=True) + "\n")
    identities = draw_identities(n_identities, seed)
    entries = []
    for i, ident in enumerate(identities):
        for s in range(seqs_per_identity):
            rng = np.random.default_rng([seed, i, s, 1])
            phase = float(rng.uniform(0, 2 * math.pi))
            poses = render_pose_sequence(ident, T, phase, (H, W))
            sils = render_silhouettes(poses, ident, H, W)
            poses, sils, fired = apply_corruption(poses, sils, corruption, rng)
            name = sequence_name(i, s)
            seq_dir = out / name
            (seq_dir / "sil").mkdir(parents=True, exist_ok=True)
            write_pose_jsonl(poses, seq_dir / "poses.jsonl")
            for t, img in enumerate(sils):
                write_pgm(seq_dir / "sil" / f"{t:04d}.pgm", img)
            entries.append({
                "id": name,
                "identity": i,
                "sequence": s,
                "phase": phase,
                "poses": f"{name}/poses.jsonl",
                "silhouettes": f"{name}/sil",
                "frames": T,
                "corruption": {"corrupted": bool(fired.any()),
                               "occluded_frames": [int(t) for t in np.nonzero(fired.any(axis=1))[0]]},
            })
    manifest = {
        "format": "gaitfuse-synthetic/1",
        "seed": seed,
        "identities": n_identities,
        "sequences_per_identity": seqs_per_identity,
        "frames": T,
        "size": [H, W],
        "topology": "topology.json",
        "corruption": corruption.to_dict(),
        "identity_params": [asdict(p) for p in identities],
        "sequences": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
