"""Render one synthetic walker, occlude its legs, and build the skeleton heatmaps.

Run: python demos/walker_and_heatmaps.py
"""
import numpy as np

from gaitfuse import synthgait
from gaitfuse.heatmap import default_topology, stack_sequence

# an identity is a bag of limb lengths, widths and swing amplitudes
person = synthgait.generate_identity(3)
print("torso %.1f px, upper leg %.1f px, period %.1f frames" % (person.torso, person.upper_leg, person.period))

poses = synthgait.render_pose_sequence(person, T=12, phase=0.5)  # (12, 17, 3), confidence 1
sils = synthgait.render_silhouettes(poses, person, 64, 44)  # binary masks
print("silhouette area per frame:", sils.sum(axis=(1, 2)).astype(int))

# hide the lower body on most frames; keypoints keep their coordinates,
# only their confidence drops inside the rectangle
spec = synthgait.CorruptionSpec(occlusions=[{"rect": [34, 0, 64, 44], "prob": 0.8}], confidence_noise=0.5)
poses_c, sils_c, fired = synthgait.apply_corruption(poses, sils, spec, np.random.default_rng(0))
print("occluded frames:", np.nonzero(fired[:, 0])[0].tolist())
print("silhouette area after occlusion:", sils_c.sum(axis=(1, 2)).astype(int))
print("mean ankle confidence: %.2f" % poses_c[:, 15:17, 2].mean())

# 17 joint maps followed by 12 limb maps, each scaled by confidence
vol = stack_sequence(poses_c, default_topology(), sigma=2.0, H=64, W=44)
print("heatmap volume", vol.shape, "peak of frame 0 joint 0 at", tuple(int(v) for v in np.unravel_index(vol[0, 0].argmax(), (64, 44))))


def ascii(img, thresh=0.5):
    return "\n".join("".join("#" if v > thresh else "." for v in row[::2]) for row in img[::2])


print("\nframe 0 silhouette (clean | occluded):")
for a, b in zip(ascii(sils[0]).splitlines(), ascii(sils_c[0]).splitlines()):
    print(a, "|", b)
print("\nframe 0 limb heatmaps (max over limbs):")
print(ascii(vol[0, 17:].max(axis=0), 0.3))
