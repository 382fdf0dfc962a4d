"""Step through the fusion head on random part features and check the gradients.

Run: python demos/fusion_walkthrough.py
"""
import numpy as np

from gaitfuse import fusion, losses
from gaitfuse.diffcore import Tensor, check_gradients, all_passed

rng = np.random.default_rng(0)
N, P, C = 6, 4, 8  # samples, horizontal parts, channels per modality
y_sil = Tensor(rng.standard_normal((N, P, C)), requires_grad=True)
y_ske = Tensor(rng.standard_normal((N, P, C)), requires_grad=True)
labels = np.repeat(np.arange(3), 2)

cam = fusion.init_cam_params(C, reduction=4, rng=rng, dtype=np.float64)
mlm = fusion.init_mlm_params(C, np.float64)

# gate the concatenated features channel by channel, then split them back
aligned = fusion.cam_forward(y_sil, y_ske, cam)
a_sil, a_ske = fusion.split_modalities(aligned)
print("aligned features", aligned.shape)

# with every CAM weight at zero the gate is sigmoid(0) = 0.5 everywhere
zero = {k: Tensor(np.zeros_like(v.data)) for k, v in cam.items()}
gated = fusion.cam_forward(y_sil, y_ske, zero).data
print("zero-parameter gate gives 1.5 x input:", np.allclose(gated, 1.5 * np.concatenate([y_sil.data, y_ske.data], -1)))

# each modality attends over the other's parts
m_sil, m_ske, (att_s, att_k) = fusion.mlm_forward(a_sil, a_ske, mlm, return_attention=True)
print("attention rows sum to one:", np.allclose(att_s.data.sum(-1), 1))
fused = fusion.fuse_output(m_sil, m_ske)
print("fused embedding", fused.shape)

trip = losses.triplet_loss(fused.reshape(N, -1), labels)
w2 = losses.modality_wasserstein(m_sil, m_ske)
print("triplet %.4f  wasserstein %.4f" % (float(trip.data), float(w2.data)))


def objective():
    al = fusion.cam_forward(y_sil, y_ske, cam)
    s, k = fusion.split_modalities(al)
    s, k = fusion.mlm_forward(s, k, mlm)
    out = fusion.fuse_output(s, k)
    return losses.triplet_loss(out.reshape(N, -1), labels) + 0.1 * losses.modality_wasserstein(s, k)


probes = check_gradients(objective, {"y_sil": y_sil, "y_ske": y_ske, **cam, **mlm}, n_probes=40, rng=rng)
print("finite-difference check on %d probes passed: %s" % (len(probes), all_passed(probes)))
