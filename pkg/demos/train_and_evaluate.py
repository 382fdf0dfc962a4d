"""Tiny end-to-end run: generate walkers, train briefly, evaluate on unseen identities.

Run: python demos/train_and_evaluate.py   (about a minute on one core)
"""
import tempfile
from pathlib import Path

from gaitfuse import config, eval as ev, synthgait, trainer

work = Path(tempfile.mkdtemp(prefix="gaitfuse-demo-"))
occlusion = synthgait.CorruptionSpec(occlusions=[{"rect": [34, 0, 64, 44], "prob": 0.5}], confidence_noise=0.5)
synthgait.build_dataset(8, 4, 16, work / "data", seed=0, corruption=occlusion)

cfg = config.load_config(overrides=[
    "model.sil_size=32x22", "model.ske_size=16x11", "model.parts=4",
    "model.sil_channels=8,16,32", "model.ske_channels=16,32", "model.embed_dim=32",
    "train.batch=4,2", "train.lr=0.01", "train.clip_norm=1.0", "train.milestones=",
    "train.total_iters=60", "train.log_every=20", "data.train_identities=5",
])
tr = trainer.train(cfg, work / "data", work / "run")
for rec in tr.history[::20]:
    print("iter %3d  total %.3f  triplet %.3f  ce %.3f  w2 %.3f"
          % (rec["iteration"], rec["total"], rec["triplet"], rec["cross_entropy"], rec["wasserstein"]))

ckpt = trainer.load_checkpoint(work / "run" / "final.gmck")
model = trainer.model_from_checkpoint(ckpt)
held_out = [l for l in tr.dataset.labels if l not in tr.labels]
report = ev.evaluate(ev.embed_dataset(model, tr.dataset, held_out))
print("held-out identities", held_out)
print("rank-1 %.3f  rank-5 %.3f  mAP %.3f  mINP %.3f" % (report["rank1"], report["rank5"], report["mAP"], report["mINP"]))
print("outputs in", work)
