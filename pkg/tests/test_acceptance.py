"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The training checks use the small desk model below; together they take
roughly half an hour on one CPU core.
"""
import time
import warnings

import numpy as np
import pytest

from gaitfuse import config, data, eval as ev, fusion, gradsuite, losses, synthgait, trainer
from gaitfuse.diffcore import Tensor, softmax_rows
from gaitfuse.heatmap import default_topology, naive_stack_sequence, stack_sequence

from conftest import random_frame

DESK = ["model.sil_size=32x22", "model.ske_size=16x11", "model.parts=4", "model.sil_channels=8,16,32",
        "model.ske_channels=16,32", "model.embed_dim=32", "train.batch=4,2", "train.lr=0.01",
        "train.clip_norm=1.0", "train.milestones="]

ABLATION_CORRUPTION = synthgait.CorruptionSpec(
    occlusions=[{"rect": [34, 0, 64, 44], "prob": 0.8}], dropout=0.1, confidence_noise=0.5)
ABLATION_ITERS = 300
ABLATION_TRAIN_IDS = 10
ABLATION_SEEDS = (0, 1, 2)
VARIANTS = {
    "silhouette-only": ["model.skeleton_branch=off"],
    "silhouette+skeleton (add)": ["fusion.cam=off", "fusion.mlm=off"],
    "no-wasserstein": ["loss.wasserstein=off"],
    "full": [],
}


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


@pytest.fixture(scope="module")
def overfit_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    synthgait.build_dataset(8, 4, 24, root, seed=0)
    return root


def test_heatmap_oracle(verdict):
    rng = np.random.default_rng(2024)
    topo = default_topology()
    frames = np.stack([random_frame(rng, K=17, H=64, W=44) for _ in range(50)])
    worst, fast_time = 0.0, 0.0
    start = time.perf_counter()
    for sigma in (1.0, 2.0, 4.0):
        t0 = time.perf_counter()
        fast = stack_sequence(frames, topo, sigma, 64, 44)
        fast_time += time.perf_counter() - t0
        worst = max(worst, float(np.max(np.abs(fast - naive_stack_sequence(frames, topo, sigma, 64, 44)))))
    total = time.perf_counter() - start
    verdict("heatmap oracle", worst <= 1e-12 and fast_time < 10,
            f"50 frames x sigma {{1,2,4}} at 64x44, max abs diff {worst:.2e} (<= 1e-12), "
            f"generation {fast_time:.2f}s (< 10s), with per-pixel loop {total:.1f}s")


def test_gradient_suite(verdict):
    start = time.perf_counter()
    results = gradsuite.run_suite(seed=0, model_probes=200)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    model = next(r for r in results if r.name == "full_model")
    worst = max(r.worst_error for r in results)
    ok = not failed and len(model.probes) >= 200 and elapsed < 300
    verdict("gradient suite", ok,
            f"{len(results) - len(failed)}/{len(results)} cases, composed model {len(model.probes)} probes, "
            f"worst rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 300s)" + (f", failed {failed}" if failed else ""))


def test_exact_identities(verdict):
    rng = np.random.default_rng(7)
    rows = softmax_rows(rng.standard_normal((64, 33)) * 30).data
    softmax_err = float(np.max(np.abs(rows.sum(axis=1) - 1)))

    ys, yk = rng.standard_normal((4, 8, 32)), rng.standard_normal((4, 8, 32))
    zero = {k: Tensor(np.zeros_like(v.data)) for k, v in fusion.init_cam_params(32, 4, rng, np.float64).items()}
    cam_err = float(np.max(np.abs(fusion.cam_forward(ys, yk, zero).data - 1.5 * np.concatenate([ys, yk], -1))))

    def w2(m1, v1, m2, v2):
        s = losses.GaussianStats
        return float(losses.wasserstein_loss(s(Tensor(np.array(m1)), Tensor(np.array(v1))),
                                             s(Tensor(np.array(m2)), Tensor(np.array(v2)))).data)

    mean, var = rng.standard_normal(16), rng.uniform(0.1, 3, 16)
    same = w2(mean, var, mean, var)
    shift = w2([0.0], [1.0], [1.0], [1.0])
    scale = w2([0.0], [4.0], [0.0], [1.0])
    ok = softmax_err <= 1e-9 and cam_err <= 1e-12 and same == 0.0 and abs(shift - 1) <= 1e-12 \
        and abs(scale - 1) <= 1e-12
    verdict("exact identities", ok,
            f"softmax row-sum err {softmax_err:.1e} (<= 1e-9), zero-parameter CAM err {cam_err:.1e} (<= 1e-12), "
            f"W2(identical)={same}, W2 mean shift={shift!r}, W2 variances 4 vs 1={scale!r}")


def test_metric_oracle(verdict):
    rng = np.random.default_rng(11)
    rank_mismatch, worst = 0, 0.0
    for i in range(100):
        n, m = int(rng.integers(1, 21)), int(rng.integers(5, 51))
        n_labels = int(rng.integers(2, 10))
        dist = rng.random((n, m)) if i % 2 else rng.integers(0, 4, (n, m)).astype(float)  # odd: ties
        pl, gl = rng.integers(0, n_labels, n), rng.integers(0, n_labels, m)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ref = ev.naive_metrics(dist, pl.tolist(), gl.tolist())
            for k in (1, 5):
                rank_mismatch += ev.rank_k(dist, pl, gl, k) != ref[f"rank{k}"]
            if not np.isnan(ref["mAP"]):
                worst = max(worst, abs(ev.mean_ap(dist, pl, gl) - ref["mAP"]),
                            abs(ev.mean_inp(dist, pl, gl) - ref["mINP"]))
    verdict("metric oracle", rank_mismatch == 0 and worst <= 1e-10,
            f"100 instances up to 20x50, rank-1/5 mismatches {rank_mismatch} (exact), "
            f"max mAP/mINP diff {worst:.1e} (<= 1e-10)")


def test_overfit_run(verdict, overfit_root):
    cfg = config.load_config(overrides=DESK + ["train.total_iters=500"])
    ds = data.dataset_for_config(overfit_root, cfg)
    start = time.perf_counter()
    tr = trainer.Trainer(cfg, ds)
    tr.run()
    elapsed = time.perf_counter() - start
    rank1 = ev.evaluate(ev.embed_dataset(tr.model, ds))["rank1"]
    totals = [r["total"] for r in tr.history]
    final = float(np.mean(totals[-25:]))
    drop = 1 - final / totals[0]
    ok = rank1 == 1.0 and drop >= 0.8 and elapsed < 900
    verdict("overfit run", ok,
            f"8x4x24 clean, 500 iterations, training rank-1 {rank1:.3f} (= 1), loss {totals[0]:.3f} -> "
            f"{final:.3f} (mean of last 25), decrease {drop:.1%} (>= 80%), {elapsed:.0f}s (< 900s)")


def test_ablation_direction(verdict, tmp_path):
    root = tmp_path / "ablation"
    start = time.perf_counter()
    synthgait.build_dataset(16, 6, 24, root, seed=0, corruption=ABLATION_CORRUPTION)
    base = DESK + [f"train.total_iters={ABLATION_ITERS}", f"data.train_identities={ABLATION_TRAIN_IDS}"]
    datasets = {}
    scores = {name: [] for name in VARIANTS}
    for name, extra in VARIANTS.items():
        for seed in ABLATION_SEEDS:
            cfg = config.load_config(overrides=base + extra + [f"train.seed={seed}"])
            key = cfg.fusion.skeleton_branch
            if key not in datasets:
                datasets[key] = data.dataset_for_config(root, cfg)
            ds = datasets[key]
            tr = trainer.Trainer(cfg, ds)
            tr.run()
            held_out = [l for l in ds.labels if l not in set(tr.labels)]
            scores[name].append(ev.evaluate(ev.embed_dataset(tr.model, ds, held_out))["rank1"])
    elapsed = time.perf_counter() - start
    mean = {k: 100 * float(np.mean(v)) for k, v in scores.items()}
    checks = {
        "full >= silhouette-only": mean["full"] >= mean["silhouette-only"],
        "full >= no-wasserstein - 2pp": mean["full"] >= mean["no-wasserstein"] - 2,
        "add >= silhouette-only": mean["silhouette+skeleton (add)"] >= mean["silhouette-only"],
        "runtime < 2h": elapsed < 7200,
    }
    detail = ", ".join(f"{k} {v:.1f}%" for k, v in mean.items()) + " mean held-out rank-1 over seeds " \
        + f"{list(ABLATION_SEEDS)}; " + ", ".join(f"{k}: {'ok' if v else 'no'}" for k, v in checks.items()) \
        + f"; {elapsed / 60:.1f} min"
    verdict("ablation direction", all(checks.values()), detail)


def test_determinism_and_resume(verdict, overfit_root, tmp_path):
    cfg = config.load_config(overrides=DESK + ["train.dtype=float64", "train.total_iters=12"])
    ds = data.dataset_for_config(overfit_root, cfg)

    def run(until, path, resume=None):
        tr = trainer.Trainer(cfg, ds)
        if resume is not None:
            tr.restore(trainer.load_checkpoint(resume))
        tr.run(until)
        tr.save(path)
        return path.read_bytes()

    a = run(12, tmp_path / "a.gmck")
    b = run(12, tmp_path / "b.gmck")
    run(6, tmp_path / "mid.gmck")
    c = run(12, tmp_path / "c.gmck", resume=tmp_path / "mid.gmck")
    verdict("determinism", a == b and a == c,
            f"float64, 12 iterations: repeat run bit-identical {a == b}, "
            f"save at 6 + resume bit-identical to uninterrupted {a == c} ({len(a)} bytes)")
