"""SGD training with identity-balanced batches, step decay and checkpoints.

Randomness comes from two numpy generators derived from ``train.seed``: one
for parameter initialization and one for batch sampling. The sampling
generator's state is stored in every checkpoint, so a resumed run draws the
same batches as an uninterrupted one.
"""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_text
from .data import Dataset, dataset_for_config, make_batch
from .diffcore import Tensor
from .errors import ContractViolation, FormatError
from .model import GaitModel

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GMCK"
CHECKPOINT_VERSION = 1


def sgd_step(params, grads, lr, weight_decay, momentum, buffers):
    """In-place momentum SGD on ``name -> array`` dicts.

    ``g' = g + wd * w``, ``v = momentum * v + g'``, ``w = w - lr * v``.
    Raises :class:`ContractViolation` before touching anything if a gradient
    is non-finite.
    """
    if set(params) != set(grads):
        raise ValueError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise ContractViolation(f"non-finite gradient for {name}: {bad} of {g.size} entries")
    for name, w in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * w
        v = buffers.get(name)
        v = g.copy() if v is None else momentum * v + g
        buffers[name] = v
        w -= lr * v
    return params


def clip_gradients(grads, max_norm):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return norm


def lr_at(iteration, cfg) -> float:
    """Initial rate times ``decay`` per milestone already reached."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    passed = sum(1 for m in cfg.milestones if m <= iteration)
    return cfg.lr * cfg.decay ** passed


def sample_batch(by_label, n_ids, n_per_id, rng):
    """P x K sampling: ``n_ids`` distinct identities, ``n_per_id`` sequences each.

    ``by_label`` maps a label to its sequence indices. Sequences are drawn
    without replacement unless an identity has fewer than ``n_per_id``.
    Returns ``(indices, labels)``.
    """
    labels = sorted(by_label)
    if len(labels) < n_ids:
        raise ValueError(f"batch needs {n_ids} identities, dataset has {len(labels)}")
    chosen = rng.choice(len(labels), size=n_ids, replace=False)
    idx, lab = [], []
    for c in chosen:
        pool = by_label[labels[c]]
        picked = rng.choice(len(pool), size=n_per_id, replace=len(pool) < n_per_id)
        idx.extend(pool[p] for p in picked)
        lab.extend([labels[c]] * n_per_id)
    return idx, np.array(lab)


# --- checkpoint I/O -----------------------------------------------------------------


@dataclass
class Checkpoint:
    iteration: int
    params: dict  # name -> ndarray
    momentum: dict
    config_text: str
    rng_state: dict
    fingerprint: str = ""
    num_classes: int = 0
    extra: dict = field(default_factory=dict)


def _write_blob(fh, data: bytes):
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _write_entry(fh, name, arr):
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<II", arr.dtype.itemsize * 8, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(ckpt: Checkpoint, path):
    entries = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    entries += [(f"momentum/{k}", v) for k, v in sorted(ckpt.momentum.items())]
    meta = {"rng": ckpt.rng_state, "num_classes": ckpt.num_classes, "extra": ckpt.extra}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQI", CHECKPOINT_VERSION, ckpt.iteration, len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)
        _write_blob(fh, json.dumps(meta, sort_keys=True).encode())
        _write_blob(fh, ckpt.config_text.encode())
        _write_blob(fh, ckpt.fingerprint.encode())
    tmp.replace(path)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def blob(self, what):
        (n,) = self.unpack("<I", what)
        return self.take(n, what)


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, iteration, count = r.unpack("<IQI", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    params, momentum = {}, {}
    for e in range(count):
        (nlen,) = r.unpack("<I", f"entry {e} name length")
        name = r.take(nlen, f"entry {e} name").decode("utf-8")
        bits, rank = r.unpack("<II", f"entry {name} header")
        if bits not in (32, 64):
            raise FormatError(f"{path}: entry {name} has bit width {bits}")
        dims = r.unpack(f"<{rank}Q", f"entry {name} dims")
        dt = np.dtype("<f4" if bits == 32 else "<f8")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize, f"entry {name} values"), dtype=dt).reshape(dims)
        kind, _, key = name.partition("/")
        {"param": params, "momentum": momentum}.get(kind, {})[key] = arr.astype(dt.newbyteorder("="))
    try:
        meta = json.loads(r.blob("metadata"))
        config_text = r.blob("config").decode()
        fingerprint = r.blob("fingerprint").decode()
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata ({exc})") from exc
    return Checkpoint(iteration, params, momentum, config_text, meta["rng"], fingerprint,
                      meta.get("num_classes", 0), meta.get("extra", {}))


# --- training loop ------------------------------------------------------------------


def training_labels(dataset: Dataset, cfg: RunConfig):
    """Identities used for training; ``data.train_identities`` keeps the first n."""
    labels = dataset.labels
    n = cfg.data.train_identities
    if n:
        if n > len(labels):
            raise ValueError(f"data.train_identities={n} but the dataset has {len(labels)} identities")
        labels = labels[:n]
    return labels


class Trainer:
    """Owns the model, momentum buffers and sampling generator of one run."""

    def __init__(self, cfg: RunConfig, dataset: Dataset, model: GaitModel | None = None):
        self.cfg = cfg
        self.dataset = dataset
        self.labels = training_labels(dataset, cfg)
        if len(self.labels) < cfg.train.batch[0]:
            raise ValueError(f"batch needs {cfg.train.batch[0]} identities, training set has {len(self.labels)}")
        self.label_index = {lab: i for i, lab in enumerate(self.labels)}
        self.by_label = {lab: dataset.by_label[lab] for lab in self.labels}
        seed = cfg.train.seed
        self.model = model or GaitModel(cfg, len(self.labels), seed=[seed, 0])
        self.rng = np.random.default_rng([seed, 1])
        self.momentum = {}
        self.iteration = 0
        self.history = []

    def batch(self):
        t = self.cfg.train
        idx, labels = sample_batch(self.by_label, t.batch[0], t.batch[1], self.rng)
        sil, hm = make_batch(self.dataset, idx, t.frames, self.rng, self.model.dtype)
        return sil, hm, np.array([self.label_index[l] for l in labels])

    def step(self) -> dict:
        t = self.cfg.train
        sil, hm, labels = self.batch()
        self.model.zero_grad()
        out = self.model.forward(sil, hm if self.cfg.fusion.skeleton_branch else None)
        total, parts = self.model.loss(out, labels)
        if not np.isfinite(parts["total"]):
            raise ContractViolation(f"non-finite loss at iteration {self.iteration}: {parts}")
        total.backward()
        params = {k: p.data for k, p in self.model.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.model.params.items()}
        lr = lr_at(self.iteration, t)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            sgd_step(params, grads, lr, t.weight_decay, t.momentum, self.momentum)  # raises with diagnostics
        parts["grad_norm"] = clip_gradients(grads, t.clip_norm)
        sgd_step(params, grads, lr, t.weight_decay, t.momentum, self.momentum)
        record = {"iteration": self.iteration, "lr": lr, **parts}
        self.iteration += 1
        self.history.append(record)
        return record

    def checkpoint(self) -> Checkpoint:
        momentum = {k: self.momentum.get(k, np.zeros_like(p.data)) for k, p in self.model.params.items()}
        return Checkpoint(self.iteration, {k: p.data.copy() for k, p in self.model.params.items()},
                          {k: v.copy() for k, v in momentum.items()}, self.cfg.to_text(),
                          _jsonable(self.rng.bit_generator.state), self.cfg.fingerprint(),
                          self.model.num_classes, {"labels": [int(l) for l in self.labels]})

    def save(self, path):
        save_checkpoint(self.checkpoint(), path)

    def restore(self, ckpt: Checkpoint):
        if ckpt.fingerprint and ckpt.fingerprint != self.cfg.fingerprint():
            raise ValueError("checkpoint was written with a different configuration")
        names = set(self.model.params)
        if set(ckpt.params) != names:
            raise FormatError(f"checkpoint parameters differ from the model: {sorted(names ^ set(ckpt.params))}")
        for k, p in self.model.params.items():
            if ckpt.params[k].shape != p.data.shape:
                raise FormatError(f"{k}: checkpoint shape {ckpt.params[k].shape}, model {p.data.shape}")
            p.data = ckpt.params[k].astype(self.model.dtype, copy=True)
        self.momentum = {k: v.astype(self.model.dtype, copy=True) for k, v in ckpt.momentum.items()}
        self.rng.bit_generator.state = ckpt.rng_state
        self.iteration = ckpt.iteration

    def run(self, until=None, on_step=None):
        until = self.cfg.train.total_iters if until is None else until
        while self.iteration < until:
            rec = self.step()
            if on_step is not None:
                on_step(self, rec)
        return self.history


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, np.integer):
        return int(state)
    return state


def model_from_checkpoint(ckpt: Checkpoint) -> GaitModel:
    cfg = config_from_text(ckpt.config_text)
    model = GaitModel(cfg, ckpt.num_classes, seed=0)
    for k, p in model.params.items():
        p.data = ckpt.params[k].astype(model.dtype, copy=True)
    return model


def train(cfg: RunConfig, data_dir, out_dir, resume=None, dataset=None):
    """Run training from scratch (or from ``resume``), writing checkpoints and metrics.

    Checkpoints go to ``out_dir/ckpt_<iter>.gmck`` at each milestone and every
    ``train.checkpoint_every`` iterations, plus ``out_dir/final.gmck``.
    Metrics are appended to ``out_dir/metrics.jsonl`` every ``train.log_every``
    iterations. Returns the trainer.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset or dataset_for_config(data_dir, cfg)
    trainer = Trainer(cfg, dataset)
    if resume is not None:
        trainer.restore(load_checkpoint(resume))
    t = cfg.train
    (out / "config.txt").write_text(cfg.to_text())
    metrics = open(out / "metrics.jsonl", "a", encoding="utf-8")
    start = time.perf_counter()

    def on_step(tr, rec):
        it = tr.iteration
        if rec["iteration"] % t.log_every == 0 or it == t.total_iters:
            metrics.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics.flush()
            log.info("iter %d loss %.4f (%.1fs)", rec["iteration"], rec["total"], time.perf_counter() - start)
        if it in t.milestones or (t.checkpoint_every and it % t.checkpoint_every == 0):
            tr.save(out / f"ckpt_{it:06d}.gmck")

    try:
        trainer.run(t.total_iters, on_step)
    finally:
        metrics.close()
    trainer.save(out / "final.gmck")
    return trainer
