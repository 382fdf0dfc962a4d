"""Run configuration: a flat ``section.key=value`` text format.

Every key has a default; unknown keys are rejected. ``RunConfig.to_text``
produces a canonical form used for fingerprints and stored in checkpoints.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .encoders import BackboneConfig
from .errors import ConfigError
from .heatmap import DEFAULT_SIGMA, SkeletonTopology, default_topology
from .losses import DEFAULT_MARGIN, LossWeights


@dataclass(frozen=True)
class FusionConfig:
    skeleton_branch: bool = True
    cam: bool = True
    mlm: bool = True
    reduction: int = 4
    scale: float = 0.0  # 0 means "use the channel count"


@dataclass(frozen=True)
class LossConfig:
    weights: LossWeights = LossWeights()
    margin: float = DEFAULT_MARGIN
    mining: str = "batch_all"
    wasserstein: bool = True
    wasserstein_stats: str = "batch"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    milestones: tuple = (20000, 40000)
    decay: float = 0.1
    total_iters: int = 60000
    batch: tuple = (8, 4)
    frames: int = 16
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 10
    checkpoint_every: int = 0
    clip_norm: float = 0.0  # 0 disables gradient-norm clipping

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("train.weight_decay and train.momentum must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"train.milestones must be strictly increasing, got {self.milestones}")
        if len(self.batch) != 2 or self.batch[0] < 2 or self.batch[1] < 2:
            raise ConfigError(f"train.batch needs identities >= 2 and samples >= 2, got {self.batch}")
        if self.total_iters < 0 or self.frames < 1 or self.log_every < 1:
            raise ConfigError("train.total_iters >= 0, train.frames >= 1 and train.log_every >= 1 required")
        if self.clip_norm < 0:
            raise ConfigError(f"train.clip_norm must be non-negative, got {self.clip_norm}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype must be float32 or float64, got {self.dtype}")


@dataclass(frozen=True)
class DataConfig:
    sigma: float = DEFAULT_SIGMA
    topology: str = "default"
    train_identities: int = 0  # 0: every identity is used for training
    eval_frames: int = 0  # 0: all frames of a sequence


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = BackboneConfig()
    fusion: FusionConfig = FusionConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()

    def topology(self) -> SkeletonTopology:
        if self.data.topology == "default":
            return default_topology()
        return SkeletonTopology.from_json(self.data.topology)

    def to_text(self) -> str:
        lines = [f"{key}={fmt(_get(self, path))}" for key, (path, _, fmt) in sorted(KEYS.items())]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, items) -> "RunConfig":
        return apply_overrides(self, items)


def _bool(text):
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _ints(text):
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _size(text):
    h, w = text.lower().split("x")
    return int(h), int(w)


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {t!r}")
        return t

    return parse


def _onoff(v):
    return "on" if v else "off"


def _join(v):
    return ",".join(str(i) for i in v)


def _hw(v):
    return f"{v[0]}x{v[1]}"


KEYS = {
    "model.sil_channels": (("backbone", "sil_channels"), _ints, _join),
    "model.ske_channels": (("backbone", "ske_channels"), _ints, _join),
    "model.parts": (("backbone", "parts"), int, str),
    "model.embed_dim": (("backbone", "embed_dim"), int, str),
    "model.sil_size": (("backbone", "sil_size"), _size, _hw),
    "model.ske_size": (("backbone", "ske_size"), _size, _hw),
    "model.skeleton_branch": (("fusion", "skeleton_branch"), _bool, _onoff),
    "fusion.cam": (("fusion", "cam"), _bool, _onoff),
    "fusion.mlm": (("fusion", "mlm"), _bool, _onoff),
    "fusion.reduction": (("fusion", "reduction"), int, str),
    "fusion.scale": (("fusion", "scale"), float, repr),
    "loss.alpha_triplet": (("loss", "weights", "triplet"), float, repr),
    "loss.alpha_ce": (("loss", "weights", "cross_entropy"), float, repr),
    "loss.alpha_wasserstein": (("loss", "weights", "wasserstein"), float, repr),
    "loss.margin": (("loss", "margin"), float, repr),
    "loss.mining": (("loss", "mining"), _choice("batch_all"), str),
    "loss.wasserstein": (("loss", "wasserstein"), _bool, _onoff),
    "loss.wasserstein_stats": (("loss", "wasserstein_stats"), _choice("batch", "identity"), str),
    "train.lr": (("train", "lr"), float, repr),
    "train.weight_decay": (("train", "weight_decay"), float, repr),
    "train.momentum": (("train", "momentum"), float, repr),
    "train.milestones": (("train", "milestones"), _ints, _join),
    "train.decay": (("train", "decay"), float, repr),
    "train.total_iters": (("train", "total_iters"), int, str),
    "train.batch": (("train", "batch"), _ints, _join),
    "train.frames": (("train", "frames"), int, str),
    "train.seed": (("train", "seed"), int, str),
    "train.dtype": (("train", "dtype"), _choice("float32", "float64"), str),
    "train.log_every": (("train", "log_every"), int, str),
    "train.checkpoint_every": (("train", "checkpoint_every"), int, str),
    "train.clip_norm": (("train", "clip_norm"), float, repr),
    "heatmap.sigma": (("data", "sigma"), float, repr),
    "heatmap.topology": (("data", "topology"), str, str),
    "data.train_identities": (("data", "train_identities"), int, str),
    "eval.frames": (("data", "eval_frames"), int, str),
}


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def parse_lines(lines, source="<config>"):
    items = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        items.append((key, value, f"{source}:{lineno}"))
    return items


def apply_overrides(cfg: RunConfig, items) -> RunConfig:
    """Apply ``(key, value[, where])`` pairs; validation runs once on the result."""
    raw = {}
    for item in items:
        key, value = item[0], item[1]
        where = item[2] if len(item) > 2 else key
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        path, parse, _ = KEYS[key]
        try:
            raw[path] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
    # build section by section so dataclass validation sees the final values
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    try:
        for path, value in raw.items():
            sections[path[0]] = _set_unvalidated(sections[path[0]], path[1:], value)
        out = RunConfig(**{k: _revalidate(v) for k, v in sections.items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    fus = out.fusion
    if (2 * out.backbone.embed_dim) % fus.reduction:
        raise ConfigError(f"fusion.reduction={fus.reduction} must divide 2*embed_dim")
    if fus.scale < 0:
        raise ConfigError("fusion.scale must be positive (or 0 for the channel count)")
    if out.data.topology != "default" and not Path(out.data.topology).exists():
        raise ConfigError(f"topology file not found: {out.data.topology}")
    if not out.data.sigma > 0:
        raise ConfigError(f"heatmap.sigma must be positive, got {out.data.sigma}")
    k_total = out.topology().total_channels
    if out.backbone.ske_in_channels != k_total:
        out = replace(out, backbone=replace(out.backbone, ske_in_channels=k_total))
    return out


def _set_unvalidated(obj, path, value):
    # nested frozen dataclasses: rebuild without triggering __post_init__ on the partial state
    if len(path) == 1:
        new = object.__new__(type(obj))
        for f in fields(obj):
            object.__setattr__(new, f.name, getattr(obj, f.name))
        object.__setattr__(new, path[0], value)
        return new
    return _set_unvalidated(obj, path[:1], _set_unvalidated(getattr(obj, path[0]), path[1:], value))


def _revalidate(obj):
    kwargs = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        kwargs[f.name] = _revalidate(v) if hasattr(v, "__dataclass_fields__") else v
    return type(obj)(**kwargs)


def load_config(path=None, overrides=()) -> RunConfig:
    items = []
    if path is not None:
        items = parse_lines(Path(path).read_text(encoding="utf-8").splitlines(), str(path))
    items += [(k, v, f"override {k}") for k, v in (_split_override(o) for o in overrides)]
    return apply_overrides(RunConfig(), items)


def config_from_text(text) -> RunConfig:
    return apply_overrides(RunConfig(), parse_lines(text.splitlines()))


def _split_override(text):
    if "=" not in text:
        raise ConfigError(f"override must be key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def describe_keys() -> str:
    """One line per key with its default, for ``--help`` output."""
    cfg = RunConfig()
    return "\n".join(f"  {key} (default {fmt(_get(cfg, path))})" for key, (path, _, fmt) in sorted(KEYS.items()))


__all__ = ["RunConfig", "FusionConfig", "LossConfig", "TrainConfig", "DataConfig", "KEYS",
           "load_config", "config_from_text", "apply_overrides", "describe_keys"]
