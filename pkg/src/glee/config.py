"""Flat ``key = value`` experiment configuration.

Lines are ``section.key = value``; ``#`` starts a comment.  Unknown keys and
malformed values are rejected with the offending key named.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace

from . import __version__
from .errors import ConfigurationError
from .objectives import CalibrationSpec, LossSpec
from .trainer import TrainConfig


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s):
    return [int(x) for x in s.replace(" ", "").split(",") if x]


def _float_list(s):
    return [float(x) for x in s.replace(" ", "").split(",") if x]


def _str_list(s):
    return [x.strip() for x in s.split(",") if x.strip()]


def _opt_str(s):
    return s.strip() or None


@dataclass
class DataSection:
    classes: int = 20
    exponent: float = 1.5
    total: int = 2000
    vocab_size: int = 256
    max_len: int = 24
    seed: int = 0
    threshold: float = 0.8
    fewshot_k: int = 32
    corpus_dir: str = None
    features: str = None


@dataclass
class BackboneSection:
    path: str = None
    random: bool = False
    dim: int = 32
    seed: int = 0
    pretrain_steps: int = 1500
    pretrain_total: int = 4000
    pretrain_exponent: float = 0.0
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 64


@dataclass
class AnalyzeSection:
    feature_k: int = 10
    feature_classes: list = None  # default: most and least frequent class


@dataclass
class FewshotSection:
    batch_size: int = 2


MATRIX_VARIANTS = [
    "cls_t", "cls_t+focal", "cls_t+eta", "cls_r", "cls_r+ln", "cls_r+ptln",
    "cls_r+prompt", "mlm", "mlm+ed", "mlm+focal",
]


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    calibrate: CalibrationSpec = field(default_factory=lambda: CalibrationSpec("eta_norm", 1.0))
    calibrate_taus: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)
    fewshot: FewshotSection = field(default_factory=FewshotSection)
    variants: list = field(default_factory=lambda: list(MATRIX_VARIANTS))
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    output: str = "glee_out"
    base_dir: str = "."

    def canonical(self):
        """Everything that determines results, as a JSON-friendly dict (output dir excluded)."""
        return {
            "data": vars(self.data),
            "backbone": vars(self.backbone),
            "train": {f.name: getattr(self.train, f.name) for f in fields(self.train) if f.name not in ("loss", "seed")},
            "loss": vars(self.loss),
            "calibrate": {"kind": self.calibrate.kind, "tau": self.calibrate.tau, "taus": self.calibrate_taus},
            "analyze": vars(self.analyze),
            "fewshot": vars(self.fewshot),
            "variants": self.variants,
            "seeds": self.seeds,
        }

    def config_hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob + __version__.encode()).hexdigest()[:16]

    def resolve(self, path):
        if path is None or os.path.isabs(path):
            return path
        return os.path.normpath(os.path.join(self.base_dir, path))


# key -> (section attribute, field name, parser)
_KEYS = {
    "data.classes": ("data", "classes", int),
    "data.exponent": ("data", "exponent", float),
    "data.total": ("data", "total", int),
    "data.vocab_size": ("data", "vocab_size", int),
    "data.max_len": ("data", "max_len", int),
    "data.seed": ("data", "seed", int),
    "data.threshold": ("data", "threshold", float),
    "data.fewshot_k": ("data", "fewshot_k", int),
    "data.corpus_dir": ("data", "corpus_dir", _opt_str),
    "data.features": ("data", "features", _opt_str),
    "backbone.path": ("backbone", "path", _opt_str),
    "backbone.random": ("backbone", "random", _bool),
    "backbone.dim": ("backbone", "dim", int),
    "backbone.seed": ("backbone", "seed", int),
    "backbone.pretrain_steps": ("backbone", "pretrain_steps", int),
    "backbone.pretrain_total": ("backbone", "pretrain_total", int),
    "backbone.pretrain_exponent": ("backbone", "pretrain_exponent", float),
    "backbone.pretrain_lr": ("backbone", "pretrain_lr", float),
    "backbone.pretrain_batch_size": ("backbone", "pretrain_batch_size", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.grad_clip_norm": ("train", "grad_clip_norm", float),
    "train.max_epochs": ("train", "max_epochs", int),
    "train.patience": ("train", "patience", int),
    "train.warmup_epochs": ("train", "warmup_epochs", int),
    "train.freeze_backbone": ("train", "freeze_backbone", _bool),
    "loss.kind": ("loss", "kind", str),
    "loss.gamma": ("loss", "gamma", float),
    "calibrate.kind": ("calibrate", "kind", str),
    "calibrate.tau": ("calibrate", "tau", float),
    "calibrate.taus": (None, "calibrate_taus", _float_list),
    "analyze.feature_k": ("analyze", "feature_k", int),
    "analyze.feature_classes": ("analyze", "feature_classes", _int_list),
    "fewshot.batch_size": ("fewshot", "batch_size", int),
    "variants": (None, "variants", _str_list),
    "seeds": (None, "seeds", _int_list),
    "output": (None, "output", str),
}

KNOWN_KEYS = tuple(_KEYS)


def parse_pairs(text, source="<config>"):
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value", key=key)
        if key not in _KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}", key=key)
        pairs[key] = value.strip()
    return pairs


def build_config(pairs, base_dir="."):
    raw = {"data": {}, "backbone": {}, "train": {}, "loss": {}, "calibrate": {}, "analyze": {}, "fewshot": {}}
    top = {}
    for key, value in pairs.items():
        section, name, parse = _KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key!r}: {exc}", key=key) from None
        (raw[section] if section else top)[name] = parsed
    cfg = ExperimentConfig(base_dir=base_dir)
    for section in ("data", "backbone", "analyze", "fewshot"):
        setattr(cfg, section, replace(getattr(cfg, section), **raw[section]))
    try:
        cfg.loss = replace(cfg.loss, **raw["loss"])
        cfg.calibrate = replace(cfg.calibrate, **raw["calibrate"])
        cfg.train = replace(cfg.train, loss=cfg.loss, **raw["train"])
    except ConfigurationError as exc:
        if exc.key and "." not in exc.key:
            exc.key = f"train.{exc.key}"
        raise
    for name, value in top.items():
        setattr(cfg, name, value)
    validate(cfg)
    return cfg


def validate(cfg):
    from .experiment import parse_variant

    if not cfg.seeds:
        raise ConfigurationError("seeds must not be empty", key="seeds")
    if not cfg.variants:
        raise ConfigurationError("variants must not be empty", key="variants")
    for v in cfg.variants:
        try:
            parse_variant(v)
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), key="variants") from None
    if not 0 < cfg.data.threshold < 1:
        raise ConfigurationError("threshold must lie in (0, 1)", key="data.threshold")
    for key, path in (("data.corpus_dir", cfg.data.corpus_dir), ("data.features", cfg.data.features),
                      ("backbone.path", cfg.backbone.path)):
        if path is not None and not os.path.exists(cfg.resolve(path)):
            raise ConfigurationError(f"{path} does not exist", key=key)
    if any(t < 0 for t in cfg.calibrate_taus):
        raise ConfigurationError("taus must be >= 0", key="calibrate.taus")
    if cfg.backbone.dim < 4:
        raise ConfigurationError("dim must be at least 4", key="backbone.dim")


def load_config(path):
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return build_config(parse_pairs(text, path), base_dir=os.path.dirname(os.path.abspath(path)))


def config_from_text(text, base_dir="."):
    return build_config(parse_pairs(text), base_dir=base_dir)
