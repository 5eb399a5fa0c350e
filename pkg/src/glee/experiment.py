"""Head variants of the experiment matrix and the per-cell train/evaluate pipeline."""

import os
from dataclasses import dataclass, replace

import numpy as np

from .analysis import evaluate, norm_profile, norm_slope
from .backbone import PretrainConfig, Vocabulary, init_backbone, mlm_pretrain
from .data import (
    Corpus,
    Splits,
    apply_template,
    compute_head_tail,
    generate_longtail,
    ingest_features,
    read_corpus,
    stratified_split,
    synthetic_lexicon,
)
from .errors import ConfigurationError
from .heads import HeadSpec, build_head, load_prompt_config
from .model import Classifier
from .objectives import LossSpec, eta_norm_calibrate
from .trainer import Trainer, load_backbone

_BASES = {
    "cls_t": dict(scheme="cls", activation="tanh"),
    "cls_r": dict(scheme="cls", activation="relu"),
    "mlm": dict(scheme="mlm"),
}
_MODIFIERS = ("ln", "ptln", "prompt", "ed", "focal", "eta")


@dataclass(frozen=True)
class Variant:
    name: str
    spec: HeadSpec
    focal: bool = False
    eta: bool = False

    def loss(self, default):
        return LossSpec("focal", default.gamma) if self.focal else default


def parse_variant(name):
    """``cls_r+ptln``, ``mlm+ed``, ``cls_t+focal`` ... -> :class:`Variant`."""
    base, *mods = name.strip().split("+")
    if base not in _BASES:
        raise ConfigurationError(f"unknown variant base {base!r} in {name!r}")
    bad = [m for m in mods if m not in _MODIFIERS]
    if bad or len(set(mods)) != len(mods):
        raise ConfigurationError(f"bad variant modifiers {mods} in {name!r}")
    kw = dict(_BASES[base])
    is_mlm = base == "mlm"
    if ("ln" in mods or "ptln" in mods or "prompt" in mods) and is_mlm:
        raise ConfigurationError(f"{name!r}: ln/ptln/prompt apply to CLS heads only")
    if "ed" in mods and not is_mlm:
        raise ConfigurationError(f"{name!r}: embedding decoupling applies to MLM heads only")
    if "ln" in mods and "ptln" in mods:
        raise ConfigurationError(f"{name!r}: choose ln or ptln")
    if "ln" in mods:
        kw["ln_mode"] = "fresh"
    if "ptln" in mods:
        kw["ln_mode"] = "pretrained"
    if "prompt" in mods:
        kw["scheme"] = "hybrid"
    if "ed" in mods:
        kw["tied"] = False
    return Variant(name.strip(), HeadSpec(**kw), "focal" in mods, "eta" in mods)


@dataclass
class LabData:
    splits: Splits  # raw inputs ([CLS] x)
    prompt_splits: Splits  # template-rendered inputs; None for feature data
    vocab: Vocabulary = None
    verbalizer: object = None
    template: object = None

    @property
    def is_features(self):
        return self.vocab is None

    def for_variant(self, variant):
        if variant.spec.needs_prompt and not self.is_features:
            return self.prompt_splits
        return self.splits


def prepare_data(cfg):
    d = cfg.data
    if d.features:
        feats = ingest_features(cfg.resolve(d.features))
        return LabData(stratified_split(feats, d.seed), None)
    if d.corpus_dir:
        root = cfg.resolve(d.corpus_dir)
        vocab = Vocabulary.load(os.path.join(root, "vocab.txt"))
        template, verbalizer = load_prompt_config(os.path.join(root, "prompt.txt"), vocab)
        parts = [read_corpus(os.path.join(root, f"{s}.tsv"), vocab, verbalizer.num_classes, d.max_len, s)
                 for s in ("train", "dev", "test")]
        splits = Splits(*parts)
    else:
        vocab, verbalizer, template = synthetic_lexicon(d.classes, d.vocab_size)
        splits = generate_longtail(d.classes, d.exponent, d.total, vocab, verbalizer, d.seed, max_len=d.max_len)
    prompt = splits.map(lambda c: apply_template(c, template, vocab, d.max_len))
    return LabData(splits, prompt, vocab, verbalizer, template)


def pretraining_corpus(cfg, lab):
    b = cfg.backbone
    gen = generate_longtail(
        lab.verbalizer.num_classes, b.pretrain_exponent, b.pretrain_total, lab.vocab, lab.verbalizer,
        seed=b.seed + 10_000, max_len=cfg.data.max_len,
    )
    ids = np.concatenate([gen.train.ids, gen.dev.ids, gen.test.ids])
    labels = np.concatenate([gen.train.labels, gen.dev.labels, gen.test.labels])
    return Corpus(ids, labels, gen.num_classes, "pretrain")


def prepare_backbone(cfg, lab, log=None):
    b = cfg.backbone
    if lab.is_features:
        return None
    if b.path:
        return load_backbone(cfg.resolve(b.path))
    if b.random:
        return init_backbone(len(lab.vocab), b.dim, b.seed)
    pc = PretrainConfig(
        vocab_size=len(lab.vocab), dim=b.dim, steps=b.pretrain_steps,
        batch_size=b.pretrain_batch_size, learning_rate=b.pretrain_lr,
    )
    return mlm_pretrain(pretraining_corpus(cfg, lab), pc, seed=b.seed, log=log)


def head_tail(lab, threshold):
    return compute_head_tail(lab.splits.train.class_counts, threshold)


@dataclass
class CellResult:
    variant: str
    seed: int
    report: object
    model: Classifier  # trained, before any post-hoc calibration
    log: list
    best_epoch: int


def run_cell(cfg, lab, backbone, variant, seed, splits=None, train_cfg=None):
    """Build, train and evaluate one (variant, seed) cell."""
    if isinstance(variant, str):
        variant = parse_variant(variant)
    if variant.spec.scheme == "mlm" and lab.is_features:
        raise ConfigurationError(f"{variant.name}: MLM heads need a token backbone, not features",
                                 key="variants")
    if variant.spec.ln_mode == "pretrained" and backbone is None:
        raise ConfigurationError(f"{variant.name}: pretrained LN needs a backbone", key="variants")
    splits = splits or lab.for_variant(variant)
    tc = train_cfg or cfg.train
    tc = replace(tc, seed=seed, loss=variant.loss(cfg.loss))
    if backbone is None:
        dim = splits.train.inputs.shape[1]
        head = build_head(variant.spec, _FeatureDims(dim), splits.num_classes, seed=seed)
    else:
        head = build_head(variant.spec, backbone, splits.num_classes, seed=seed, verbalizer=lab.verbalizer)
    model = Classifier(head, backbone, tc.freeze_backbone).copy()
    result = Trainer(model, tc, splits.train, splits.dev).fit()
    scored = calibrated(result.model, cfg.calibrate.tau) if variant.eta else result.model
    split = head_tail(lab, cfg.data.threshold)
    report = evaluate(scored, splits.test, split, seed=seed, variant=variant.name)
    return CellResult(variant.name, seed, report, result.model, result.log, result.best_epoch)


def calibrated(model, tau):
    return Classifier(eta_norm_calibrate(model.head, tau), model.backbone, model.freeze_backbone)


class _FeatureDims:
    """Stand-in backbone for heads trained directly on feature vectors."""

    provenance = "random"

    def __init__(self, dim):
        self.dim = dim


def slope_of(model, class_counts):
    return norm_slope(norm_profile(model.head, class_counts))
