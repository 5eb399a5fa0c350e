"""Deterministic finetuning loop and GLEE-format checkpoints."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import evaluate, norm_profile
from .backbone import BackboneParams
from .errors import ConfigurationError, ShapeError, TrainingDivergedError
from .heads import HeadParams, HeadSpec, Verbalizer
from .model import Classifier
from .objectives import LossSpec, loss_forward_backward
from .optim import AdamW, clip_gradients, global_norm  # noqa: F401  (re-exported)
from .serialization import load_blocks, save_blocks


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-5
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    max_epochs: int = 10
    patience: int = 2
    warmup_epochs: int = 1
    seed: int = 0
    freeze_backbone: bool = False
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        for key in ("batch_size", "max_epochs", "patience"):
            if getattr(self, key) <= 0:
                raise ConfigurationError(f"{key} must be positive", key=f"train.{key}")
        if self.patience > self.max_epochs:
            raise ConfigurationError("patience exceeds max_epochs", key="train.patience")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("learning_rate, weight_decay and warmup_epochs must be >= 0")
        if self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive", key="train.grad_clip_norm")


@dataclass
class TrainResult:
    model: Classifier  # parameters of the best dev epoch
    log: list
    best_epoch: int
    best_metric: float


class Trainer:
    """Mini-batch AdamW with linear warmup, global-norm clipping and dev early stopping.

    Batch order of epoch ``e`` is a permutation drawn from ``(seed, e)`` alone,
    so a restored checkpoint continues exactly where the original run would.
    """

    def __init__(self, model, config, train_set, dev_set=None):
        if model.num_classes != train_set.num_classes:
            raise ShapeError(
                f"head predicts {model.num_classes} classes, data has {train_set.num_classes}"
            )
        self.model = model
        self.config = config
        self.train_set = train_set
        self.dev_set = dev_set if dev_set is not None and len(dev_set) else None
        self.params = model.parameters()
        self.opt = AdamW(self.params, weight_decay=config.weight_decay)
        self.steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
        self.warmup_steps = config.warmup_epochs * self.steps_per_epoch
        self.epoch = 0
        self.step_count = 0
        self.epoch_loss = 0.0
        self.best_metric = -math.inf
        self.best_epoch = -1
        self.best_model = None
        self.wait = 0
        self.log = []

    def lr_at(self, step):
        """Learning rate for 0-based global step ``step``."""
        lr = self.config.learning_rate
        if step < self.warmup_steps:
            return lr * (step + 1) / self.warmup_steps
        return lr

    def batch_order(self, epoch):
        return np.random.default_rng([self.config.seed, epoch]).permutation(len(self.train_set))

    def train_step(self, inputs, labels):
        logits = self.model.forward(inputs)
        loss, dlogits = loss_forward_backward(logits, labels, self.config.loss)
        if not math.isfinite(loss):
            batch = self.step_count - self.epoch * self.steps_per_epoch
            raise TrainingDivergedError(self.epoch, batch, loss)
        grads = self.model.backward(dlogits)
        grads = clip_gradients({k: grads[k] for k in self.params}, self.config.grad_clip_norm)
        self.opt.step(grads, self.lr_at(self.step_count))
        self.step_count += 1
        return loss

    def run_epoch(self):
        order = self.batch_order(self.epoch)
        bs = self.config.batch_size
        first = self.step_count - self.epoch * self.steps_per_epoch
        for b in range(first, self.steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            loss = self.train_step(self.train_set.inputs[idx], self.train_set.labels[idx])
            self.epoch_loss += loss * idx.size
        return self.end_epoch()

    def end_epoch(self):
        entry = {
            "epoch": self.epoch,
            "loss": self.epoch_loss / len(self.train_set),
            "norms": norm_profile(self.model.head, self.train_set.class_counts).norms.tolist(),
        }
        stop = False
        if self.dev_set is not None:
            report = evaluate(self.model, self.dev_set)
            entry["dev_macro_f1"] = report.macro_f1
            entry["dev_accuracy"] = report.accuracy
            if report.macro_f1 > self.best_metric:
                self.best_metric = report.macro_f1
                self.best_epoch = self.epoch
                self.best_model = self.model.copy()
                self.wait = 0
            else:
                self.wait += 1
                stop = self.wait >= self.config.patience
        self.log.append(entry)
        self.epoch += 1
        self.epoch_loss = 0.0
        return stop

    def fit(self):
        while self.epoch < self.config.max_epochs:
            if self.run_epoch():
                break
        if self.best_model is None:
            return TrainResult(self.model.copy(), self.log, self.epoch - 1, math.nan)
        return TrainResult(self.best_model, self.log, self.best_epoch, self.best_metric)

    def save(self, path):
        save_checkpoint(path, self)

    @classmethod
    def restore(cls, path, config, train_set, dev_set=None):
        ckpt = load_checkpoint(path)
        trainer = cls(ckpt.model, config, train_set, dev_set)
        trainer.opt.load_state(ckpt.opt_step, ckpt.moments_m, ckpt.moments_v)
        trainer.epoch = ckpt.epoch
        trainer.step_count = ckpt.step
        trainer.best_metric = ckpt.best_metric
        trainer.best_epoch = ckpt.best_epoch
        trainer.best_model = ckpt.best_model
        trainer.wait = ckpt.wait
        trainer.epoch_loss = ckpt.epoch_loss
        trainer.log = ckpt.log
        return trainer


def train(backbone, head, data, config):
    """Train copies of ``backbone``/``head`` on ``data.train`` with early stopping on ``data.dev``."""
    model = Classifier(head, backbone, config.freeze_backbone).copy()
    dev = getattr(data, "dev", None)
    return Trainer(model, config, data.train, dev).fit()


# -- checkpoints ------------------------------------------------------------


def model_blocks(model, prefix=""):
    blocks, meta = {}, {}
    if model.backbone is not None:
        for name, arr in model.backbone.arrays().items():
            blocks[f"{prefix}backbone.{name}"] = arr
        meta["provenance"] = model.backbone.provenance
    head = model.head
    for name, arr in head.arrays().items():
        if name == "pred_w" and model.tied:
            continue
        blocks[f"{prefix}head.{name}"] = arr
    if head.class_scale is not None:
        blocks[f"{prefix}head.class_scale"] = head.class_scale
    meta.update(
        spec=asdict(head.spec),
        num_classes=head.num_classes,
        tied=model.tied,
        freeze_ln=head.freeze_ln,
        freeze_backbone=model.freeze_backbone,
        verbalizer=head.verbalizer.to_json() if head.verbalizer is not None else None,
    )
    return blocks, meta


def _vec(block):
    return block.reshape(-1).copy()


_VECTOR_FIELDS = {"enc_b1", "enc_b2", "mlm_dense_b", "mlm_ln_gamma", "mlm_ln_beta"}


def backbone_from_blocks(blocks, meta, prefix=""):
    arrays = {}
    for name in BackboneParams.ENCODER_NAMES + BackboneParams.MLM_NAMES:
        key = f"{prefix}backbone.{name}"
        if key not in blocks:
            raise ShapeError(f"missing backbone block {key!r}")
        arrays[name] = _vec(blocks[key]) if name in _VECTOR_FIELDS else blocks[key].copy()
    return BackboneParams(**arrays, provenance=meta.get("provenance", "random"))


def model_from_blocks(blocks, meta, prefix=""):
    backbone = None
    if f"{prefix}backbone.embedding" in blocks:
        backbone = backbone_from_blocks(blocks, meta, prefix)
    head = head_from_blocks(blocks, meta, prefix, backbone)
    return Classifier(head, backbone, meta.get("freeze_backbone", False))


def head_from_blocks(blocks, meta, prefix="", backbone=None, num_classes=None):
    spec = HeadSpec(**meta["spec"])
    n_cls = meta["num_classes"]
    if num_classes is not None and num_classes != n_cls:
        raise ShapeError(f"checkpoint head has {n_cls} classes, expected {num_classes}")

    def get(name, vec=False):
        key = f"{prefix}head.{name}"
        if key not in blocks:
            return None
        return _vec(blocks[key]) if vec else blocks[key].copy()

    if meta.get("tied"):
        if backbone is None:
            raise ShapeError("a tied MLM head needs the backbone whose embedding it shares")
        pred_w = backbone.embedding
    else:
        pred_w = get("pred_w")
    d = get("dense_w").shape[0]
    if backbone is not None and backbone.dim != d:
        raise ShapeError(f"head dimension {d} does not match backbone dimension {backbone.dim}")
    if spec.scheme != "mlm" and pred_w.shape[0] != n_cls:
        raise ShapeError(f"predictor has {pred_w.shape[0]} rows, expected {n_cls}")
    if spec.scheme == "mlm" and backbone is not None and pred_w.shape[0] != backbone.vocab_size:
        raise ShapeError("MLM predictor does not match the vocabulary size")
    verbalizer = Verbalizer.from_json(meta["verbalizer"]) if meta.get("verbalizer") else None
    return HeadParams(
        spec=spec,
        dense_w=get("dense_w"),
        dense_b=get("dense_b", vec=True),
        pred_w=pred_w,
        ln_gamma=get("ln_gamma", vec=True),
        ln_beta=get("ln_beta", vec=True),
        pred_b=get("pred_b", vec=True),
        verbalizer=verbalizer,
        class_scale=get("class_scale", vec=True),
        freeze_ln=meta.get("freeze_ln", False),
        num_classes=n_cls,
    )


def save_model(path, model):
    blocks, meta = model_blocks(model)
    save_blocks(path, blocks, {"type": "model", **meta})


def load_model(path):
    blocks, meta = load_blocks(path)
    return model_from_blocks(blocks, meta)


def save_head(path, head):
    """Head-only checkpoint (a tied MLM head stores no predictor)."""
    tied = head.spec.scheme == "mlm" and head.spec.tied
    blocks = {f"head.{k}": v for k, v in head.arrays().items() if not (k == "pred_w" and tied)}
    if head.class_scale is not None:
        blocks["head.class_scale"] = head.class_scale
    meta = {
        "type": "head",
        "spec": asdict(head.spec),
        "num_classes": head.num_classes,
        "tied": tied,
        "freeze_ln": head.freeze_ln,
        "verbalizer": head.verbalizer.to_json() if head.verbalizer is not None else None,
    }
    save_blocks(path, blocks, meta)


def load_head(path, num_classes=None, backbone=None):
    blocks, meta = load_blocks(path)
    return head_from_blocks(blocks, meta, backbone=backbone, num_classes=num_classes)


def save_backbone(path, backbone):
    save_blocks(
        path,
        {f"backbone.{k}": v for k, v in backbone.arrays().items()},
        {"type": "backbone", "provenance": backbone.provenance},
    )


def load_backbone(path):
    blocks, meta = load_blocks(path)
    return backbone_from_blocks(blocks, meta)


@dataclass
class Checkpoint:
    model: Classifier
    best_model: Classifier
    moments_m: dict
    moments_v: dict
    opt_step: int
    epoch: int
    step: int
    best_metric: float
    best_epoch: int
    wait: int
    epoch_loss: float
    log: list


def save_checkpoint(path, trainer):
    blocks, meta = model_blocks(trainer.model)
    for name in trainer.params:
        blocks[f"adam.m.{name}"] = trainer.opt.m[name]
        blocks[f"adam.v.{name}"] = trainer.opt.v[name]
    if trainer.best_model is not None:
        bb, _ = model_blocks(trainer.best_model, prefix="best.")
        blocks.update(bb)
    meta.update(
        type="checkpoint",
        params=list(trainer.params),
        opt_step=trainer.opt.t,
        epoch=trainer.epoch,
        step=trainer.step_count,
        best_metric=trainer.best_metric,
        best_epoch=trainer.best_epoch,
        wait=trainer.wait,
        epoch_loss=trainer.epoch_loss,
        log=trainer.log,
        has_best=trainer.best_model is not None,
    )
    save_blocks(path, blocks, meta)


def load_checkpoint(path):
    blocks, meta = load_blocks(path)
    if meta.get("type") != "checkpoint":
        raise ShapeError(f"{path} is not a training checkpoint")
    model = model_from_blocks(blocks, meta)
    best = model_from_blocks(blocks, meta, prefix="best.") if meta["has_best"] else None

    def moments(kind):
        return {name: blocks[f"adam.{kind}.{name}"] for name in meta["params"]}

    return Checkpoint(
        model=model,
        best_model=best,
        moments_m=moments("m"),
        moments_v=moments("v"),
        opt_step=meta["opt_step"],
        epoch=meta["epoch"],
        step=meta["step"],
        best_metric=meta["best_metric"],
        best_epoch=meta["best_epoch"],
        wait=meta["wait"],
        epoch_loss=meta["epoch_loss"],
        log=meta["log"],
    )
