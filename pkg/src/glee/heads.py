"""Classifier heads: CLS (Tanh/ReLU, optional LayerNorm), Hybrid, and MLM+verbalizer.

All heads map an encoded batch to an ``[n x C]`` matrix of class logits and
share one parameter layout, so the trainer and the analysis code never need
to branch on the head type.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .backbone import NUM_SPECIAL, mlm_transform_backward, mlm_transform_forward
from .errors import ConfigurationError, InputStructureError, TemplateError, VerbalizerError

SCHEMES = ("cls", "hybrid", "mlm")
LN_MODES = ("none", "fresh", "pretrained")
INIT_STD = 0.02


@dataclass(frozen=True)
class HeadSpec:
    scheme: str = "cls"
    activation: str = None
    ln_mode: str = "none"
    tied: bool = True
    input_repr: str = None

    def __post_init__(self):
        scheme = self.scheme.lower()
        if scheme not in SCHEMES:
            raise ConfigurationError(f"unknown head scheme {self.scheme!r}", key="scheme")
        object.__setattr__(self, "scheme", scheme)
        if scheme == "mlm":
            if self.activation not in (None, "gelu"):
                raise ConfigurationError("the MLM head is always GELU-activated", key="activation")
            object.__setattr__(self, "activation", "gelu")
            object.__setattr__(self, "ln_mode", "pretrained")
        else:
            act = (self.activation or "tanh").lower()
            if act not in ("tanh", "relu"):
                raise ConfigurationError(f"CLS heads use tanh or relu, not {act!r}", key="activation")
            object.__setattr__(self, "activation", act)
            if self.ln_mode not in LN_MODES:
                raise ConfigurationError(f"unknown ln_mode {self.ln_mode!r}", key="ln_mode")
            object.__setattr__(self, "tied", False)
        expected = "cls" if scheme == "cls" else "mask"
        if self.input_repr not in (None, expected):
            raise ConfigurationError(
                f"{scheme} heads read the {expected} representation", key="input_repr"
            )
        object.__setattr__(self, "input_repr", expected)

    @property
    def needs_prompt(self):
        return self.input_repr == "mask"

    def describe(self):
        if self.scheme == "mlm":
            return "mlm" if self.tied else "mlm+ed"
        base = "cls_" + self.activation[0]
        extra = {"none": "", "fresh": "+ln", "pretrained": "+ptln"}[self.ln_mode]
        return base + extra + ("+prompt" if self.scheme == "hybrid" else "")


class Verbalizer:
    """Class id -> tuple of vocabulary token ids."""

    def __init__(self, mapping):
        self.tokens = {}
        for cls_id, toks in sorted(mapping.items()):
            toks = tuple(int(t) for t in toks)
            if not toks:
                raise VerbalizerError(f"class {cls_id} has an empty token set")
            self.tokens[int(cls_id)] = toks
        if sorted(self.tokens) != list(range(len(self.tokens))):
            raise VerbalizerError("verbalizer must cover classes 0..C-1")

    @property
    def num_classes(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Verbalizer) and self.tokens == other.tokens

    def validate(self, vocab_size):
        for cls_id, toks in self.tokens.items():
            for t in toks:
                if not NUM_SPECIAL <= t < vocab_size:
                    raise VerbalizerError(f"class {cls_id} maps to invalid token id {t}")

    def to_json(self):
        return {str(k): list(v) for k, v in self.tokens.items()}

    @classmethod
    def from_json(cls, obj):
        return cls({int(k): v for k, v in obj.items()})


@dataclass(frozen=True)
class Template:
    pattern: str

    def __post_init__(self):
        if self.pattern.count("{x}") != 1:
            raise TemplateError("template needs exactly one {x} slot")
        if self.pattern.count("[MASK]") != 1:
            raise TemplateError("template needs exactly one [MASK]")


def render_template(t, x):
    if not isinstance(t, Template):
        t = Template(t)
    if "[MASK]" in x:
        raise TemplateError("input text already contains [MASK]")
    return t.pattern.replace("{x}", x)


_CLASS_LINE = re.compile(r"^class\s+(\d+)\s*:\s*(.*)$")


def load_prompt_config(path, vocab):
    """Parse ``template: ...`` / ``class <id>: tok, tok`` lines into (Template, Verbalizer)."""
    template, mapping = None, {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("template:"):
                template = Template(line[len("template:"):].strip())
                continue
            m = _CLASS_LINE.match(line)
            if not m:
                raise VerbalizerError(f"{path}:{lineno}: cannot parse {line!r}")
            words = [w.strip() for w in m.group(2).split(",") if w.strip()]
            missing = [w for w in words if w not in vocab]
            if missing:
                raise VerbalizerError(f"{path}:{lineno}: tokens not in vocabulary: {missing}")
            mapping[int(m.group(1))] = [vocab.token_to_id[w] for w in words]
    if template is None:
        raise TemplateError(f"{path}: no template line")
    verbalizer = Verbalizer(mapping)
    verbalizer.validate(len(vocab))
    return template, verbalizer


def save_prompt_config(path, template, verbalizer, vocab):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"template: {template.pattern}\n")
        for cls_id, toks in verbalizer.tokens.items():
            f.write(f"class {cls_id}: " + ", ".join(vocab.id_to_token[t] for t in toks) + "\n")


@dataclass
class HeadParams:
    spec: HeadSpec
    dense_w: np.ndarray
    dense_b: np.ndarray
    pred_w: np.ndarray  # [C x d] class rows, or the [V x d] embedding table for MLM
    ln_gamma: np.ndarray = None
    ln_beta: np.ndarray = None
    pred_b: np.ndarray = None
    verbalizer: Verbalizer = None
    class_scale: np.ndarray = None  # set by eta-norm calibration of MLM heads
    freeze_ln: bool = False
    num_classes: int = field(default=0)

    @property
    def has_ln(self):
        return self.ln_gamma is not None

    def arrays(self):
        """Name -> array for every parameter owned by the head (predictor included even when tied)."""
        out = {"dense_w": self.dense_w, "dense_b": self.dense_b, "pred_w": self.pred_w}
        if self.has_ln:
            out["ln_gamma"] = self.ln_gamma
            out["ln_beta"] = self.ln_beta
        if self.pred_b is not None:
            out["pred_b"] = self.pred_b
        return out


def build_head(spec, backbone, num_classes, seed=0, verbalizer=None, freeze_ln=False):
    d = backbone.dim
    if spec.scheme == "mlm":
        if verbalizer is None:
            raise ConfigurationError("an MLM head needs a verbalizer", key="verbalizer")
        if verbalizer.num_classes != num_classes:
            raise VerbalizerError(
                f"verbalizer covers {verbalizer.num_classes} classes, expected {num_classes}"
            )
        verbalizer.validate(backbone.vocab_size)
        pred = backbone.embedding if spec.tied else backbone.embedding.copy()
        return HeadParams(
            spec=spec,
            dense_w=backbone.mlm_dense_w.copy(),
            dense_b=backbone.mlm_dense_b.copy(),
            ln_gamma=backbone.mlm_ln_gamma.copy(),
            ln_beta=backbone.mlm_ln_beta.copy(),
            pred_w=pred,
            verbalizer=verbalizer,
            freeze_ln=freeze_ln,
            num_classes=num_classes,
        )

    if spec.ln_mode == "pretrained" and backbone.provenance != "pretrained":
        raise ConfigurationError(
            "ln_mode=pretrained needs a pretrained backbone, got provenance "
            f"{backbone.provenance!r}",
            key="ln_mode",
        )
    # Draw order is fixed so variants differing only in activation/LN start identical.
    rng = np.random.default_rng(seed)
    dense_w = rng.normal(0.0, INIT_STD, size=(d, d))
    pred_w = rng.normal(0.0, INIT_STD, size=(num_classes, d))
    gamma = beta = None
    if spec.ln_mode == "fresh":
        gamma, beta = np.ones(d), np.zeros(d)
    elif spec.ln_mode == "pretrained":
        gamma, beta = backbone.mlm_ln_gamma.copy(), backbone.mlm_ln_beta.copy()
    return HeadParams(
        spec=spec,
        dense_w=dense_w,
        dense_b=np.zeros(d),
        pred_w=pred_w,
        pred_b=np.zeros(num_classes),
        ln_gamma=gamma,
        ln_beta=beta,
        verbalizer=verbalizer,
        freeze_ln=freeze_ln,
        num_classes=num_classes,
    )


def verbalizer_reduce(token_logits, v):
    """Class logit = arithmetic mean of the logits of the class's tokens."""
    token_logits = np.asarray(token_logits, dtype=np.float64)
    out = np.empty((token_logits.shape[0], v.num_classes))
    for c, toks in v.tokens.items():
        out[:, c] = token_logits[:, list(toks)].mean(axis=1)
    return out


def verbalizer_reduce_backward(dclass, v, vocab_size):
    dtok = np.zeros((dclass.shape[0], vocab_size))
    for c, toks in v.tokens.items():
        for t in toks:
            dtok[:, t] += dclass[:, c] / len(toks)
    return dtok


def select_repr(params, batch):
    if params.spec.input_repr == "mask":
        if batch.mask_repr is None:
            raise InputStructureError(
                f"{params.spec.describe()} head needs a [MASK] representation; "
                "render inputs through a template first"
            )
        return batch.mask_repr
    return batch.cls_repr


def head_features(params, h):
    """Pre-predictor features plus the cache needed for backward."""
    if params.spec.scheme == "mlm":
        feat, tcache = mlm_transform_forward(
            h, params.dense_w, params.dense_b, params.ln_gamma, params.ln_beta
        )
        return feat, {"mlm": tcache}
    z = kernels.linear_forward(h, params.dense_w, params.dense_b)
    a = kernels.activation_forward(z, params.spec.activation)
    feat = kernels.layer_norm_forward(a, params.ln_gamma, params.ln_beta) if params.has_ln else a
    return feat, {"h": h, "z": z, "a": a}


def head_forward_cached(params, batch):
    h = select_repr(params, batch)
    feat, cache = head_features(params, h)
    if params.spec.scheme == "mlm":
        logits = verbalizer_reduce(feat @ params.pred_w.T, params.verbalizer)
    else:
        logits = feat @ params.pred_w.T + params.pred_b
    if params.class_scale is not None:
        logits = logits * params.class_scale
    cache["feat"] = feat
    return logits, cache


def head_forward(params, batch):
    return head_forward_cached(params, batch)[0]


def head_backward(dlogits, cache, params):
    """Returns ``(d_repr, grads)``; ``grads`` keys follow ``HeadParams.arrays``."""
    if params.class_scale is not None:
        dlogits = dlogits * params.class_scale
    feat = cache["feat"]
    grads = {}
    if params.spec.scheme == "mlm":
        dtok = verbalizer_reduce_backward(dlogits, params.verbalizer, params.pred_w.shape[0])
        grads["pred_w"] = dtok.T @ feat
        dfeat = dtok @ params.pred_w
        dh, hg = mlm_transform_backward(dfeat, cache["mlm"], params.dense_w, params.ln_gamma)
        grads.update(hg)
    else:
        grads["pred_w"] = dlogits.T @ feat
        grads["pred_b"] = dlogits.sum(axis=0)
        dfeat = dlogits @ params.pred_w
        if params.has_ln:
            da, grads["ln_gamma"], grads["ln_beta"] = kernels.layer_norm_backward(
                dfeat, cache["a"], params.ln_gamma
            )
        else:
            da = dfeat
        dz = kernels.activation_backward(da, cache["z"], params.spec.activation)
        dh, grads["dense_w"], grads["dense_b"] = kernels.linear_backward(
            dz, cache["h"], params.dense_w
        )
    return dh, grads


def class_weight_rows(params):
    """Per-class predictor rows; MLM heads use the mean embedding row of each class's tokens."""
    if params.spec.scheme != "mlm":
        return params.pred_w
    rows = np.stack([params.pred_w[list(t)].mean(axis=0) for _, t in params.verbalizer.tokens.items()])
    if params.class_scale is not None:
        rows = rows * params.class_scale[:, None]
    return rows

