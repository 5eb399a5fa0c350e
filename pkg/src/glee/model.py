"""Backbone + head composed into one trainable classifier."""

import copy

import numpy as np

from . import heads
from .backbone import PAD, EncodedBatch, encode, encode_backward
from .errors import ConfigurationError, StateError


class Classifier:
    """Forward/backward over a fixed pipeline: encode -> head -> class logits.

    With ``backbone=None`` the inputs are precomputed feature vectors that
    serve as both the [CLS] and the [MASK] representation.

    Parameter names are ``backbone.<field>`` and ``head.<field>``.  A tied MLM
    head has no ``head.pred_w`` entry: its predictor is ``backbone.embedding``
    and both usage-site gradients are summed into that one entry.
    """

    def __init__(self, head, backbone=None, freeze_backbone=False):
        if backbone is None and head.spec.scheme == "mlm":
            raise ConfigurationError("an MLM head needs a token backbone", key="backbone")
        self.head = head
        self.backbone = backbone
        self.freeze_backbone = freeze_backbone or backbone is None
        self._cache = None

    @property
    def tied(self):
        return (
            self.backbone is not None
            and self.head.spec.scheme == "mlm"
            and self.head.pred_w is self.backbone.embedding
        )

    @property
    def num_classes(self):
        return self.head.num_classes

    def parameters(self):
        params = {}
        if not self.freeze_backbone:
            for name in self.backbone.ENCODER_NAMES:
                params["backbone." + name] = getattr(self.backbone, name)
        for name, arr in self.head.arrays().items():
            if name == "pred_w" and self.tied:
                continue
            if self.head.freeze_ln and name in ("ln_gamma", "ln_beta"):
                continue
            params["head." + name] = arr
        return params

    def copy(self):
        # one deepcopy call so tied arrays stay tied in the copy
        head, backbone = copy.deepcopy((self.head, self.backbone))
        return Classifier(head, backbone, self.freeze_backbone)

    def encode(self, inputs):
        if self.backbone is None:
            x = np.asarray(inputs, dtype=np.float64)
            return EncodedBatch(x, x)
        return encode(inputs, self.backbone)

    def forward(self, inputs):
        batch = self.encode(inputs)
        logits, hcache = heads.head_forward_cached(self.head, batch)
        self._cache = (batch, hcache)
        return logits

    def backward(self, dlogits):
        if self._cache is None:
            raise StateError("backward called before forward")
        batch, hcache = self._cache
        d_repr, hgrads = heads.head_backward(dlogits, hcache, self.head)
        grads = {"head." + k: v for k, v in hgrads.items()}
        if self.head.freeze_ln:
            grads.pop("head.ln_gamma", None)
            grads.pop("head.ln_beta", None)
        if self.tied:
            tok = grads.pop("head.pred_w")
            if self.freeze_backbone:
                return grads
            tok[PAD] = 0.0
        if not self.freeze_backbone:
            if self.head.spec.input_repr == "mask":
                bgrads = encode_backward(None, d_repr, batch, self.backbone)
            else:
                bgrads = encode_backward(d_repr, None, batch, self.backbone)
            grads.update({"backbone." + k: v for k, v in bgrads.items()})
            if self.tied:
                grads["backbone.embedding"] = grads["backbone.embedding"] + tok
        return grads

    def features(self, inputs):
        batch = self.encode(inputs)
        h = heads.select_repr(self.head, batch)
        return heads.head_features(self.head, h)

    def predict(self, inputs, batch_size=256):
        inputs = np.asarray(inputs)
        out = []
        for start in range(0, inputs.shape[0], batch_size):
            batch = self.encode(inputs[start:start + batch_size])
            out.append(heads.head_forward(self.head, batch).argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
