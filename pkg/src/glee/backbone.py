"""Toy masked-language-model backbone.

The encoder mean-pools token embeddings over non-[PAD] positions and passes
the pooled vector through a residual two-layer GELU MLP.  The [MASK]
representation is the same encoder applied to ``pooled + E[MASK]`` so that
prompt-mode inputs yield a vector distinct from the [CLS] one.
"""

import copy
import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EmptyInputError, InputStructureError
from .optim import AdamW, clip_gradients

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[MASK]")
PAD, UNK, CLS, MASK = 0, 1, 2, 3
NUM_SPECIAL = len(SPECIAL_TOKENS)
MAX_VOCAB = 4096

_TOKEN_RE = re.compile(r"\[(?:PAD|UNK|CLS|MASK)\]|\w+|[^\w\s]")


class Vocabulary:
    """Token <-> id map; ids 0-3 are the fixed special tokens."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        clash = set(tokens) & set(SPECIAL_TOKENS)
        if clash:
            raise ValueError(f"special tokens may not be redefined: {sorted(clash)}")
        if len(tokens) + NUM_SPECIAL > MAX_VOCAB:
            raise ValueError(f"vocabulary larger than {MAX_VOCAB}")
        self.id_to_token = list(SPECIAL_TOKENS) + tokens
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def id(self, token):
        return self.token_to_id.get(token, UNK)

    def decode(self, ids, skip_special=True):
        out = []
        for i in ids:
            i = int(i)
            if skip_special and i in (PAD, CLS):
                continue
            out.append(self.id_to_token[i])
        return " ".join(out)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token[NUM_SPECIAL:]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(line.rstrip("\n") for line in f if line.rstrip("\n"))


def split_words(text):
    return _TOKEN_RE.findall(text)


def tokenize(text, vocab, max_len):
    """[CLS] + word ids, truncated or [PAD]-padded to exactly ``max_len``."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    ids = [CLS] + [vocab.id(w) for w in split_words(text)]
    ids = ids[:max_len]
    return ids + [PAD] * (max_len - len(ids))


@dataclass
class BackboneParams:
    embedding: np.ndarray  # [V x d]; row PAD stays zero
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    mlm_dense_w: np.ndarray
    mlm_dense_b: np.ndarray
    mlm_ln_gamma: np.ndarray
    mlm_ln_beta: np.ndarray
    provenance: str = "random"

    ENCODER_NAMES = ("embedding", "enc_w1", "enc_b1", "enc_w2", "enc_b2")
    MLM_NAMES = ("mlm_dense_w", "mlm_dense_b", "mlm_ln_gamma", "mlm_ln_beta")

    @property
    def vocab_size(self):
        return self.embedding.shape[0]

    @property
    def dim(self):
        return self.embedding.shape[1]

    @property
    def predictor(self):
        # the MLM predictor is the embedding table itself
        return self.embedding

    def arrays(self):
        return {name: getattr(self, name) for name in self.ENCODER_NAMES + self.MLM_NAMES}

    def copy(self):
        return copy.deepcopy(self)


def init_backbone(vocab_size, dim=32, seed=0, embedding_std=None, identity_encoder=False):
    if dim < 4:
        raise ValueError("dim must be at least 4")
    if vocab_size <= NUM_SPECIAL or vocab_size > MAX_VOCAB:
        raise ValueError(f"vocab_size must be in ({NUM_SPECIAL}, {MAX_VOCAB}]")
    rng = np.random.default_rng(seed)
    std = dim**-0.5 if embedding_std is None else embedding_std
    emb = rng.normal(0.0, std, size=(vocab_size, dim))
    emb[PAD] = 0.0
    w1 = rng.normal(0.0, 0.02, size=(dim, dim))
    w2 = rng.normal(0.0, 0.02, size=(dim, dim))
    if identity_encoder:
        w2[...] = 0.0
    return BackboneParams(
        embedding=emb,
        enc_w1=w1,
        enc_b1=np.zeros(dim),
        enc_w2=w2,
        enc_b2=np.zeros(dim),
        mlm_dense_w=rng.normal(0.0, 0.02, size=(dim, dim)),
        mlm_dense_b=np.zeros(dim),
        mlm_ln_gamma=np.ones(dim),
        mlm_ln_beta=np.zeros(dim),
        provenance="random",
    )


@dataclass
class EncodedBatch:
    cls_repr: np.ndarray
    mask_repr: np.ndarray = None
    cache: dict = field(default=None, repr=False)


def _encoder(x, p):
    z1 = kernels.linear_forward(x, p.enc_w1, p.enc_b1)
    a1 = kernels.activation_forward(z1, "gelu")
    return x + kernels.linear_forward(a1, p.enc_w2, p.enc_b2), (x, z1, a1)


def encode(ids, params):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.size and (ids.min() < 0 or ids.max() >= params.vocab_size):
        raise IndexError(f"token id outside vocabulary of size {params.vocab_size}")
    nonpad = ids != PAD
    counts = nonpad.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyInputError("input has no non-[PAD] tokens")
    n_mask = (ids == MASK).sum(axis=1)
    if np.all(n_mask == 0):
        has_mask = False
    elif np.all(n_mask == 1):
        has_mask = True
    else:
        raise InputStructureError("every example must contain exactly one [MASK] (or none at all)")

    emb = params.embedding[ids] * nonpad[..., None]
    pooled = emb.sum(axis=1) / counts[:, None]
    n = ids.shape[0]
    x = np.vstack([pooled, pooled + params.embedding[MASK]]) if has_mask else pooled
    out, enc_cache = _encoder(x, params)
    cache = {"ids": ids, "nonpad": nonpad, "counts": counts, "has_mask": has_mask, "enc": enc_cache}
    return EncodedBatch(out[:n], out[n:] if has_mask else None, cache)


def encode_backward(d_cls, d_mask, batch, params):
    """Gradients of the encoder parameters given upstream grads on both representations."""
    c = batch.cache
    n = c["ids"].shape[0]
    d_cls = np.zeros((n, params.dim)) if d_cls is None else d_cls
    if c["has_mask"]:
        d_mask = np.zeros((n, params.dim)) if d_mask is None else d_mask
        dout = np.vstack([d_cls, d_mask])
    else:
        dout = d_cls
    x, z1, a1 = c["enc"]
    da1, dw2, db2 = kernels.linear_backward(dout, a1, params.enc_w2)
    dz1 = kernels.activation_backward(da1, z1, "gelu")
    dx_mlp, dw1, db1 = kernels.linear_backward(dz1, x, params.enc_w1)
    dx = dout + dx_mlp

    demb = np.zeros_like(params.embedding)
    d_pooled = dx[:n]
    if c["has_mask"]:
        d_pooled = d_pooled + dx[n:]
        demb[MASK] += dx[n:].sum(axis=0)
    per_pos = (d_pooled / c["counts"][:, None])[:, None, :] * c["nonpad"][..., None]
    np.add.at(demb, c["ids"].ravel(), per_pos.reshape(-1, params.dim))
    demb[PAD] = 0.0
    return {"embedding": demb, "enc_w1": dw1, "enc_b1": db1, "enc_w2": dw2, "enc_b2": db2}


def mlm_transform_forward(h, dense_w, dense_b, ln_gamma, ln_beta):
    """dense -> GELU -> LayerNorm; the feature that feeds the vocabulary predictor."""
    z = kernels.linear_forward(h, dense_w, dense_b)
    a = kernels.activation_forward(z, "gelu")
    return kernels.layer_norm_forward(a, ln_gamma, ln_beta), (h, z, a)


def mlm_transform_backward(dout, cache, dense_w, ln_gamma):
    h, z, a = cache
    da, dgamma, dbeta = kernels.layer_norm_backward(dout, a, ln_gamma)
    dz = kernels.activation_backward(da, z, "gelu")
    dh, dw, db = kernels.linear_backward(dz, h, dense_w)
    return dh, {"dense_w": dw, "dense_b": db, "ln_gamma": dgamma, "ln_beta": dbeta}


@dataclass
class PretrainConfig:
    vocab_size: int = 256
    dim: int = 32
    steps: int = 1500
    batch_size: int = 64
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0


def mask_one_token(ids, rng):
    """Replace one random non-special token per row with [MASK].

    Rows without a maskable token are dropped.  Returns ``(masked_ids, targets)``.
    """
    ids = np.array(ids, copy=True)
    keep, targets = [], []
    for i, row in enumerate(ids):
        positions = np.flatnonzero(row >= NUM_SPECIAL)
        if positions.size == 0:
            continue
        pos = positions[rng.integers(positions.size)]
        targets.append(row[pos])
        row[pos] = MASK
        keep.append(i)
    return ids[keep], np.asarray(targets, dtype=np.int64)


def mlm_loss_and_grads(params, masked_ids, targets):
    enc = encode(masked_ids, params)
    feat, tcache = mlm_transform_forward(
        enc.mask_repr, params.mlm_dense_w, params.mlm_dense_b, params.mlm_ln_gamma, params.mlm_ln_beta
    )
    logits = feat @ params.embedding.T
    loss, dlogits = kernels.softmax_cross_entropy(logits, targets)
    dfeat = dlogits @ params.embedding
    d_pred = dlogits.T @ feat
    dh, hgrads = mlm_transform_backward(dfeat, tcache, params.mlm_dense_w, params.mlm_ln_gamma)
    grads = encode_backward(None, dh, enc, params)
    # tied predictor: both usage sites land on the same table
    grads["embedding"] = grads["embedding"] + d_pred
    grads["embedding"][PAD] = 0.0
    grads.update({"mlm_" + k: v for k, v in hgrads.items()})
    return loss, grads, logits


def masked_token_accuracy(params, ids, seed=0):
    masked, targets = mask_one_token(ids, np.random.default_rng(seed))
    _, _, logits = mlm_loss_and_grads(params, masked, targets)
    return float(np.mean(logits.argmax(axis=1) == targets))


def mlm_pretrain(corpus, config=None, seed=0, log=None):
    """Synthetic MLM pretraining; returns new params with provenance ``pretrained``.

    ``corpus`` is anything with an ``ids`` array (rows of token ids).  When
    ``log`` is a list, the per-step losses are appended to it.
    """
    config = config or PretrainConfig()
    ids = np.asarray(corpus.ids)
    if ids.shape[0] == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    params = init_backbone(config.vocab_size, config.dim, seed)
    trainable = params.arrays()
    opt = AdamW(trainable, weight_decay=config.weight_decay)
    rng = np.random.default_rng([seed, 1])
    for _ in range(config.steps):
        rows = rng.integers(0, ids.shape[0], size=config.batch_size)
        masked, targets = mask_one_token(ids[rows], rng)
        if targets.size == 0:
            continue
        loss, grads, _ = mlm_loss_and_grads(params, masked, targets)
        if log is not None:
            log.append(loss)
        grads = clip_gradients(grads, config.grad_clip_norm)
        opt.step(grads, config.learning_rate)
    params.provenance = "pretrained"
    return params
