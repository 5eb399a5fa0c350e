"""Dense float64 kernels with hand-written backward passes.

Every function is pure: inputs are never modified and the same inputs give
bitwise-identical outputs.  Matrices are 2-D ``np.ndarray`` of dtype float64,
vectors (biases, LayerNorm affinities) are 1-D.
"""

import math

import numpy as np

from .errors import DimensionError

ACTIVATIONS = ("tanh", "relu", "gelu")
LN_EPS = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _as_matrix(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def linear_forward(x, W, b):
    x = _as_matrix(x, "x")
    W = _as_matrix(W, "W")
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"x is {x.shape} but W is {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"bias has shape {b.shape}, expected ({W.shape[1]},)")
    return x @ W + b


def linear_backward(dout, x, W):
    """Returns ``(dx, dW, db)`` for ``out = x @ W + b``."""
    dout = _as_matrix(dout, "dout")
    x = _as_matrix(x, "x")
    if dout.shape != (x.shape[0], W.shape[1]):
        raise DimensionError(f"dout is {dout.shape}, expected {(x.shape[0], W.shape[1])}")
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def _check_kind(kind):
    kind = kind.lower()
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return kind


def gelu(x):
    # tanh approximation
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x**3)))


def activation_forward(x, kind):
    kind = _check_kind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    return gelu(x)


def activation_backward(dout, x, kind):
    kind = _check_kind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        return dout * (1.0 - np.tanh(x) ** 2)
    if kind == "relu":
        return dout * (x > 0.0)
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * dt)


def layer_norm_forward(x, gamma, beta, eps=LN_EPS):
    """Row-wise LayerNorm with population variance."""
    x = _as_matrix(x, "x")
    if x.shape[1] < 2:
        raise DimensionError("layer norm needs at least 2 features")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError("gamma/beta must match the feature dimension")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma + beta


def layer_norm_backward(dout, x, gamma, eps=LN_EPS):
    """Returns ``(dx, dgamma, dbeta)``; statistics are recomputed from ``x``."""
    x = _as_matrix(x, "x")
    dout = _as_matrix(dout, "dout")
    d = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = inv_std / d * (
        d * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def log_softmax(logits):
    logits = _as_matrix(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def check_targets(targets, n, num_classes):
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise DimensionError(f"targets have shape {targets.shape}, expected ({n},)")
    if n and (targets.min() < 0 or targets.max() >= num_classes):
        raise IndexError(f"target out of range [0, {num_classes})")
    return targets.astype(np.int64)


def softmax_cross_entropy(logits, targets):
    """Mean cross entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    n, num_classes = logp.shape
    targets = check_targets(targets, n, num_classes)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    return float(loss), dlogits / n
