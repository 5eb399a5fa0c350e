"""Training losses (cross entropy, focal) and post-hoc eta-norm calibration."""

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, DegenerateError
from .heads import class_weight_rows


@dataclass(frozen=True)
class LossSpec:
    kind: str = "cross_entropy"
    gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "focal"):
            raise ConfigurationError(f"unknown loss kind {self.kind!r}", key="loss.kind")
        if not math.isfinite(self.gamma):
            raise ConfigurationError("focal gamma must be finite", key="loss.gamma")
        if self.gamma < 0:
            raise ConfigurationError("focal gamma must be >= 0", key="loss.gamma")


@dataclass(frozen=True)
class CalibrationSpec:
    kind: str = "none"
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "eta_norm"):
            raise ConfigurationError(f"unknown calibration {self.kind!r}", key="calibrate.kind")
        if not math.isfinite(self.tau) or self.tau < 0:
            raise ConfigurationError("tau must be finite and >= 0", key="calibrate.tau")


def focal_loss(logits, targets, gamma):
    """Mean of -(1 - p_t)^gamma * log p_t and its gradient w.r.t. the logits."""
    if gamma < 0:
        raise ConfigurationError("focal gamma must be >= 0", key="loss.gamma")
    logp_all = kernels.log_softmax(logits)
    n, num_classes = logp_all.shape
    targets = kernels.check_targets(targets, n, num_classes)
    rows = np.arange(n)
    logp = logp_all[rows, targets]
    p = np.exp(logp)
    one_minus_p = -np.expm1(logp)
    weight = one_minus_p**gamma
    loss = -(weight * logp).mean()

    # d loss_i / d z_j = coef_i * (onehot_ij - softmax_ij)
    with np.errstate(divide="ignore", invalid="ignore"):
        extra = np.where(one_minus_p > 0, gamma * one_minus_p ** (gamma - 1.0) * p * logp, 0.0)
    coef = extra - weight
    dlogits = -np.exp(logp_all) * coef[:, None]
    dlogits[rows, targets] += coef
    return float(loss), dlogits / n


def loss_forward_backward(logits, targets, spec=None):
    spec = spec or LossSpec()
    if spec.kind == "focal":
        return focal_loss(logits, targets, spec.gamma)
    return kernels.softmax_cross_entropy(logits, targets)


def eta_norm_rows(rows, tau):
    """Divide each row by its L2 norm raised to ``tau``."""
    rows = np.asarray(rows, dtype=np.float64)
    if tau == 0:
        return rows.copy()
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise DegenerateError("cannot eta-normalize a zero-norm class row")
    return rows / (norms**tau)[:, None]


def eta_norm_calibrate(head, tau):
    """Calibrated copy of ``head``; weights only, biases untouched.

    For MLM heads the per-class effective row (mean verbalizer-token embedding
    row) is normalized by rescaling that class's logit, since the token rows
    themselves may be shared between classes.
    """
    if not math.isfinite(tau) or tau < 0:
        raise ConfigurationError("tau must be finite and >= 0", key="calibrate.tau")
    out = copy.copy(head)
    if head.spec.scheme == "mlm":
        rows = class_weight_rows(head)
        norms = np.linalg.norm(rows, axis=1)
        if tau and np.any(norms == 0):
            raise DegenerateError("cannot eta-normalize a zero-norm class row")
        base = np.ones(head.num_classes) if head.class_scale is None else head.class_scale
        out.class_scale = base / norms**tau
        return out
    out.pred_w = eta_norm_rows(head.pred_w, tau)
    return out
