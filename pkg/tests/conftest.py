import numpy as np
import pytest

from glee.backbone import CLS, MASK, NUM_SPECIAL, PAD, init_backbone
from glee.heads import Verbalizer


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def directional_check(f, params, grads, rng, h=1e-3, frozen_rows=None):
    """Relative error between the analytic and central-difference derivative along a random direction.

    ``frozen_rows`` maps a parameter name to rows that are held fixed.
    """
    dirs = {k: rng.normal(size=p.shape) for k, p in params.items()}
    for k, rows in (frozen_rows or {}).items():
        if k in dirs:
            dirs[k][rows] = 0.0
    for k in dirs:
        dirs[k] /= np.linalg.norm(dirs[k]) or 1.0

    def shifted(sign):
        saved = {k: p.copy() for k, p in params.items()}
        for k, p in params.items():
            p += sign * h * dirs[k]
        out = f()
        for k, p in params.items():
            p[...] = saved[k]
        return out

    numeric = (shifted(1) - shifted(-1)) / (2 * h)
    analytic = sum(float(np.sum(grads[k] * dirs[k])) for k in params)
    return abs(numeric - analytic) / max(1e-7, abs(numeric) + abs(analytic))


def random_ids(rng, n, length, vocab_size, with_mask=False, min_tokens=2):
    rows = np.full((n, length), PAD, dtype=np.int64)
    for i in range(n):
        m = int(rng.integers(min_tokens, length - (1 if with_mask else 0)))
        rows[i, 0] = CLS
        rows[i, 1:m] = rng.integers(NUM_SPECIAL, vocab_size, size=m - 1)
        if with_mask:
            rows[i, m] = MASK
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone():
    bb = init_backbone(16, dim=8, seed=3)
    # trained-scale MLM transform and encoder (fresh 0.02 weights leave LN inputs nearly constant)
    r = np.random.default_rng(33)
    bb.mlm_dense_w = r.normal(0, 0.5, size=(8, 8))
    bb.mlm_ln_gamma = 1.0 + 0.2 * r.normal(size=8)
    bb.mlm_ln_beta = 0.1 * r.normal(size=8)
    bb.enc_w1 = r.normal(0, 0.3, size=(8, 8))
    bb.enc_w2 = r.normal(0, 0.3, size=(8, 8))
    bb.provenance = "pretrained"
    return bb


@pytest.fixture
def tiny_verbalizer():
    # class 1 is multi-token
    return Verbalizer({0: [4], 1: [5, 6], 2: [7]})


def model_for(variant, backbone, verbalizer, num_classes=3, seed=0, rng=None):
    """Classifier for a variant name; with ``rng`` all head arrays are resampled at trained scale."""
    from glee.experiment import parse_variant
    from glee.heads import build_head
    from glee.model import Classifier

    v = parse_variant(variant)
    head = build_head(v.spec, backbone, num_classes, seed=seed, verbalizer=verbalizer)
    model = Classifier(head, backbone).copy()
    if rng is not None:
        for name, arr in model.head.arrays().items():
            if name == "pred_w" and model.tied:
                continue
            base = 1.0 if name == "ln_gamma" else 0.0
            arr[...] = base + rng.normal(0.0, 0.5, size=arr.shape)
    return v, model


def model_gradcheck(model, inputs, labels, loss_spec, rng, h=1e-3, n_coords=3, kink=1e-2):
    """Worst relative error over one random direction and ``n_coords`` random coordinates.

    Returns None when a ReLU pre-activation lies within ``kink`` of zero, where
    central differences straddle the non-differentiable point.
    """
    from glee.backbone import PAD
    from glee.objectives import loss_forward_backward

    if model.head.spec.activation == "relu":
        _, cache = model.features(inputs)
        if np.min(np.abs(cache["z"])) < kink:
            return None

    def f():
        return loss_forward_backward(model.forward(inputs), labels, loss_spec)[0]

    _, dlogits = loss_forward_backward(model.forward(inputs), labels, loss_spec)
    grads = model.backward(dlogits)
    params = model.parameters()
    frozen = {"backbone.embedding": [PAD]}
    worst = directional_check(f, params, grads, rng, h=h, frozen_rows=frozen)
    names = sorted(params)
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        if name == "backbone.embedding" and idx[0] == PAD:
            continue
        old = p[idx]
        p[idx] = old + h
        fp = f()
        p[idx] = old - h
        fm = f()
        p[idx] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - grads[name][idx]) / max(1e-8, abs(num) + abs(grads[name][idx])))
    return worst
