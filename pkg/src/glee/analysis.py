"""Evaluation metrics, classifier weight-norm profiles and feature sampling."""

import csv
import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np
from scipy import stats

from .data import frequency_order
from .heads import class_weight_rows


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    head_f1: float
    tail_f1: float
    per_class_f1: np.ndarray
    n_test: int
    seed: int = None
    variant: str = ""

    METRICS = ("accuracy", "macro_f1", "head_f1", "tail_f1")

    def row(self):
        return [self.variant, self.seed] + [getattr(self, m) for m in self.METRICS]


def confusion_matrix(gold, pred, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(gold), np.asarray(pred)), 1)
    return cm


def per_class_f1(cm):
    """F1 of each class against all others; 0 when the class has no gold and no predicted positives."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / denom, 0.0)


def _subset_mean(values, classes):
    return float(np.mean(values[list(classes)])) if len(classes) else math.nan


def evaluate_predictions(gold, pred, num_classes, split=None, seed=None, variant=""):
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.size == 0:
        raise ValueError("cannot evaluate on an empty test set")
    f1 = per_class_f1(confusion_matrix(gold, pred, num_classes))
    head = split.head if split is not None else ()
    tail = split.tail if split is not None else ()
    return EvalReport(
        accuracy=float(np.mean(gold == pred)),
        macro_f1=float(np.mean(f1)),
        head_f1=_subset_mean(f1, head),
        tail_f1=_subset_mean(f1, tail),
        per_class_f1=f1,
        n_test=int(gold.size),
        seed=seed,
        variant=variant,
    )


def evaluate(model, test, split=None, seed=None, variant=""):
    """Argmax predictions of ``model`` on ``test`` scored against its labels."""
    pred = model.predict(test.inputs)
    return evaluate_predictions(test.labels, pred, test.num_classes, split, seed, variant)


def summarize(reports):
    """Across-seed mean, population std and variance per (variant, metric)."""
    by_variant = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r)
    rows = []
    for variant, group in by_variant.items():
        for metric in EvalReport.METRICS:
            vals = np.array([getattr(r, metric) for r in group])
            rows.append((variant, metric, float(vals.mean()), float(vals.std()), float(vals.var()), len(vals)))
    return rows


@dataclass
class NormProfile:
    class_ids: np.ndarray  # ordered by descending train count
    counts: np.ndarray
    norms: np.ndarray

    @property
    def ranks(self):
        return np.arange(self.class_ids.size)


def norm_profile(head, class_counts):
    norms = np.linalg.norm(class_weight_rows(head), axis=1)
    order = np.array(frequency_order(class_counts), dtype=np.int64)
    counts = np.asarray(class_counts)
    return NormProfile(order, counts[order].astype(np.int64), norms[order])


@dataclass
class NormSlope:
    pearson_r: float
    spearman_rho: float
    flat: bool = False


FLAT_RTOL = 1e-9


def norm_slope(profile):
    """Correlation of frequency rank with norm; negative means norms decay toward the tail."""
    if profile.norms.size < 3:
        raise ValueError("need at least 3 classes for a norm slope")
    # equal up to rounding (e.g. after full eta-norm) counts as flat
    if np.ptp(profile.norms) <= FLAT_RTOL * np.max(np.abs(profile.norms)):
        return NormSlope(0.0, 0.0, flat=True)
    ranks = profile.ranks
    return NormSlope(
        float(stats.pearsonr(ranks, profile.norms)[0]),
        float(stats.spearmanr(ranks, profile.norms)[0]),
    )


@dataclass
class FeatureSample:
    class_id: int
    values: np.ndarray  # [m x k] final pre-predictor features
    activated: np.ndarray  # [m x k] right after the activation (before any LayerNorm)
    dead: int  # of the k features, how many are exactly zero on every example
    extra: dict = field(default_factory=dict)


def feature_distribution(model, corpus, class_id, k=10):
    if not 0 <= class_id < corpus.num_classes:
        raise IndexError(f"unknown class {class_id}")
    idx = np.flatnonzero(corpus.labels == class_id)
    if idx.size < 2:
        raise ValueError(f"class {class_id} has fewer than 2 examples")
    feat, cache = model.features(corpus.inputs[idx])
    if k > feat.shape[1]:
        raise ValueError(f"k={k} exceeds the feature dimension {feat.shape[1]}")
    activated = cache["mlm"][2] if "mlm" in cache else cache["a"]
    values = feat[:, :k]
    dead = int(np.sum(np.all(values == 0.0, axis=0)))
    return FeatureSample(class_id, values, activated[:, :k], dead)


REPORT_HEADER = ["variant", "seed", "accuracy", "macro_f1", "head_f1", "tail_f1"]
NORM_HEADER = ["variant", "class", "rank", "count", "norm"]


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "" if x is None else str(x)


def write_reports_csv(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow([_fmt(v) for v in r.row()])


def read_reports_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [
        {"variant": r["variant"], "seed": int(r["seed"]) if r["seed"] else None,
         **{m: float(r[m]) for m in EvalReport.METRICS}}
        for r in rows
    ]


def write_norms_csv(path, profiles):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(NORM_HEADER)
        for variant, prof in profiles.items():
            for rank, (c, n, v) in enumerate(zip(prof.class_ids, prof.counts, prof.norms)):
                w.writerow([variant, int(c), rank, int(n), _fmt(v)])


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf"]


def write_norms_svg(path, profiles, width=640, height=400):
    """Line plot of norm vs class rank, one polyline per variant."""
    left, right, top, bottom = 60, 170, 20, 50
    max_rank = max(max(p.norms.size - 1, 1) for p in profiles.values())
    max_norm = max(float(p.norms.max()) for p in profiles.values()) or 1.0
    pw, ph = width - left - right, height - top - bottom

    def xy(rank, norm):
        return left + pw * rank / max_rank, top + ph * (1.0 - norm / max_norm)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">'
        "class rank (most frequent first)</text>",
        f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" transform="rotate(-90 14 {top + ph / 2:.1f})" '
        'text-anchor="middle">predictor row norm</text>',
        f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-size="10">{max_norm:.3g}</text>',
        f'<text x="{left - 6}" y="{top + ph}" text-anchor="end" font-size="10">0</text>',
    ]
    for i, (variant, prof) in enumerate(profiles.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join("%.2f,%.2f" % xy(r, v) for r, v in zip(prof.ranks, prof.norms))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 16 * (i + 1)
        out.append(f'<line x1="{width - right + 10}" y1="{ly - 4}" x2="{width - right + 30}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{width - right + 35}" y="{ly}" font-size="11">{escape(str(variant))}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")


def export_report(reports, profiles, path, format="csv"):
    """CSV: metrics table at ``path`` (plus ``<stem>_norms.csv`` for profiles); SVG: norm plot."""
    if format == "csv":
        if not reports:
            raise ValueError("no reports to export")
        write_reports_csv(path, reports)
        if profiles:
            stem = str(path)[:-4] if str(path).endswith(".csv") else str(path)
            write_norms_csv(stem + "_norms.csv", profiles)
    elif format == "svg":
        if not profiles:
            raise ValueError("no norm profiles to plot")
        write_norms_svg(path, profiles)
    else:
        raise ValueError(f"unknown report format {format!r}")
