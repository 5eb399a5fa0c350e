"""``glee`` command line: generate, pretrain, train, calibrate, analyze, fewshot.

Every command reads one flat config, writes under the output directory and
records the config hash in ``manifest.json``.  An output directory holding a
manifest with a different hash is refused.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources

import numpy as np

from . import __version__
from .analysis import (
    REPORT_HEADER,
    evaluate,
    feature_distribution,
    norm_profile,
    norm_slope,
    summarize,
    write_norms_csv,
    write_norms_svg,
    write_reports_csv,
)
from .config import ExperimentConfig, load_config
from .data import Splits, sample_fewshot, write_corpus
from .errors import ConfigurationError, GleeError
from .experiment import (
    calibrated,
    head_tail,
    parse_variant,
    prepare_backbone,
    prepare_data,
    run_cell,
)
from .heads import save_prompt_config
from .serialization import load_blocks, save_blocks
from .trainer import load_backbone, model_blocks, model_from_blocks, save_backbone

log = logging.getLogger("glee")

COMMANDS = ("generate", "pretrain", "train", "calibrate", "analyze", "fewshot")
EXIT_CONFIG = 2
EXIT_MANIFEST = 3


class ManifestMismatch(GleeError):
    pass


class Manifest:
    def __init__(self, out_dir, config_hash):
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {"config_hash": config_hash, "tool": "glee", "version": __version__, "commands": {}}
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as f:
                old = json.load(f)
            if old.get("config_hash") != config_hash:
                raise ManifestMismatch(
                    f"{out_dir} holds outputs of config {old.get('config_hash')}, "
                    f"this config is {config_hash}; use a fresh --output"
                )
            self.data["commands"] = old.get("commands", {})

    def mark(self, command, status, files=()):
        self.data["commands"][command] = {"status": status, "files": sorted(files)}
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, self.path)


class Run:
    """State shared by one command invocation."""

    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out = out_dir
        self.hash = cfg.config_hash()
        os.makedirs(out_dir, exist_ok=True)
        self.manifest = Manifest(out_dir, self.hash)
        self.files = []
        self._lab = None

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.files.append(os.path.join(*parts))
        return p

    @property
    def lab(self):
        if self._lab is None:
            self._lab = prepare_data(self.cfg)
        return self._lab

    def backbone(self):
        """Configured backbone; a synthetic pretraining result is cached in the output dir."""
        b = self.cfg.backbone
        if self.lab.is_features or b.path or b.random:
            return prepare_backbone(self.cfg, self.lab)
        cached = os.path.join(self.out, "backbone.glee")
        if os.path.exists(cached):
            return load_backbone(cached)
        backbone = prepare_backbone(self.cfg, self.lab)
        save_backbone(cached, backbone)
        self.files.append("backbone.glee")
        return backbone

    def checkpoint_path(self, variant, seed):
        return os.path.join(self.out, "checkpoints", f"{_slug(variant)}_s{seed}.glee")

    def save_model(self, variant, seed, model):
        blocks, meta = model_blocks(model)
        meta.update(type="model", variant=variant, seed=seed, config_hash=self.hash)
        path = self.checkpoint_path(variant, seed)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_blocks(path, blocks, meta)
        self.files.append(os.path.relpath(path, self.out))

    def load_model(self, variant, seed):
        path = self.checkpoint_path(variant, seed)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing checkpoint {path}; run `glee train` first")
        blocks, meta = load_blocks(path)
        if meta.get("config_hash") != self.hash:
            raise ManifestMismatch(f"{path} was written by config {meta.get('config_hash')}")
        return model_from_blocks(blocks, meta)


def _slug(variant):
    return variant.replace("+", "-")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def cell_workers():
    raw = os.environ.get("GLEE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"GLEE_THREADS must be an integer, got {raw!r}", key="GLEE_THREADS") from None
    return max(1, n)


def _cell_job(job):
    cfg, lab, backbone, variant, seed, splits, train_cfg = job
    return run_cell(cfg, lab, backbone, variant, seed, splits, train_cfg)


def run_cells(jobs):
    """Run cells serially or over GLEE_THREADS processes; results come back in job order."""
    workers = min(cell_workers(), len(jobs))
    if workers <= 1:
        yield from map(_cell_job, jobs)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_cell_job, jobs)


# -- commands -----------------------------------------------------------------


def cmd_generate(run):
    lab = run.lab
    if lab.is_features:
        raise ConfigurationError("generate needs a token corpus, not a feature file", key="data.features")
    for split in ("train", "dev", "test"):
        write_corpus(run.path("corpus", f"{split}.tsv"), getattr(lab.splits, split), lab.vocab)
    lab.vocab.save(run.path("corpus", "vocab.txt"))
    save_prompt_config(run.path("corpus", "prompt.txt"), lab.template, lab.verbalizer, lab.vocab)
    counts = lab.splits.class_counts
    split = head_tail(lab, run.cfg.data.threshold)
    write_rows(
        run.path("class_counts.csv"),
        ["class", "train", "dev", "test", "total", "group"],
        [
            (c, lab.splits.train.class_counts[c], lab.splits.dev.class_counts[c],
             lab.splits.test.class_counts[c], counts[c], "head" if c in split.head else "tail")
            for c in range(lab.splits.num_classes)
        ],
    )


def cmd_pretrain(run):
    lab = run.lab
    if lab.is_features:
        raise ConfigurationError("pretrain needs a token corpus, not a feature file", key="data.features")
    losses = []
    cfg = replace(run.cfg, backbone=replace(run.cfg.backbone, path=None, random=False))
    backbone = prepare_backbone(cfg, lab, log=losses)
    save_backbone(run.path("backbone.glee"), backbone)
    write_rows(run.path("pretrain_log.csv"), ["step", "loss"], enumerate(losses))


def _report_outputs(run, reports, stem):
    write_reports_csv(run.path(f"{stem}.csv"), reports)
    write_rows(run.path(f"{stem}_summary.csv" if stem != "reports" else "summary.csv"),
               ["variant", "metric", "mean", "std", "var", "n"], summarize(reports))


def directional_rows(reports, lhs="cls_r+ptln", rhs="cls_r", metric="tail_f1"):
    """Mean/std comparison of ``lhs`` against ``rhs``; a failed ordering is flagged, not raised."""
    a = [getattr(r, metric) for r in reports if r.variant == lhs]
    b = [getattr(r, metric) for r in reports if r.variant == rhs]
    if not a or not b:
        return []
    holds = float(np.mean(a)) >= float(np.mean(b))
    return [(f"{metric}({lhs}) >= {metric}({rhs})", lhs, rhs, float(np.mean(a)), float(np.std(a)),
             float(np.mean(b)), float(np.std(b)), int(holds), "" if holds else "FLAGGED")]


DIRECTIONAL_HEADER = ["check", "lhs", "rhs", "lhs_mean", "lhs_std", "rhs_mean", "rhs_std", "holds", "flag"]
LOG_HEADER = ["variant", "seed", "epoch", "loss", "dev_macro_f1", "dev_accuracy"]


def _train_matrix(run, stem, cells):
    """Run ``cells`` (variant, seed, splits, train_cfg) and write reports as they finish."""
    cfg, lab = run.cfg, run.lab
    backbone = run.backbone()
    jobs = [(cfg, lab, backbone, v, s, splits, tc) for v, s, splits, tc in cells]
    reports, log_rows = [], []
    partial = run.path(f"{stem}.partial.csv")
    with open(partial, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for res in run_cells(jobs):
            reports.append(res.report)
            w.writerow([_fmt(v) for v in res.report.row()])
            f.flush()
            if stem == "reports":
                run.save_model(res.variant, res.seed, res.model)
            for e in res.log:
                log_rows.append((res.variant, res.seed, e["epoch"], e["loss"],
                                 e.get("dev_macro_f1", math.nan), e.get("dev_accuracy", math.nan)))
            log.info("%s seed %s: macro_f1 %.4f tail_f1 %.4f", res.variant, res.seed,
                     res.report.macro_f1, res.report.tail_f1)
    _report_outputs(run, reports, stem)
    write_rows(run.path(f"{stem}_train_log.csv"), LOG_HEADER, log_rows)
    direct = directional_rows(reports)
    if direct:
        write_rows(run.path(f"{stem}_directional.csv" if stem != "reports" else "directional.csv"),
                   DIRECTIONAL_HEADER, direct)
        for row in direct:
            if row[-1]:
                log.warning("directional check failed: %s (%.4f vs %.4f)", row[0], row[3], row[5])
    os.remove(partial)
    run.files.remove(os.path.relpath(partial, run.out))
    return reports


def cmd_train(run):
    cells = [(v, s, None, None) for v in run.cfg.variants for s in run.cfg.seeds]
    _train_matrix(run, "reports", cells)


CALIBRATION_HEADER = ["variant", "seed", "tau", "accuracy", "macro_f1", "head_f1", "tail_f1", "target"]


def cmd_calibrate(run):
    cfg, lab = run.cfg, run.lab
    split = head_tail(lab, cfg.data.threshold)
    rows = []
    for name in cfg.variants:
        variant = parse_variant(name)
        test = lab.for_variant(variant).test
        # MLM heads are calibrated through effective class rows, an extrapolation
        target = "effective_rows" if variant.spec.scheme == "mlm" else "rows"
        for seed in cfg.seeds:
            model = run.load_model(name, seed)
            for tau in cfg.calibrate_taus:
                r = evaluate(calibrated(model, tau), test, split, seed=seed, variant=name)
                rows.append((name, seed, tau, r.accuracy, r.macro_f1, r.head_f1, r.tail_f1, target))
    write_rows(run.path("calibration.csv"), CALIBRATION_HEADER, rows)


def _feature_classes(cfg, counts):
    if cfg.analyze.feature_classes:
        return list(cfg.analyze.feature_classes)
    order = np.lexsort((np.arange(counts.size), -counts))
    return [int(order[0]), int(order[-1])]


def cmd_analyze(run):
    cfg, lab = run.cfg, run.lab
    counts = lab.splits.train.class_counts
    classes = _feature_classes(cfg, counts)
    slopes, feats, dead = [], [], []
    for seed in cfg.seeds:
        profiles = {}
        for name in cfg.variants:
            variant = parse_variant(name)
            model = run.load_model(name, seed)
            if variant.eta:
                model = calibrated(model, cfg.calibrate.tau)
            prof = norm_profile(model.head, counts)
            profiles[name] = prof
            s = norm_slope(prof)
            slopes.append((name, seed, s.pearson_r, s.spearman_rho, int(s.flat)))
            if seed != cfg.seeds[0]:
                continue
            corpus = lab.for_variant(variant).train
            for c in classes:
                try:
                    fs = feature_distribution(model, corpus, c, cfg.analyze.feature_k)
                except ValueError as exc:
                    log.warning("skipping features of class %s: %s", c, exc)
                    continue
                dead.append((name, seed, c, fs.values.shape[0], fs.dead))
                for i, (vals, act) in enumerate(zip(fs.values, fs.activated)):
                    for j in range(vals.size):
                        feats.append((name, seed, c, i, j, vals[j], act[j]))
        write_norms_csv(run.path(f"norms_s{seed}.csv"), profiles)
        write_norms_svg(run.path(f"norms_s{seed}.svg"), profiles)
    write_rows(run.path("slopes.csv"), ["variant", "seed", "pearson_r", "spearman_rho", "flat"], slopes)
    write_rows(run.path("features.csv"),
               ["variant", "seed", "class", "example", "feature", "value", "activated"], feats)
    write_rows(run.path("dead_features.csv"), ["variant", "seed", "class", "n_examples", "dead"], dead)


def cmd_fewshot(run):
    cfg, lab = run.cfg, run.lab
    k = cfg.data.fewshot_k
    tc = replace(cfg.train, batch_size=cfg.fewshot.batch_size)
    cells = []
    for seed in cfg.seeds:
        # same seed and size -> same indices for raw and prompt-rendered corpora
        raw = Splits(*sample_fewshot(lab.splits.train, k, seed), lab.splits.test)
        prompt = None
        if not lab.is_features:
            prompt = Splits(*sample_fewshot(lab.prompt_splits.train, k, seed), lab.prompt_splits.test)
        for name in cfg.variants:
            splits = prompt if parse_variant(name).spec.needs_prompt and prompt else raw
            cells.append((name, seed, splits, tc))
    # variant-major order, matching `train`
    cells.sort(key=lambda c: (cfg.variants.index(c[0]), cfg.seeds.index(c[1])))
    _train_matrix(run, "fewshot", cells)


HANDLERS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "analyze": cmd_analyze,
    "fewshot": cmd_fewshot,
}


# -- entry point ----------------------------------------------------------------


def builtin_config(name):
    return resources.files("glee").joinpath("configs", f"{name}.cfg")


def resolve_config(arg):
    if arg is None:
        return ExperimentConfig()
    if not os.path.exists(arg):
        builtin = builtin_config(arg)
        if builtin.is_file():
            return load_config(str(builtin))
        raise ConfigurationError(f"config file {arg} does not exist", key="--config")
    return load_config(arg)


def _seeds(text):
    try:
        seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def build_parser():
    p = argparse.ArgumentParser(prog="glee", description="CLS-tuning vs prompt-tuning heads on long-tailed data.")
    p.add_argument("--version", action="version", version=f"glee {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write the synthetic corpus, vocabulary and prompt files",
        "pretrain": "MLM-pretrain the toy backbone and write its checkpoint",
        "train": "train and evaluate every (variant, seed) cell",
        "calibrate": "re-evaluate trained checkpoints under eta-norm over a tau grid",
        "analyze": "weight-norm profiles, slopes and feature samples",
        "fewshot": "K-shot sampling followed by the train/evaluate pipeline",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="config file, or the name of a shipped config (full_matrix)")
        sp.add_argument("--output", help="output directory (overrides the config)")
        sp.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 1,2,3,4,5")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="glee: %(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args.config)
        if args.seeds:
            cfg = replace(cfg, seeds=args.seeds)
        out = args.output or cfg.resolve(cfg.output)
        run = Run(cfg, out)
    except ConfigurationError as exc:
        print(f"glee: invalid config [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestMismatch as exc:
        print(f"glee: {exc}", file=sys.stderr)
        return EXIT_MANIFEST

    run.manifest.mark(args.command, "incomplete", run.files)
    try:
        HANDLERS[args.command](run)
    except ConfigurationError as exc:
        run.manifest.mark(args.command, "incomplete", run.files)
        print(f"glee: invalid config [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestMismatch as exc:
        run.manifest.mark(args.command, "incomplete", run.files)
        print(f"glee: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except Exception as exc:
        run.manifest.mark(args.command, "incomplete", run.files)
        print(f"glee: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    run.manifest.mark(args.command, "complete", run.files)
    return 0


if __name__ == "__main__":
    sys.exit(main())
