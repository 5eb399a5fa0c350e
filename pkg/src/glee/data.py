"""Long-tailed synthetic corpora, head/tail splitting and few-shot sampling."""

import math
from dataclasses import dataclass

import numpy as np

from .backbone import CLS, PAD, Vocabulary, split_words, tokenize
from .errors import ConfigurationError, DegenerateError
from .heads import Template, Verbalizer, render_template
from .serialization import read_features, write_features

DEFAULT_TEMPLATE = "{x} . it was [MASK] ."
TEMPLATE_WORDS = (".", "it", "was")


@dataclass
class Dataset:
    inputs: np.ndarray  # token ids [n x L] or features [n x d]
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on the number of examples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, index, split=None):
        index = np.asarray(index, dtype=np.int64)
        return type(self)(self.inputs[index], self.labels[index], self.num_classes, split or self.split)


class Corpus(Dataset):
    @property
    def ids(self):
        return self.inputs


class FeatureSet(Dataset):
    @property
    def features(self):
        return self.inputs


@dataclass
class Splits:
    train: Dataset
    dev: Dataset
    test: Dataset

    @property
    def num_classes(self):
        return self.train.num_classes

    @property
    def class_counts(self):
        return self.train.class_counts + self.dev.class_counts + self.test.class_counts

    def map(self, fn):
        return Splits(fn(self.train), fn(self.dev), fn(self.test))


def power_law_counts(num_classes, exponent, total):
    """``ceil(total * (k+1)^-exponent / sum)`` examples for class ``k``."""
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes", key="data.classes")
    if not exponent >= 0:
        raise ConfigurationError("exponent must be >= 0", key="data.exponent")
    if total < num_classes:
        raise ConfigurationError(
            f"total={total} cannot give each of {num_classes} classes an example", key="data.total"
        )
    weights = np.arange(1, num_classes + 1, dtype=np.float64) ** -float(exponent)
    shares = total * weights / weights.sum()
    return np.array([max(1, math.ceil(s - 1e-9)) for s in shares], dtype=np.int64)


def synthetic_lexicon(num_classes, vocab_size=256, multi_token_every=3):
    """Vocabulary, verbalizer and template for synthetic corpora.

    Class ``k`` is verbalized as ``label<k>``; every ``multi_token_every``-th
    class also gets ``label<k>b`` so multi-token averaging is exercised.
    """
    words = list(TEMPLATE_WORDS)
    mapping = {}
    next_id = 4 + len(words)
    for k in range(num_classes):
        toks = [f"label{k}"]
        if multi_token_every and k % multi_token_every == multi_token_every - 1:
            toks.append(f"label{k}b")
        mapping[k] = list(range(next_id, next_id + len(toks)))
        next_id += len(toks)
        words.extend(toks)
    filler = vocab_size - 4 - len(words)
    if filler < 2 * num_classes:
        raise ConfigurationError(
            f"vocab_size={vocab_size} too small for {num_classes} classes", key="data.vocab_size"
        )
    words.extend(f"w{j}" for j in range(filler))
    return Vocabulary(words), Verbalizer(mapping), Template(DEFAULT_TEMPLATE)


def _stratified_indices(labels, num_classes, rng):
    train, dev, test = [], [], []
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        n_tenth = idx.size // 10
        n_test = max(1, n_tenth)
        n_dev = n_tenth if idx.size - n_test - n_tenth >= 1 else 0
        test.extend(idx[:n_test])
        dev.extend(idx[n_test:n_test + n_dev])
        train.extend(idx[n_test + n_dev:])
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in (train, dev, test)]


def stratified_split(data, seed):
    """80/10/10 split per class; every class keeps at least one test example."""
    rng = np.random.default_rng([seed, 7])
    tr, dv, te = _stratified_indices(data.labels, data.num_classes, rng)
    return Splits(data.subset(tr, "train"), data.subset(dv, "dev"), data.subset(te, "test"))


def generate_longtail(
    num_classes,
    exponent,
    total,
    vocab,
    verbalizer,
    seed,
    max_len=24,
    min_words=6,
    max_words=14,
    verbalizer_prob=0.08,
    topic_prob=0.3,
    confuse_prob=0.12,
):
    """Power-law labelled corpus split into train/dev/test.

    Non-verbalizer words are carved into one small topic block per class and a
    shared background pool.  Each word of a class-``k`` example is a
    verbalizer token of ``k`` (``verbalizer_prob``), a topic word of ``k``
    (``topic_prob``), a topic word of class ``k+1`` (``confuse_prob``) or a
    background word.
    """
    counts = power_law_counts(num_classes, exponent, total)
    if verbalizer.num_classes != num_classes:
        raise ConfigurationError("verbalizer does not cover every class", key="data.classes")
    if max_words + 1 > max_len:
        raise ConfigurationError("max_words does not fit in max_len", key="data.max_len")
    verbal = {t for toks in verbalizer.tokens.values() for t in toks}
    reserved = verbal | {vocab.token_to_id[w] for w in TEMPLATE_WORDS if w in vocab}
    pool = np.array([i for i in range(4, len(vocab)) if i not in reserved], dtype=np.int64)
    topic_size = max(2, pool.size // (2 * num_classes))
    topics = pool[: topic_size * num_classes].reshape(num_classes, topic_size)
    background = pool[topic_size * num_classes:]
    if background.size == 0:
        raise ConfigurationError("vocabulary leaves no background words", key="data.vocab_size")

    rng = np.random.default_rng(seed)
    probs = [verbalizer_prob, topic_prob, confuse_prob, 1.0 - verbalizer_prob - topic_prob - confuse_prob]
    rows, labels = [], []
    for k in range(num_classes):
        own_verbal = np.array(verbalizer.tokens[k])
        for _ in range(counts[k]):
            m = int(rng.integers(min_words, max_words + 1))
            source = rng.choice(4, size=m, p=probs)
            words = np.empty(m, dtype=np.int64)
            for j, s in enumerate(source):
                if s == 0:
                    words[j] = own_verbal[rng.integers(own_verbal.size)]
                elif s == 1:
                    words[j] = topics[k, rng.integers(topic_size)]
                elif s == 2:
                    words[j] = topics[(k + 1) % num_classes, rng.integers(topic_size)]
                else:
                    words[j] = background[rng.integers(background.size)]
            row = np.full(max_len, PAD, dtype=np.int64)
            row[0] = CLS
            row[1:m + 1] = words
            rows.append(row)
            labels.append(k)
    corpus = Corpus(np.stack(rows), np.array(labels), num_classes, "all")
    return stratified_split(corpus, seed)


def apply_template(corpus, template, vocab, max_len=None):
    """Render every example through ``template``; the input is truncated so [MASK] always survives."""
    if not isinstance(template, Template):
        template = Template(template)
    max_len = max_len or corpus.ids.shape[1]
    n_fixed = len(split_words(template.pattern.replace("{x}", " ")))
    budget = max_len - 1 - n_fixed
    if budget < 0:
        raise ConfigurationError("template does not fit in max_len", key="data.max_len")
    rows = []
    for row in corpus.ids:
        words = vocab.decode(row).split()[:budget]
        rows.append(tokenize(render_template(template, " ".join(words)), vocab, max_len))
    return Corpus(np.array(rows, dtype=np.int64), corpus.labels, corpus.num_classes, corpus.split)


@dataclass(frozen=True)
class HeadTailSplit:
    head: tuple
    tail: tuple
    threshold: float
    order: tuple  # class ids by descending count, ties by ascending id


def frequency_order(class_counts):
    counts = np.asarray(class_counts)
    return tuple(sorted(range(counts.size), key=lambda k: (-counts[k], k)))


def compute_head_tail(class_counts, threshold=0.8):
    if not 0 < threshold < 1:
        raise ConfigurationError("threshold must lie in (0, 1)", key="data.threshold")
    counts = np.asarray(class_counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise DegenerateError("all class counts are zero")
    order = frequency_order(counts)
    cum = 0
    for i, k in enumerate(order):
        cum += int(counts[k])
        if cum / total >= threshold:
            break
    head = tuple(sorted(order[: i + 1]))
    tail = tuple(sorted(order[i + 1:]))
    return HeadTailSplit(head, tail, threshold, order)


def sample_fewshot(corpus, k=32, seed=0):
    """K training and K disjoint dev examples, uniformly without replacement."""
    n = len(corpus)
    if k < 1 or 2 * k > n:
        raise ConfigurationError(f"cannot draw 2*{k} disjoint examples from {n}", key="data.fewshot_k")
    perm = np.random.default_rng([seed, 32]).permutation(n)
    train = corpus.subset(np.sort(perm[:k]), "train")
    dev = corpus.subset(np.sort(perm[k:2 * k]), "dev")
    return train, dev


def write_corpus(path, corpus, vocab):
    with open(path, "w", encoding="utf-8") as f:
        for row, label in zip(corpus.ids, corpus.labels):
            f.write(f"{label}\t{vocab.decode(row)}\n")


def read_corpus(path, vocab, num_classes, max_len, split="train"):
    rows, labels = [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            label, _, text = line.partition("\t")
            labels.append(int(label))
            rows.append(tokenize(text, vocab, max_len))
    return Corpus(np.array(rows, dtype=np.int64).reshape(len(rows), max_len), np.array(labels), num_classes, split)


def ingest_features(path):
    """Load a GLEE feature file as a :class:`FeatureSet` (split ``all``)."""
    feats, labels, num_classes = read_features(path)
    return FeatureSet(feats, labels, num_classes, "all")


def export_features(path, data):
    write_features(path, data.features, data.labels, data.num_classes)
