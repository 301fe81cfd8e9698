"""Dataset ingestion: seeded synthetic sequence tasks and a TSV loader.

Synthetic tasks are generated, tokenized, and split deterministically
from a single seed, so any run is reproducible without touching the
network. The TSV path covers real small corpora: whitespace tokens are
hashed into the model vocabulary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mapping import _fnv1a64, derive_stream

__all__ = ["DatasetSpec", "Dataset", "load_dataset"]

PAD_TOKEN = 0
TOKEN_A = 1
TOKEN_B = 2
FILLER_START = 3

TASKS = ("keyword", "majority", "parity", "threshold", "toggle")


@dataclass(frozen=True)
class DatasetSpec:
    """What to load: a synthetic task or a TSV file, plus the split."""

    kind: str = "synthetic"
    seed: int = 0
    size: int = 2048
    vocab: int = 64
    seq_len: int = 16
    task: str = "majority"
    path: str | None = None
    text_col: str = "text"
    label_col: str = "label"
    split: tuple[float, float] = (0.875, 0.125)

    def __post_init__(self):
        if self.kind not in ("synthetic", "tsv"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "synthetic" and self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")
        if self.vocab < FILLER_START + 1:
            raise ValueError(f"vocab must be at least {FILLER_START + 1}")
        if self.kind == "tsv" and not self.path:
            raise ValueError("tsv dataset needs a path")


@dataclass
class Dataset:
    train_tokens: np.ndarray
    train_labels: np.ndarray
    eval_tokens: np.ndarray
    eval_labels: np.ndarray
    vocab: int
    seq_len: int
    classes: int
    label_names: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        counts = np.bincount(self.train_labels, minlength=self.classes).tolist()
        return {
            "vocab": self.vocab,
            "seq_len": self.seq_len,
            "classes": self.classes,
            "n_train": int(self.train_labels.shape[0]),
            "n_eval": int(self.eval_labels.shape[0]),
            "train_label_counts": counts,
        }


def _gen_synthetic(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(key=derive_stream(spec.seed, "synthetic", spec.task)))
    n, S, V = spec.size, spec.seq_len, spec.vocab
    tokens = rng.integers(FILLER_START, V, size=(n, S), dtype=np.int64)
    labels = rng.integers(0, 2, size=n, dtype=np.int64)

    if spec.task == "keyword":
        # Positive rows carry the marker token once; negatives never do.
        pos = rng.integers(0, S, size=n)
        for i in range(n):
            if labels[i]:
                tokens[i, pos[i]] = TOKEN_A
    elif spec.task == "majority":
        # Which of two tokens occurs more often. Counts are large and the
        # winner leads by exactly one, so the decision needs aggregation
        # precise to one part in seq_len on top of a big common mode.
        lo_min = max(1, S // 4)
        lo_max = max(lo_min + 1, S // 2 - 2)
        lows = rng.integers(lo_min, lo_max + 1, size=n)
        for i in range(n):
            lo = int(lows[i])
            hi = min(lo + 1, S - lo)
            if hi <= lo:
                lo, hi = 1, 2
            ca, cb = (hi, lo) if labels[i] else (lo, hi)
            slots = rng.permutation(S)
            tokens[i, slots[:ca]] = TOKEN_A
            tokens[i, slots[ca:ca + cb]] = TOKEN_B
            labels[i] = 1 if ca > cb else 0
    elif spec.task == "parity":
        counts = rng.integers(0, S // 2 + 1, size=n)
        for i in range(n):
            slots = rng.permutation(S)[: counts[i]]
            tokens[i, slots] = TOKEN_A
            labels[i] = int(counts[i]) % 2
    elif spec.task == "threshold":
        # Does the marker count exceed S//3? Counts sit within a few of
        # the threshold, so deciding needs the absolute count resolved to
        # one part in ~2*(S//3); graded margins make accuracy degrade
        # smoothly as precision is lost.
        t = S // 3
        w = max(2, S // 8)
        margins = rng.integers(1, w + 1, size=n)
        for i in range(n):
            c = t + int(margins[i]) if labels[i] else t - int(margins[i])
            slots = rng.permutation(S)[:c]
            tokens[i, slots] = TOKEN_A
            labels[i] = int(c > t)
    elif spec.task == "toggle":
        # Threshold counting with a rare label flip: a burst of toggle
        # tokens inverts the answer on a quarter of the rows. The toggle
        # must carry high leverage, so trained embeddings and activations
        # develop dominant features that stress shared-scale quantization
        # of the fine count signal living in the same tensors.
        t = S // 3
        w = max(2, S // 8)
        burst = 3
        margins = rng.integers(1, w + 1, size=n)
        above = rng.integers(0, 2, size=n, dtype=np.int64)
        flips = rng.random(n) < 0.25
        for i in range(n):
            c = t + int(margins[i]) if above[i] else t - int(margins[i])
            slots = rng.permutation(S)
            tokens[i, slots[:c]] = TOKEN_A
            if flips[i]:
                tokens[i, slots[c : c + burst]] = TOKEN_B
            labels[i] = int(c > t) ^ int(flips[i])
    return tokens, labels


def _tokenize_text(text: str, vocab: int) -> list[int]:
    return [FILLER_START + _fnv1a64(w.lower()) % (vocab - FILLER_START) for w in text.split()]


def _load_tsv(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray, list[str]]:
    with open(spec.path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"empty dataset: {spec.path}")
    header = lines[0].split("\t")
    try:
        ti, li = header.index(spec.text_col), header.index(spec.label_col)
    except ValueError:
        raise ValueError(f"columns {spec.text_col!r}/{spec.label_col!r} not in header {header}") from None
    rows, raw_labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) <= max(ti, li):
            raise ValueError(f"{spec.path}:{lineno}: expected {len(header)} tab-separated columns, got {len(cells)}")
        ids = _tokenize_text(cells[ti], spec.vocab)[: spec.seq_len]
        ids += [PAD_TOKEN] * (spec.seq_len - len(ids))
        rows.append(ids)
        raw_labels.append(cells[li])
    if not rows:
        raise ValueError(f"empty dataset: {spec.path}")
    names = sorted(set(raw_labels))
    lut = {s: i for i, s in enumerate(names)}
    return np.asarray(rows, dtype=np.int64), np.asarray([lut[s] for s in raw_labels], dtype=np.int64), names


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Build tokenized train/eval splits, deterministic in the seed."""
    if spec.kind == "synthetic":
        tokens, labels = _gen_synthetic(spec)
        names: list[str] = []
    else:
        tokens, labels, names = _load_tsv(spec)
    n = tokens.shape[0]
    perm = np.random.Generator(np.random.Philox(key=derive_stream(spec.seed, "split"))).permutation(n)
    n_train = int(round(spec.split[0] * n))
    tr, ev = perm[:n_train], perm[n_train:]
    classes = int(labels.max()) + 1 if labels.size else 2
    return Dataset(
        train_tokens=tokens[tr],
        train_labels=labels[tr],
        eval_tokens=tokens[ev],
        eval_labels=labels[ev],
        vocab=spec.vocab,
        seq_len=spec.seq_len,
        classes=max(classes, 2),
        label_names=names,
    )
