"""Synthetic sequence tasks and their on-disk format.

Token ids 0-4 are reserved: PAD, the two regime sentinels (COPY, REVERSE),
BOS and EOS. Content tokens start at 5.

Dataset files hold one instance per line: source tokens, a tab, target
tokens, each whitespace-separated integers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from mae.models import BOS, COPY, EOS, FIRST_CONTENT, PAD, REVERSE, Batch

TASK_KINDS = ("copy", "reverse", "two-regime", "char-lm")
SPLITS = ("train", "dev", "test")


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab: int = 16
    min_len: int = 4
    max_len: int = 12
    train_size: int = 512
    dev_size: int = 128
    test_size: int = 128
    seed: int = 0
    text_path: Optional[str] = None
    context: int = 32

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "char-lm":
            if not self.text_path:
                raise ValueError("char-lm needs text_path")
            if self.context < 1:
                raise ValueError("context must be positive")
            return self
        if self.vocab <= FIRST_CONTENT:
            raise ValueError(f"vocab must exceed the {FIRST_CONTENT} reserved ids")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        if min(self.train_size, self.dev_size, self.test_size) < 0:
            raise ValueError("split sizes must be non-negative")
        return self

    def to_dict(self):
        return asdict(self)


def copy_target(seq):
    return list(seq)


def reverse_target(seq):
    return list(seq)[::-1]


def two_regime_target(sentinel: int, seq):
    if sentinel == COPY:
        return copy_target(seq)
    if sentinel == REVERSE:
        return reverse_target(seq)
    raise ValueError(f"unknown sentinel {sentinel}")


@dataclass
class Dataset:
    kind: str
    vocab: int
    arch: str  # "encdec" or "decoder"
    splits: dict  # split -> list of (src list, tgt list)

    def __getitem__(self, split):
        return self.splits[split]

    @property
    def max_len(self) -> int:
        return max(max(len(s), len(t)) for inst in self.splits.values() for s, t in inst)


def _unique_sequences(rng, spec: TaskSpec, count: int, with_sentinel: bool):
    content = spec.vocab - FIRST_CONTENT
    lengths = range(spec.min_len, spec.max_len + 1)
    capacity = sum(content ** n for n in lengths) * (2 if with_sentinel else 1)
    if count > capacity:
        raise ValueError(f"only {capacity} distinct sequences exist, {count} requested")
    seen, out = set(), []
    while len(out) < count:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        seq = tuple(int(x) for x in rng.integers(FIRST_CONTENT, spec.vocab, n))
        sentinel = COPY if len(out) % 2 == 0 else REVERSE
        key = (sentinel, seq) if with_sentinel else seq
        if key in seen:
            continue
        seen.add(key)
        out.append(key)
    return out


def _char_lm(spec: TaskSpec) -> Dataset:
    text = Path(spec.text_path).read_text(encoding="utf-8")
    chars = sorted(set(text))
    if not chars:
        raise ValueError(f"{spec.text_path} is empty")
    ids = {c: i + FIRST_CONTENT for i, c in enumerate(chars)}
    tokens = [ids[c] for c in text]
    w = spec.context + 1
    windows = [tokens[i : i + w] for i in range(0, len(tokens) - w + 1, w)]
    if len(windows) < 3:
        raise ValueError("text too short for three splits at this context size")
    n_train = int(len(windows) * 0.8)
    n_dev = max(1, (len(windows) - n_train) // 2)
    cuts = {"train": (0, n_train), "dev": (n_train, n_train + n_dev), "test": (n_train + n_dev, len(windows))}
    splits = {k: [(win[:-1], win[1:]) for win in windows[a:b]] for k, (a, b) in cuts.items()}
    return Dataset("char-lm", len(chars) + FIRST_CONTENT, "decoder", splits)


def generate_task(spec: TaskSpec) -> Dataset:
    """Seeded train/dev/test splits; no instance appears in two splits."""
    spec.validate()
    if spec.kind == "char-lm":
        return _char_lm(spec)
    rng = np.random.default_rng(spec.seed)
    total = spec.train_size + spec.dev_size + spec.test_size
    regimes = spec.kind == "two-regime"
    pool = _unique_sequences(rng, spec, total, regimes)
    instances = []
    for item in pool:
        if regimes:
            sentinel, seq = item
            instances.append(([sentinel, *seq], two_regime_target(sentinel, seq)))
        elif spec.kind == "copy":
            instances.append((list(item), copy_target(item)))
        else:
            instances.append((list(item), reverse_target(item)))
    a, b = spec.train_size, spec.train_size + spec.dev_size
    splits = {"train": instances[:a], "dev": instances[a:b], "test": instances[b:]}
    return Dataset(spec.kind, spec.vocab, "encdec", splits)


def _pad(rows, width=None):
    width = width or max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def to_batch(instances, arch: str = "encdec") -> Batch:
    if arch == "decoder":
        return Batch(_pad([s for s, _ in instances]), None, _pad([t for _, t in instances]))
    src = _pad([s for s, _ in instances])
    tgt_in = _pad([[BOS, *t] for _, t in instances])
    tgt_out = _pad([[*t, EOS] for _, t in instances])
    return Batch(src, tgt_in, tgt_out)


def make_batches(instances, batch_size: int, arch: str = "encdec", rng=None) -> list[Batch]:
    """Fixed-size batches in order, or shuffled by ``rng``."""
    order = np.arange(len(instances))
    if rng is not None:
        order = rng.permutation(len(instances))
    return [
        to_batch([instances[i] for i in order[k : k + batch_size]], arch)
        for k in range(0, len(instances), batch_size)
    ]


def write_split(path, instances):
    with open(path, "w", encoding="utf-8") as f:
        for src, tgt in instances:
            f.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def read_split(path):
    instances = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{line_no}: missing tab between source and target")
            src, tgt = line.split("\t", 1)
            instances.append(([int(x) for x in src.split()], [int(x) for x in tgt.split()]))
    return instances


def save_dataset(dataset: Dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, instances in dataset.splits.items():
        write_split(directory / f"{split}.tsv", instances)


def load_dataset(directory, kind: str, vocab: int, arch: str = "encdec") -> Dataset:
    directory = Path(directory)
    splits = {s: read_split(directory / f"{s}.tsv") for s in SPLITS if (directory / f"{s}.tsv").exists()}
    return Dataset(kind, vocab, arch, splits)
