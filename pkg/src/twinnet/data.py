"""Datasets: binarized MNIST from IDX files, character corpora, delayed copy.

Everything becomes a :class:`SequenceDataset` of integer sequences, which
:func:`batch_iter` turns into padded :class:`SequenceBatch` objects.
"""
from __future__ import annotations

import gzip
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_SIDE = 28


class DataFormatError(ValueError):
    pass


@dataclass
class SequenceBatch:
    tokens: np.ndarray                  # (B, T) int64, pad_id where mask == 0
    mask: np.ndarray                    # (B, T) float64 in {0, 1}
    lengths: np.ndarray                 # (B,)
    cond: np.ndarray | None = None      # (B, C)
    pad_id: int = -1
    index: np.ndarray | None = None     # dataset rows in this batch

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def validate(self) -> None:
        B, T = self.tokens.shape
        expected = (np.arange(T)[None, :] < self.lengths[:, None]).astype(np.float64)
        if self.mask.shape != (B, T) or not np.array_equal(self.mask, expected):
            raise ValueError("mask does not match lengths")
        if np.any(self.tokens[self.mask == 0] != self.pad_id):
            raise ValueError("padded positions must hold pad_id")

    @classmethod
    def from_sequences(cls, seqs, cond=None, pad_id: int = -1, index=None) -> "SequenceBatch":
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        T = int(lengths.max()) if len(seqs) else 0
        tokens = np.full((len(seqs), T), pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            tokens[i, :len(s)] = s
        mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
        return cls(tokens, mask, lengths, cond, pad_id, index)


@dataclass
class Vocab:
    symbols: list[str]
    counts: np.ndarray

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def sos(self) -> int:
        return len(self.symbols)

    @property
    def eos(self) -> int:
        return len(self.symbols) + 1

    @property
    def pad(self) -> int:
        return len(self.symbols) + 2

    def frequency(self, symbol_id: int) -> int:
        return int(self.counts[symbol_id])

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self.index[ch] for ch in text], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in ids)


@dataclass
class SequenceDataset:
    sequences: list[np.ndarray]
    num_classes: int
    output: str = "softmax"
    cond: np.ndarray | None = None
    labels: np.ndarray | None = None
    vocab: Vocab | None = None
    name: str = "dataset"
    # epoch -> sequences, for data that is resampled every epoch
    resample: Callable[[int], list[np.ndarray]] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.sequences)

    def sequences_for_epoch(self, epoch: int) -> list[np.ndarray]:
        return self.resample(epoch) if self.resample is not None else self.sequences

    def subset(self, rows) -> "SequenceDataset":
        rows = np.asarray(rows)
        seqs = [self.sequences[i] for i in rows]
        return SequenceDataset(
            seqs, self.num_classes, self.output,
            None if self.cond is None else self.cond[rows],
            None if self.labels is None else self.labels[rows],
            self.vocab, self.name,
            None if self.resample is None else (lambda e, f=self.resample: [f(e)[i] for i in rows]),
        )

    def batch(self, rows=None, pad_id: int = -1) -> SequenceBatch:
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        seqs = [self.sequences[i] for i in rows]
        cond = None if self.cond is None else self.cond[rows]
        return SequenceBatch.from_sequences(seqs, cond, pad_id, rows)


# ------------------------------------------------------------------ MNIST

def _open(path: str | os.PathLike):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DataFormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise DataFormatError(f"{path}: truncated file, {len(body)} of {need} data bytes")
    if len(body) > need:
        raise DataFormatError(f"{path}: {len(body) - need} trailing bytes beyond declared dimensions")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; returns uint8 (N, 28, 28) images and (N,) labels."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[1:] != (MNIST_SIDE, MNIST_SIDE):
        raise DataFormatError(f"unexpected image size {images.shape[1:]}")
    return images, labels


def mnist_files(root, split: str = "train") -> tuple[Path, Path]:
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    out = []
    for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
        for name in (f"{prefix}-{kind}", f"{prefix}-{kind}.gz"):
            if (root / name).exists():
                out.append(root / name)
                break
        else:
            raise FileNotFoundError(f"no {prefix}-{kind}[.gz] under {root}")
    return out[0], out[1]


def binarize(images: np.ndarray, mode: str = "fixed-threshold", seed: int = 0, epoch: int = 0
             ) -> np.ndarray:
    """Flatten row-major to (N, 784) and binarize to {0, 1}.

    ``fixed-threshold`` keeps pixels with intensity/255 > 0.5; ``stochastic``
    draws Bernoulli(intensity/255) with a generator seeded by (seed, epoch).
    """
    flat = np.asarray(images).reshape(len(images), -1).astype(np.float64) / 255.0
    if mode == "fixed-threshold":
        return (flat > 0.5).astype(np.uint8)
    if mode == "stochastic":
        rng = np.random.default_rng([seed, epoch])
        return (rng.random(flat.shape) < flat).astype(np.uint8)
    raise ValueError(f"unknown binarization mode {mode!r}")


def mnist_dataset(images: np.ndarray, labels: np.ndarray, mode: str = "fixed-threshold",
                  seed: int = 0, conditional: bool = False, name: str = "mnist") -> SequenceDataset:
    """Pixel sequences of length 784 over {0, 1}; one-hot labels as conditioning if asked."""
    bits = binarize(images, mode, seed, 0)
    cond = np.eye(10)[labels] if conditional else None
    resample = None
    if mode == "stochastic":
        def resample(epoch, images=images):
            return list(binarize(images, mode, seed, epoch).astype(np.int64))
    return SequenceDataset(list(bits.astype(np.int64)), 2, "bernoulli", cond,
                           np.asarray(labels), None, name, resample)


# ------------------------------------------------------------------ text

@dataclass
class TextCorpus:
    train: np.ndarray
    valid: np.ndarray
    vocab: Vocab
    train_text: str
    valid_text: str


def load_text(path, level: str = "char", encoding: str = "utf-8", valid_fraction: float = 0.0
              ) -> TextCorpus:
    """Character-level ids for a text file; frequencies count the training split only.

    Symbols are ordered by first appearance in the training split; characters
    that only occur in the validation split are added with count 0.
    """
    if level != "char":
        raise ValueError("only character-level corpora are supported")
    raw = Path(path).read_bytes()
    try:
        text = raw.decode(encoding)
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: cannot decode byte at position {exc.start} as {encoding}") from None
    if not text:
        raise DataFormatError(f"{path}: empty text file")
    cut = len(text) - int(round(len(text) * valid_fraction))
    train_text, valid_text = text[:cut], text[cut:]
    counts = Counter(train_text)
    symbols = list(dict.fromkeys(train_text + valid_text))
    vocab = Vocab(symbols, np.array([counts.get(s, 0) for s in symbols], dtype=np.int64))
    return TextCorpus(vocab.encode(train_text), vocab.encode(valid_text), vocab, train_text, valid_text)


def text_dataset(ids: np.ndarray, seq_len: int, vocab: Vocab, name: str = "text") -> SequenceDataset:
    """Cut a token stream into consecutive chunks; the last one may be shorter."""
    chunks = [np.asarray(ids[i:i + seq_len], dtype=np.int64) for i in range(0, len(ids), seq_len)]
    return SequenceDataset(chunks, len(vocab), "softmax", vocab=vocab, name=name)


def word_frequencies(text: str) -> Counter:
    return Counter(text.split())


# ------------------------------------------------------------------ delayed copy

def make_delayed_copy(n: int, length: int, offset: int, alphabet: int, seed: int) -> SequenceDataset:
    """Sequences where a marker at position p reappears exactly at p + offset.

    The marker is symbol ``alphabet - 1``; every other position holds a filler
    drawn uniformly from the remaining ``alphabet - 1`` symbols, and p is
    uniform on [0, length - offset).
    """
    if not 0 < offset < length:
        raise ValueError("need 0 < offset < length")
    if alphabet < 2:
        raise ValueError("alphabet needs at least a filler and a marker symbol")
    rng = np.random.default_rng(seed)
    marker = alphabet - 1
    seqs = rng.integers(0, alphabet - 1, size=(n, length))
    starts = rng.integers(0, length - offset, size=n)
    rows = np.arange(n)
    seqs[rows, starts] = marker
    seqs[rows, starts + offset] = marker
    return SequenceDataset(list(seqs.astype(np.int64)), alphabet, "softmax",
                           labels=starts, name=f"delayed-copy-T{length}-k{offset}-K{alphabet}")


def check_delayed_copy(seq: np.ndarray, offset: int, alphabet: int) -> bool:
    marks = np.flatnonzero(np.asarray(seq) == alphabet - 1)
    return len(marks) == 2 and marks[1] - marks[0] == offset


def delayed_copy_entropy(length: int, offset: int, alphabet: int) -> float:
    """Per-sequence entropy in nats: marker placement plus i.i.d. fillers."""
    return math.log(length - offset) + (length - 2) * math.log(alphabet - 1)


# ------------------------------------------------------------------ batching

def batch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(dataset: SequenceDataset, batch_size: int, seed: int = 0, epoch: int = 0,
               shuffle: bool = True, pad_id: int = -1) -> Iterator[SequenceBatch]:
    """Seeded per-epoch shuffle; the final partial batch is kept."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    seqs = dataset.sequences_for_epoch(epoch)
    order = batch_order(len(seqs), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        cond = None if dataset.cond is None else dataset.cond[rows]
        yield SequenceBatch.from_sequences([seqs[i] for i in rows], cond, pad_id, rows)
