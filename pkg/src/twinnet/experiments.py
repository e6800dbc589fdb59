"""Datasets/models from a run config, and the desk-scale experiments.

The experiment functions return plain result objects; the acceptance tests
and the command line both drive them.
"""
from __future__ import annotations

import logging
import math
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, data_path
from .data import (SequenceDataset, delayed_copy_entropy, load_mnist_idx, load_text, make_delayed_copy,
                   mnist_dataset, mnist_files, text_dataset, word_frequencies)
from .diagnostics import frequency_cost_stats, rare_frequent_histogram, trace_dataset
from .model import ModelSpec, TwinModel, init_model
from .train import TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ data

@dataclass
class DataBundle:
    kind: str
    train: SequenceDataset
    valid: SequenceDataset
    test: SequenceDataset | None = None
    word_counts: Counter | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def output(self) -> str:
        return self.train.output

    @property
    def cond_dim(self) -> int:
        return 0 if self.train.cond is None else self.train.cond.shape[1]


def load_mnist_bundle(root, train_size: int, valid_size: int, test_size: int = 0,
                      conditional: bool = False, binarization: str = "fixed-threshold",
                      seed: int = 0) -> DataBundle:
    """First ``train_size`` training images for training, the last ``valid_size`` for validation."""
    images, labels = load_mnist_idx(*mnist_files(root, "train"))
    if train_size + valid_size > len(images):
        raise ValueError("train_size + valid_size exceeds the MNIST training split")
    tr = mnist_dataset(images[:train_size], labels[:train_size], binarization, seed, conditional, "mnist-train")
    va = mnist_dataset(images[len(images) - valid_size:], labels[len(images) - valid_size:], binarization,
                       seed, conditional, "mnist-valid")
    te = None
    if test_size:
        ti, tl = load_mnist_idx(*mnist_files(root, "test"))
        te = mnist_dataset(ti[:test_size], tl[:test_size], binarization, seed, conditional, "mnist-test")
    return DataBundle("mnist", tr, va, te, meta={"conditional": conditional})


def load_text_bundle(path, seq_len: int, valid_fraction: float, max_chars: int = 0) -> DataBundle:
    corpus = load_text(path, valid_fraction=valid_fraction)
    train_ids, train_text = corpus.train, corpus.train_text
    if max_chars and len(train_ids) > max_chars:
        train_ids, train_text = train_ids[:max_chars], train_text[:max_chars]
    tr = text_dataset(train_ids, seq_len, corpus.vocab, "text-train")
    va = text_dataset(corpus.valid, seq_len, corpus.vocab, "text-valid")
    return DataBundle("text", tr, va, word_counts=word_frequencies(train_text),
                      meta={"symbols": corpus.vocab.symbols, "train_chars": len(train_ids)})


def load_bundle(cfg: Config) -> DataBundle:
    d = cfg["dataset"]
    name = d["name"]
    if name == "mnist":
        return load_mnist_bundle(data_path(cfg, "mnist"), d["train_size"], d["valid_size"], d["test_size"],
                                 d["conditional"], d["binarization"], d["data_seed"])
    if name == "text":
        return load_text_bundle(data_path(cfg, "text/kjv.txt"), d["seq_len"], d["valid_fraction"],
                                d["max_chars"])
    if name == "delayed-copy":
        L, k, K = d["copy_length"], d["copy_offset"], d["copy_alphabet"]
        tr = make_delayed_copy(d["copy_count"], L, k, K, d["data_seed"])
        va = make_delayed_copy(d["copy_valid"], L, k, K, d["data_seed"] + 1_000_003)
        return DataBundle("delayed-copy", tr, va, meta={"optimal_nll": delayed_copy_entropy(L, k, K)})
    raise ConfigError("dataset.name", f"unknown dataset {name!r}")


# ------------------------------------------------------------------ model / trainer config

def model_spec(cfg: Config, bundle: DataBundle) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(num_classes=bundle.num_classes, output=bundle.output, cell=m["cell"],
                     hidden=m["hidden"], layers=m["layers"], embed_dim=m["embed_dim"],
                     cond_dim=bundle.cond_dim, dropout=m["dropout"],
                     share_embeddings=m["share_embeddings"], init=m["init"], precision=m["precision"])


def train_config(cfg: Config) -> TrainConfig:
    o, t = cfg["objective"], cfg["trainer"]
    try:
        return TrainConfig(alpha=o["alpha"], backward_mode=o["backward_mode"], g_mode=o["g_mode"],
                           noise_sigma=o["noise_sigma"], normalize_by_length=o["normalize_by_length"],
                           optimizer=t["optimizer"], lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"],
                           eps=t["eps"], rho=t["rho"], clip_norm=t["clip_norm"],
                           batch_size=t["batch_size"], epochs=t["epochs"],
                           lr_decay_epochs=t["lr_decay_epochs"], lr_decay_factor=t["lr_decay_factor"],
                           seed=t["seed"], patience=t["patience"], precision=cfg.get("model.precision"),
                           dropout=cfg.get("model.dropout"), eval_batch_size=t["eval_batch_size"])
    except ValueError as exc:
        raise ConfigError("trainer", str(exc)) from None


# ------------------------------------------------------------------ shared run helper

@dataclass
class RunOutcome:
    label: str
    seed: int
    log: list[dict]
    valid_nll: float
    seconds: float
    epoch_valid: list[float]
    extra: dict = field(default_factory=dict)


def _run(job) -> RunOutcome:
    label, spec, tcfg, bundle_fn, bundle_args, model_seed, extra_fn = job
    bundle = bundle_fn(*bundle_args)
    model = init_model(spec, model_seed)
    t0 = time.perf_counter()
    res = train(model, bundle.train, bundle.valid, tcfg, progress=True)
    secs = time.perf_counter() - t0
    valid = evaluate(res.model, bundle.valid, tcfg.eval_batch_size).nll
    extra = extra_fn(res, bundle) if extra_fn else {}
    log.info("%s seed %d: valid %.4f (%.0fs)", label, tcfg.seed, valid, secs)
    return RunOutcome(label, tcfg.seed, res.log, valid, secs, [r["valid_nll"] for r in res.log], extra)


def _map(jobs, workers: int):
    if workers <= 1:
        return [_run(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run, jobs))


def default_workers(n_jobs: int) -> int:
    return max(1, min(n_jobs, os.cpu_count() or 1))


# ------------------------------------------------------------------ sequential MNIST, desk scale

@dataclass
class MnistDeskResult:
    runs: list[RunOutcome]
    seconds: float

    def by(self, label: str) -> list[RunOutcome]:
        return [r for r in self.runs if r.label == label]

    @staticmethod
    def nll_decreases_after(run: RunOutcome, start_epoch: int = 2) -> bool:
        nll = [r["nll_f"] for r in run.log]
        return all(b < a for a, b in zip(nll[start_epoch - 1:], nll[start_epoch:]))

    @staticmethod
    def penalty_rises_then_falls(run: RunOutcome) -> bool:
        """Within epoch 1 the penalty climbs to a peak; later epochs end below that peak."""
        steps = run.extra["epoch1_penalty"]
        peak = int(np.argmax(steps))
        rises = peak > 0 and steps[peak] > steps[0]
        final = run.log[-1]["penalty"]
        return bool(rises and final < steps[peak])

    def median_valid(self, label: str) -> float:
        return float(np.median([r.valid_nll for r in self.by(label)]))


def _penalty_extra(res: TrainResult, bundle) -> dict:
    return {"epoch1_penalty": [s.penalty for s in res.steps if s.epoch == 1],
            "epoch_penalty": [r["penalty"] for r in res.log]}


def mnist_desk_experiment(root, seeds=(0, 1, 2), epochs: int = 10, train_size: int = 10000,
                          valid_size: int = 2000, alpha: float = 1.5, hidden: int = 128,
                          batch_size: int = 100, precision: str = "float32", lr: float = 0.001,
                          workers: int | None = None) -> MnistDeskResult:
    spec = ModelSpec(num_classes=2, output="bernoulli", hidden=hidden, embed_dim=16, precision=precision)
    jobs = []
    for seed in seeds:
        for label, mode in (("twin", "twin"), ("baseline", "baseline")):
            tcfg = TrainConfig(alpha=alpha if mode == "twin" else 0.0, backward_mode=mode, lr=lr,
                               batch_size=batch_size, epochs=epochs, seed=seed, precision=precision,
                               eval_batch_size=200)
            jobs.append((label, spec, tcfg, load_mnist_bundle, (str(root), train_size, valid_size),
                         seed, _penalty_extra))
    t0 = time.perf_counter()
    runs = _map(jobs, workers if workers is not None else default_workers(len(jobs)))
    return MnistDeskResult(runs, time.perf_counter() - t0)


# ------------------------------------------------------------------ delayed copy

@dataclass
class CopyResult:
    runs: list[RunOutcome]
    optimal_nll: float
    threshold: float
    max_epochs: int
    seconds: float

    def epochs_to_threshold(self, run: RunOutcome) -> float:
        for i, v in enumerate(run.epoch_valid, start=1):
            if v <= self.threshold:
                return float(i)
        return math.inf

    def median_epochs(self, label: str) -> float:
        return float(np.median([self.epochs_to_threshold(r) for r in self.runs if r.label == label]))


def _copy_bundle(n, length, offset, alphabet, seed, n_valid):
    tr = make_delayed_copy(n, length, offset, alphabet, seed)
    va = make_delayed_copy(n_valid, length, offset, alphabet, seed + 1_000_003)
    return DataBundle("delayed-copy", tr, va)


def delayed_copy_experiment(seeds=(0, 1, 2, 3, 4), length: int = 30, offset: int = 15, alphabet: int = 4,
                            n: int = 5000, n_valid: int = 500, alpha: float = 1.5, hidden: int = 64,
                            epochs: int = 15, batch_size: int = 20, lr: float = 0.001,
                            lr_decay_epochs=(5, 10, 15), tolerance: float = 0.05,
                            workers: int | None = None) -> CopyResult:
    """TwinNet vs baseline: epochs until valid NLL is within ``tolerance`` of the entropy.

    Both arms share the standard protocol (Adam, batch 20, lr 1e-3 halved
    after epochs 5/10/15, clip 5) and the same seeds.
    """
    spec = ModelSpec(num_classes=alphabet, hidden=hidden, embed_dim=8, precision="float32")
    jobs = []
    for seed in seeds:
        for label, mode in (("twin", "twin"), ("baseline", "baseline")):
            tcfg = TrainConfig(alpha=alpha if mode == "twin" else 0.0, backward_mode=mode, lr=lr,
                               batch_size=batch_size, epochs=epochs, seed=seed, precision="float32",
                               lr_decay_epochs=tuple(lr_decay_epochs), eval_batch_size=500)
            jobs.append((label, spec, tcfg, _copy_bundle, (n, length, offset, alphabet, seed, n_valid),
                         seed, None))
    h = delayed_copy_entropy(length, offset, alphabet)
    t0 = time.perf_counter()
    runs = _map(jobs, workers if workers is not None else default_workers(len(jobs)))
    return CopyResult(runs, h, h * (1.0 + tolerance), epochs, time.perf_counter() - t0)


# ------------------------------------------------------------------ frequency / cost sign check

@dataclass
class FrequencyResult:
    spearman: float
    pearson: float
    n_words: int
    train_chars: int
    valid_nll: float
    seconds: float
    stats: object = None
    histogram: object = None


def char_frequency_experiment(text_path, epochs: int = 5, hidden: int = 128, seq_len: int = 100,
                              batch_size: int = 64, alpha: float = 1.5, lr: float = 0.002,
                              valid_fraction: float = 0.05, max_chars: int = 0, seed: int = 0,
                              rare_cutoff: int = 1500) -> FrequencyResult:
    t0 = time.perf_counter()
    bundle = load_text_bundle(text_path, seq_len, valid_fraction, max_chars)
    spec = ModelSpec(num_classes=bundle.num_classes, hidden=hidden, embed_dim=32, precision="float32")
    model = init_model(spec, seed)
    tcfg = TrainConfig(alpha=alpha, backward_mode="twin", lr=lr, batch_size=batch_size, epochs=epochs,
                       seed=seed, precision="float32", lr_decay_epochs=(3,), eval_batch_size=200)
    res = train(model, bundle.train, bundle.valid, tcfg, progress=True)
    records = trace_dataset(res.model, bundle.valid, batch_size=200, segment_words=True)
    stats = frequency_cost_stats(records, bundle.valid.vocab, level="word", word_counts=bundle.word_counts)
    hist = None
    if stats.n_symbols > rare_cutoff:
        hist = rare_frequent_histogram(stats, rare_cutoff)
    return FrequencyResult(stats.spearman, stats.pearson, stats.n_symbols, bundle.meta["train_chars"],
                           evaluate(res.model, bundle.valid).nll, time.perf_counter() - t0, stats, hist)


# ------------------------------------------------------------------ conditioning check

@dataclass
class ConditionalResult:
    fraction_true_better: float
    n: int
    seconds: float
    valid_nll: float


def label_swap_fraction(model: TwinModel, dataset: SequenceDataset, n: int = 500, seed: int = 0,
                        batch_size: int = 250) -> float:
    """Share of images whose NLL is lower under the true label than under a random wrong one."""
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(dataset), size=min(n, len(dataset)), replace=False)
    sub = dataset.subset(rows)
    labels = np.asarray(sub.labels)
    wrong = (labels + rng.integers(1, 10, size=len(labels))) % 10
    true_nll = evaluate(model, sub, batch_size).per_sequence
    swapped = replace(sub, cond=np.eye(10)[wrong])
    wrong_nll = evaluate(model, swapped, batch_size).per_sequence
    return float(np.mean(true_nll < wrong_nll))


def conditional_mnist_experiment(root, epochs: int = 5, train_size: int = 10000, valid_size: int = 2000,
                                 n_eval: int = 500, hidden: int = 128, batch_size: int = 100,
                                 alpha: float = 1.5, seed: int = 0) -> ConditionalResult:
    t0 = time.perf_counter()
    bundle = load_mnist_bundle(root, train_size, valid_size, test_size=n_eval, conditional=True)
    spec = ModelSpec(num_classes=2, output="bernoulli", hidden=hidden, embed_dim=16, cond_dim=10,
                     precision="float32")
    model = init_model(spec, seed)
    tcfg = TrainConfig(alpha=alpha, backward_mode="twin", batch_size=batch_size, epochs=epochs, seed=seed,
                       precision="float32", eval_batch_size=200)
    res = train(model, bundle.train, bundle.valid, tcfg, progress=True)
    frac = label_swap_fraction(res.model, bundle.test, n_eval, seed)
    return ConditionalResult(frac, n_eval, time.perf_counter() - t0, res.state.best_valid)
