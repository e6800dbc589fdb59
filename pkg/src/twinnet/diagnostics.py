"""Analysis of the twin penalty: per-step traces, frequency/cost statistics, CSV output.

Costs are the per-step penalty values L_t = ||g(h_t^f) - h_t^b||_2 of a
twin model, evaluated without a tape. Word-level statistics for character
models average L_t over the characters of each word.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sstats

from .data import SequenceBatch, SequenceDataset, Vocab, batch_iter
from .objective import ObjectiveConfig, compute_objective

RECORD_COLUMNS = ["seq_id", "t", "token", "segment", "penalty", "nll"]
SYMBOL_COLUMNS = ["symbol", "frequency", "log1p_frequency", "occurrences", "mean_cost"]
HISTOGRAM_COLUMNS = ["group", "bin_lo", "bin_hi", "count"]


@dataclass
class DiagnosticsRecord:
    seq_id: int
    penalty: np.ndarray          # (T,) L_t
    nll: np.ndarray              # (T,) forward NLL per step
    tokens: np.ndarray           # (T,)
    segments: np.ndarray = field(default=None)   # (T,) word index, -1 outside any word

    def __post_init__(self):
        T = len(self.tokens)
        if self.segments is None:
            self.segments = np.full(T, -1, dtype=np.int64)
        if not (len(self.penalty) == len(self.nll) == len(self.segments) == T):
            raise ValueError("record traces must share one length")
        if np.any(self.penalty < 0):
            raise ValueError("penalty values must be non-negative")

    def __len__(self) -> int:
        return len(self.tokens)


# ------------------------------------------------------------------ segmentation

def word_segments(text: str) -> tuple[np.ndarray, list[str]]:
    """Whitespace word segmentation of a character string.

    Each word owns its characters plus the whitespace that follows it;
    whitespace before the first word belongs to no word (id -1).
    """
    seg = np.full(len(text), -1, dtype=np.int64)
    words: list[str] = []
    cur = -1
    in_word = False
    for i, ch in enumerate(text):
        if ch.isspace():
            in_word = False
        elif not in_word:
            in_word = True
            cur += 1
            words.append("")
        if cur >= 0:
            seg[i] = cur
            if not ch.isspace():
                words[cur] += ch
    return seg, words


def record_words(record: DiagnosticsRecord, vocab: Vocab) -> list[tuple[str, np.ndarray]]:
    """(word, positions) pairs of a character-level record."""
    _, words = word_segments(vocab.decode(record.tokens))
    return [(w, np.flatnonzero(record.segments == i)) for i, w in enumerate(words)]


# ------------------------------------------------------------------ tracing

def _require_twin(model, backward_mode: str) -> None:
    if backward_mode != "twin" or getattr(model, "backward", None) is None:
        raise ValueError("diagnostics need a twin-mode model with a backward network")


def trace_batch(model, batch: SequenceBatch, g_mode: str = "learned",
                backward_mode: str = "twin") -> list[DiagnosticsRecord]:
    _require_twin(model, backward_mode)
    cfg = ObjectiveConfig(alpha=1.0, backward_mode="twin", g_mode=g_mode)
    loss = compute_objective(model, batch, cfg)          # no tape active: values only
    out = []
    for r in range(batch.size):
        T = int(batch.lengths[r])
        sid = int(batch.index[r]) if batch.index is not None else r
        out.append(DiagnosticsRecord(sid, loss.penalty_trace[r, :T].astype(np.float64),
                                     loss.step_nll_f[r, :T].astype(np.float64),
                                     np.asarray(batch.tokens[r, :T], dtype=np.int64)))
    return out


def trace(model, sequence, g_mode: str = "learned", seq_id: int = 0, cond=None,
          vocab: Vocab | None = None, backward_mode: str = "twin") -> DiagnosticsRecord:
    """Per-step L_t and forward NLL for one sequence; never touches parameters or RNGs.

    With a vocabulary, characters are grouped into whitespace-delimited words.
    """
    seq = np.asarray(sequence, dtype=np.int64)
    c = None if cond is None else np.asarray(cond)[None, :]
    batch = SequenceBatch.from_sequences([seq], c, index=np.array([seq_id]))
    rec = trace_batch(model, batch, g_mode, backward_mode)[0]
    if vocab is not None:
        rec.segments = word_segments(vocab.decode(seq))[0]
    return rec


def trace_dataset(model, dataset: SequenceDataset, batch_size: int = 50, g_mode: str = "learned",
                  segment_words: bool = False) -> list[DiagnosticsRecord]:
    recs = []
    for batch in batch_iter(dataset, batch_size, shuffle=False):
        recs.extend(trace_batch(model, batch, g_mode))
    if segment_words:
        if dataset.vocab is None:
            raise ValueError("word segmentation needs a vocabulary")
        for r in recs:
            r.segments = word_segments(dataset.vocab.decode(r.tokens))[0]
    return recs


# ------------------------------------------------------------------ statistics

@dataclass
class FrequencyStats:
    symbols: list
    frequency: np.ndarray
    occurrences: np.ndarray
    mean_cost: np.ndarray
    spearman: float
    pearson: float
    defined: bool
    degenerate: bool
    level: str = "symbol"

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)

    def summary(self) -> str:
        if not self.defined:
            return f"{self.n_symbols} {self.level}s: correlation undefined (need >= 3)"
        tag = " (degenerate)" if self.degenerate else ""
        return (f"{self.n_symbols} {self.level}s: spearman {self.spearman:+.4f} "
                f"pearson {self.pearson:+.4f} vs log(1+freq){tag}")


def _symbol_costs(records: Iterable[DiagnosticsRecord], vocab: Vocab | None, level: str
                  ) -> tuple[dict, dict]:
    total: dict = {}
    count: dict = {}
    for rec in records:
        if level == "symbol":
            for tok, cost in zip(rec.tokens.tolist(), rec.penalty.tolist()):
                total[tok] = total.get(tok, 0.0) + cost
                count[tok] = count.get(tok, 0) + 1
        elif level == "word":
            if vocab is None:
                raise ValueError("word-level statistics need the character vocabulary")
            for word, pos in record_words(rec, vocab):
                if len(pos) == 0:
                    continue
                # a word's cost is the mean over its characters
                total[word] = total.get(word, 0.0) + float(rec.penalty[pos].mean())
                count[word] = count.get(word, 0) + 1
        else:
            raise ValueError(f"unknown level {level!r}")
    return total, count


def frequency_cost_stats(records: Sequence[DiagnosticsRecord], vocab: Vocab | None = None,
                         level: str = "symbol", word_counts: Counter | None = None
                         ) -> FrequencyStats:
    """Mean cost per symbol (or word) and its rank/linear correlation with log(1+frequency).

    Symbol frequencies come from ``vocab.counts``; word frequencies from
    ``word_counts``. Symbols are listed in sorted order, so the result does
    not depend on the order of ``records``.
    """
    records = list(records)
    if not records:
        raise ValueError("no records")
    if level == "symbol" and vocab is None:
        raise ValueError("symbol-level statistics need a vocabulary with counts")
    if level == "word" and word_counts is None:
        raise ValueError("word-level statistics need word_counts")
    total, count = _symbol_costs(records, vocab, level)
    symbols = sorted(total)
    freq_of = (lambda s: vocab.frequency(s)) if level == "symbol" else (lambda s: word_counts.get(s, 0))
    freq = np.array([freq_of(s) for s in symbols], dtype=np.float64)
    occ = np.array([count[s] for s in symbols], dtype=np.int64)
    mean = np.array([total[s] / count[s] for s in symbols], dtype=np.float64)
    defined = len(symbols) >= 3
    degenerate = False
    rho = r = math.nan
    if defined:
        x = np.log1p(freq)
        if np.ptp(mean) == 0.0 or np.ptp(x) == 0.0:
            degenerate, rho, r = True, 0.0, 0.0
        else:
            rho = float(sstats.spearmanr(x, mean).statistic)
            r = float(sstats.pearsonr(x, mean).statistic)
    shown = [vocab.symbols[s] if level == "symbol" and vocab is not None else s for s in symbols]
    return FrequencyStats(shown, freq, occ, mean, rho, r, defined, degenerate, level)


@dataclass
class GroupSummary:
    size: int
    mean: float
    variance: float


@dataclass
class RareFrequentHistogram:
    edges: np.ndarray
    rare_counts: np.ndarray
    frequent_counts: np.ndarray
    rare: GroupSummary
    frequent: GroupSummary
    cutoff: int

    @property
    def n_symbols(self) -> int:
        return self.rare.size + self.frequent.size


def _summary(values: np.ndarray) -> GroupSummary:
    if len(values) == 0:
        return GroupSummary(0, math.nan, math.nan)
    return GroupSummary(len(values), float(values.mean()), float(values.var()))


def rare_frequent_histogram(stats: FrequencyStats, cutoff: int = 1500, bins: int = 20
                            ) -> RareFrequentHistogram:
    """Split symbols at a frequency rank (ascending: the ``cutoff`` rarest are 'rare').

    Both groups are binned on shared edges spanning all mean costs. Ties in
    frequency are broken by symbol order so the split is deterministic.
    """
    n = stats.n_symbols
    if not 0 <= cutoff < n:
        raise ValueError(f"cutoff must lie in [0, {n}) for {n} symbols")
    order = sorted(range(n), key=lambda i: (stats.frequency[i], str(stats.symbols[i])))
    rare_idx = np.array(order[:cutoff], dtype=np.int64)
    freq_idx = np.array(order[cutoff:], dtype=np.int64)
    costs = stats.mean_cost
    lo, hi = float(costs.min()), float(costs.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    rare_c = np.histogram(costs[rare_idx], edges)[0]
    freq_c = np.histogram(costs[freq_idx], edges)[0]
    return RareFrequentHistogram(edges, rare_c, freq_c, _summary(costs[rare_idx]),
                                 _summary(costs[freq_idx]), cutoff)


# ------------------------------------------------------------------ CSV output

def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def emit_csv(obj, path) -> Path:
    """Write records, frequency statistics or a histogram as CSV.

    Columns (fixed order):
      records   -> seq_id,t,token,segment,penalty,nll
      stats     -> symbol,frequency,log1p_frequency,occurrences,mean_cost
      histogram -> group,bin_lo,bin_hi,count
    Floats use ``repr`` so values round-trip exactly.
    """
    path = Path(path)
    if isinstance(obj, FrequencyStats):
        header = SYMBOL_COLUMNS
        rows = ([s, f, math.log1p(f), o, m] for s, f, o, m in
                zip(obj.symbols, obj.frequency.tolist(), obj.occurrences.tolist(), obj.mean_cost.tolist()))
    elif isinstance(obj, RareFrequentHistogram):
        header = HISTOGRAM_COLUMNS
        e = obj.edges.tolist()
        rows = [[g, e[i], e[i + 1], int(c[i])] for g, c in
                (("rare", obj.rare_counts), ("frequent", obj.frequent_counts)) for i in range(len(c))]
    else:
        header = RECORD_COLUMNS
        rows = ([r.seq_id, t, int(r.tokens[t]), int(r.segments[t]), float(r.penalty[t]), float(r.nll[t])]
                for r in obj for t in range(len(r)))
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_records_csv(path) -> list[DiagnosticsRecord]:
    by_seq: dict[int, list] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            by_seq.setdefault(int(row["seq_id"]), []).append(row)
    out = []
    for sid, rows in by_seq.items():
        rows.sort(key=lambda r: int(r["t"]))
        out.append(DiagnosticsRecord(
            sid, np.array([float(r["penalty"]) for r in rows]), np.array([float(r["nll"]) for r in rows]),
            np.array([int(r["token"]) for r in rows]), np.array([int(r["segment"]) for r in rows])))
    return out
