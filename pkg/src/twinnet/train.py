"""Optimization loop: Adam/AdaDelta, gradient clipping, LR schedule, early stopping."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tape
from .cells import run_forward
from .data import SequenceDataset, batch_iter
from .model import TwinModel, load_checkpoint, save_checkpoint
from .objective import ObjectiveConfig, compute_objective

log = logging.getLogger(__name__)

# the metrics CSV holds only deterministic columns so reruns compare bitwise;
# wall time goes to a sibling <stem>_timing.csv
METRICS_HEADER = ["epoch", "step", "nll_f", "nll_b", "penalty", "valid_nll", "lr"]
TIMING_HEADER = ["epoch", "seconds"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.5
    backward_mode: str = "twin"
    g_mode: str = "learned"
    noise_sigma: float = 1.0
    normalize_by_length: bool = False
    optimizer: str = "adam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.95
    clip_norm: float = 5.0
    batch_size: int = 20
    epochs: int = 10
    lr_decay_epochs: tuple[int, ...] = (5, 10, 15)
    lr_decay_factor: float = 0.5
    seed: int = 0
    early_stop_metric: str = "valid_nll"
    patience: int = 0
    precision: str = "float64"
    dropout: float = 0.0
    eval_batch_size: int = 100

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        decay = tuple(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(decay, decay[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        object.__setattr__(self, "lr_decay_epochs", decay)
        if self.optimizer not in ("adam", "adadelta"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.early_stop_metric != "valid_nll":
            raise ValueError("early_stop_metric must be 'valid_nll'")
        self.objective()  # validates mode names and alpha

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.alpha, self.backward_mode, self.g_mode, self.noise_sigma,
                               self.normalize_by_length)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "lr_decay_epochs" in d:
            d["lr_decay_epochs"] = tuple(d["lr_decay_epochs"])
        return cls(**d)


# ------------------------------------------------------------------ pieces

def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float
                     ) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam; updates ``params`` and ``state`` in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class AdaDeltaState:
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_delta: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adadelta_step(params, grads, state: AdaDeltaState, lr: float = 1.0, rho: float = 0.95,
                  eps: float = 1e-6) -> None:
    state.t += 1
    for k, p in params.items():
        g = grads[k]
        if k not in state.sq_grad:
            state.sq_grad[k] = np.zeros_like(p)
            state.sq_delta[k] = np.zeros_like(p)
        eg, ed = state.sq_grad[k], state.sq_delta[k]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        p -= lr * delta


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate for 1-indexed ``epoch``; decays once per boundary passed."""
    passed = sum(1 for d in cfg.lr_decay_epochs if epoch > d)
    return cfg.lr * cfg.lr_decay_factor ** passed


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalResult:
    nll: float                  # mean per-sequence NLL in nats
    bits_per_dim: float
    per_sequence: np.ndarray

    @property
    def n(self) -> int:
        return len(self.per_sequence)


def evaluate(model: TwinModel, dataset: SequenceDataset, batch_size: int = 100,
             epoch: int = 0) -> EvalResult:
    """Forward-network NLL; the backward network and g are never read."""
    stack, head = model.forward.stack, model.forward.head
    per_seq = np.zeros(len(dataset))
    tokens = 0
    for batch in batch_iter(dataset, batch_size, epoch=epoch, shuffle=False):
        res = run_forward(stack, head, batch)
        per_seq[batch.index] = res.sequence_nll()
        tokens += int(batch.lengths.sum())
    nll = float(per_seq.mean()) if len(per_seq) else 0.0
    bpd = float(per_seq.sum() / (math.log(2) * tokens)) if tokens else 0.0
    return EvalResult(nll, bpd, per_seq)


# ------------------------------------------------------------------ training state

@dataclass
class TrainState:
    epoch: int = 0                  # completed epochs
    step: int = 0
    lr: float = 0.0
    best_valid: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    stopped: bool = False
    opt: AdamState | AdaDeltaState = field(default_factory=AdamState)
    best_params: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {}
        if isinstance(self.opt, AdamState):
            slots = {"m": self.opt.m, "v": self.opt.v}
        else:
            slots = {"sq_grad": self.opt.sq_grad, "sq_delta": self.opt.sq_delta}
        for slot, d in slots.items():
            for k, a in d.items():
                arrays[f"opt/{slot}/{k}"] = a
        for k, a in self.best_params.items():
            arrays[f"best/{k}"] = a
        meta = {"epoch": self.epoch, "step": self.step, "lr": self.lr,
                "best_valid": None if math.isinf(self.best_valid) else self.best_valid,
                "best_epoch": self.best_epoch, "bad_epochs": self.bad_epochs,
                "stopped": self.stopped, "opt_kind": type(self.opt).__name__, "opt_t": self.opt.t}
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> "TrainState":
        opt = AdamState() if meta.get("opt_kind", "AdamState") == "AdamState" else AdaDeltaState()
        opt.t = meta.get("opt_t", 0)
        best = {}
        for key, a in arrays.items():
            parts = key.split("/", 2)
            if parts[0] == "opt":
                getattr(opt, parts[1])[parts[2]] = np.array(a)
            elif parts[0] == "best":
                best[key[len("best/"):]] = np.array(a)
        bv = meta.get("best_valid")
        return cls(meta["epoch"], meta["step"], meta["lr"], math.inf if bv is None else bv,
                   meta["best_epoch"], meta["bad_epochs"], meta["stopped"], opt, best)


def save_training_checkpoint(path, model: TwinModel, state: TrainState, cfg: TrainConfig,
                             log_rows: list[dict]) -> Path:
    arrays, meta = state.to_arrays()
    return save_checkpoint(path, model, arrays,
                           {"train_state": meta, "train_config": cfg.to_dict(), "metrics": log_rows})


def load_training_checkpoint(path):
    ck = load_checkpoint(path)
    meta = ck.meta.get("train_state")
    state = TrainState.from_arrays(ck.arrays, meta) if meta else TrainState()
    return ck.model, state, ck.meta.get("metrics", [])


# ------------------------------------------------------------------ the loop

@dataclass
class StepRecord:
    epoch: int
    step: int
    nll_f: float
    nll_b: float
    penalty: float
    grad_norm_f: float
    grad_norm_b: float


@dataclass
class TrainResult:
    model: TwinModel
    state: TrainState
    log: list[dict]
    steps: list[StepRecord]


def _step_rngs(cfg: TrainConfig, epoch: int, step: int):
    # independent streams so the forward net's randomness never depends on the mode
    return tuple(np.random.default_rng([cfg.seed, epoch, step, k]) for k in range(3))


def train(model: TwinModel, train_set: SequenceDataset, valid_set: SequenceDataset | None,
          cfg: TrainConfig, state: TrainState | None = None, log_rows: list[dict] | None = None,
          checkpoint_path=None, metrics_path=None, stop_after_epoch: int | None = None,
          progress: bool = False, on_step=None) -> TrainResult:
    """Train with the configured objective; resumable from ``state``.

    ``on_step(model, record)`` is called after every parameter update.

    Gradients are clipped separately for the forward side (forward network
    plus g) and the backward network, so the backward net can never change
    the forward updates. The returned model holds the best-validation
    parameters when a validation set is given.
    """
    ocfg = cfg.objective()
    state = state or TrainState(opt=AdamState() if cfg.optimizer == "adam" else AdaDeltaState())
    log_rows = list(log_rows or [])
    steps: list[StepRecord] = []
    fwd_side = model.forward_side()
    bwd_side = model.backward_params()
    train_bwd = ocfg.backward_mode == "twin"
    params = {**fwd_side, **(bwd_side if train_bwd else {})}
    arrays = {k: p.data for k, p in params.items()}
    # a resumed run keeps pointing at the checkpoint it resumed from
    last_good = Path(checkpoint_path) if checkpoint_path is not None and Path(checkpoint_path).exists() else None
    if metrics_path is not None:
        _write_metrics(metrics_path, log_rows)

    while state.epoch < cfg.epochs and not state.stopped:
        epoch = state.epoch + 1
        lr = lr_schedule(epoch, cfg)
        state.lr = lr
        t0 = time.perf_counter()
        sums = np.zeros(3)
        count = 0
        for batch in batch_iter(train_set, cfg.batch_size, cfg.seed, epoch):
            state.step += 1
            noise_rng, f_rng, b_rng = _step_rngs(cfg, epoch, state.step)
            try:
                with Tape() as tape:
                    loss = compute_objective(model, batch, ocfg, rng=noise_rng, train=True,
                                             rngs=(f_rng, b_rng))
                grads = tape.backward(loss.total)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {state.step}: {exc}", last_good) from exc
            g_f, n_f = clip_global_norm({k: grads[p] for k, p in fwd_side.items()}, cfg.clip_norm)
            g_all = dict(g_f)
            n_b = 0.0
            if train_bwd:
                g_b, n_b = clip_global_norm({k: grads[p] for k, p in bwd_side.items()}, cfg.clip_norm)
                g_all.update(g_b)
            if cfg.optimizer == "adam":
                adam_step(arrays, g_all, state.opt, lr, cfg.beta1, cfg.beta2, cfg.eps)
            else:
                adadelta_step(arrays, g_all, state.opt, lr, cfg.rho, cfg.eps)
            rec = StepRecord(epoch, state.step, loss.forward_nll, loss.backward_nll,
                             loss.penalty_value, n_f, n_b)
            steps.append(rec)
            sums += (rec.nll_f, rec.nll_b, rec.penalty)
            count += 1
            if not all(map(math.isfinite, (rec.nll_f, rec.nll_b, rec.penalty))):
                raise TrainingDiverged(f"non-finite loss at step {state.step}", last_good)
            if on_step is not None:
                on_step(model, rec)
            del tape, loss, grads, g_f, g_all
        means = sums / max(count, 1)
        valid_nll = math.nan
        if valid_set is not None and len(valid_set):
            valid_nll = evaluate(model, valid_set, cfg.eval_batch_size).nll
            if valid_nll < state.best_valid:
                state.best_valid, state.best_epoch, state.bad_epochs = valid_nll, epoch, 0
                state.best_params = model.state_arrays()
            else:
                state.bad_epochs += 1
                if cfg.patience and state.bad_epochs >= cfg.patience:
                    state.stopped = True
        state.epoch = epoch
        row = {"epoch": epoch, "step": state.step, "nll_f": float(means[0]),
               "nll_b": float(means[1]), "penalty": float(means[2]), "valid_nll": valid_nll,
               "lr": lr, "seconds": time.perf_counter() - t0}
        log_rows.append(row)
        if progress:
            log.info("epoch %d nll_f %.4f nll_b %.4f penalty %.4f valid %.4f (%.1fs)", epoch,
                     row["nll_f"], row["nll_b"], row["penalty"], valid_nll, row["seconds"])
        if metrics_path is not None:
            _write_metrics(metrics_path, log_rows)
        if checkpoint_path is not None:
            last_good = save_training_checkpoint(checkpoint_path, model, state, cfg, log_rows)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            return TrainResult(model, state, log_rows, steps)

    if state.best_params:
        model.load_arrays(state.best_params)
    return TrainResult(model, state, log_rows, steps)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def timing_path(metrics_path) -> Path:
    p = Path(metrics_path)
    return p.with_name(p.stem + "_timing.csv")


def _write_metrics(path, rows: list[dict]) -> None:
    for target, header in ((Path(path), METRICS_HEADER), (timing_path(path), TIMING_HEADER)):
        with target.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(r[k]) for k in header])


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in r.items()})
    return out
