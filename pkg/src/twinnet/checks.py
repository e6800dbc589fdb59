"""Finite-difference check battery shared by the ``gradcheck`` command and the tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import run_forward
from .data import SequenceBatch
from .model import ModelSpec, init_model
from .objective import (BACKWARD_MODES, ObjectiveConfig, PartitionReport, gradient_partition_check,
                        objective_grad_check)

SHAPES = [(2, 3), (4, 5), (1, 7)]


def _weighted(out: Tensor, rng) -> Tensor:
    # a fixed random projection so every output coordinate matters
    w = Tensor(rng.normal(size=out.shape))
    return ad.total(ad.mul(out, w))


def _op_cases():
    """name -> builder(rng, shape) returning (loss_fn, params)."""

    def unary(op, positive=False):
        def build(rng, shape):
            x = Tensor(rng.normal(size=shape) + (3.0 if positive else 0.0), True, "x")
            w = rng.normal(size=shape)
            return (lambda: ad.total(ad.mul(op(x), Tensor(w)))), {"x": x}
        return build

    def binary(op):
        def build(rng, shape):
            a = Tensor(rng.normal(size=shape), True, "a")
            b = Tensor(rng.normal(size=shape), True, "b")
            w = rng.normal(size=shape)
            return (lambda: ad.total(ad.mul(op(a, b), Tensor(w)))), {"a": a, "b": b}
        return build

    def matmul(rng, shape):
        m, k = shape
        a = Tensor(rng.normal(size=(m, k)), True, "a")
        b = Tensor(rng.normal(size=(k, 3)), True, "b")
        w = rng.normal(size=(m, 3))
        return (lambda: ad.total(ad.mul(ad.matmul(a, b), Tensor(w)))), {"a": a, "b": b}

    def add_bias(rng, shape):
        x = Tensor(rng.normal(size=shape), True, "x")
        b = Tensor(rng.normal(size=shape[-1:]), True, "b")
        w = rng.normal(size=shape)
        return (lambda: ad.total(ad.mul(ad.add_bias(x, b), Tensor(w)))), {"x": x, "b": b}

    def take(rng, shape):
        x = Tensor(rng.normal(size=shape), True, "x")
        idx = (slice(None), slice(0, max(1, shape[1] - 1)))
        return (lambda: _weighted(ad.take(x, idx), np.random.default_rng(1))), {"x": x}

    def concat(rng, shape):
        a = Tensor(rng.normal(size=shape), True, "a")
        b = Tensor(rng.normal(size=(shape[0], 2)), True, "b")
        return (lambda: _weighted(ad.concat([a, b], axis=1), np.random.default_rng(1))), {"a": a, "b": b}

    def broadcast(rng, shape):
        a = Tensor(rng.normal(size=(shape[0], 1, shape[1])), True, "a")
        return (lambda: _weighted(ad.broadcast_to(a, (shape[0], 3, shape[1])), np.random.default_rng(1))), {"a": a}

    def add_broadcast(rng, shape):
        x = Tensor(rng.normal(size=(shape[0], 3, shape[1])), True, "x")
        v = Tensor(rng.normal(size=(shape[0], 1, shape[1])), True, "v")
        return (lambda: _weighted(ad.add_broadcast(x, v), np.random.default_rng(1))), {"x": x, "v": v}

    def total(rng, shape):
        x = Tensor(rng.normal(size=shape), True, "x")
        return (lambda: ad.scale(ad.total(ad.tanh(x)), 1.3)), {"x": x}

    def reshape(rng, shape):
        x = Tensor(rng.normal(size=shape), True, "x")
        return (lambda: _weighted(ad.reshape(x, (-1,)), np.random.default_rng(1))), {"x": x}

    def embedding(rng, shape):
        table = Tensor(rng.normal(size=(5, shape[1])), True, "table")
        ids = rng.integers(0, 5, size=(shape[0], 4))
        return (lambda: _weighted(ad.embedding(table, ids), np.random.default_rng(1))), {"table": table}

    def softmax_nll(rng, shape):
        logits = Tensor(rng.normal(size=shape), True, "logits")
        targets = rng.integers(0, shape[1], size=shape[0])
        mask = (rng.random(shape[0]) < 0.8).astype(float)
        mask[0] = 1.0
        return (lambda: ad.softmax_cross_entropy(logits, targets, mask)), {"logits": logits}

    def sigmoid_nll(rng, shape):
        logits = Tensor(rng.normal(size=(shape[0] * shape[1], 1)), True, "logits")
        targets = rng.integers(0, 2, size=shape[0] * shape[1])
        return (lambda: ad.sigmoid_cross_entropy(logits, targets)), {"logits": logits}

    def row_distances(rng, shape):
        a = Tensor(rng.normal(size=shape), True, "a")
        b = Tensor(rng.normal(size=shape), True, "b")
        m = rng.random(shape[0]) + 0.5
        return (lambda: ad.total(ad.row_distances(a, b, m))), {"a": a, "b": b}

    def lstm_seq(rng, shape, reverse=False):
        B, H = shape[0], 3
        T = shape[1]
        pre = Tensor(rng.normal(size=(B, T, 4 * H)), True, "pre")
        w_h = Tensor(rng.normal(size=(H, 4 * H)) * 0.5, True, "w_h")
        h0 = Tensor(rng.normal(size=(B, H)), True, "h0")
        c0 = Tensor(rng.normal(size=(B, H)), True, "c0")
        mask = np.ones((B, T))
        mask[0, T - max(1, T // 3):] = 0.0
        wr = np.random.default_rng(1)
        w1, w2, w3 = wr.normal(size=(B, T, H)), wr.normal(size=(B, H)), wr.normal(size=(B, H))

        def loss():
            s, hT, cT = ad.lstm_sequence(pre, w_h, h0, c0, mask, reverse)
            return ad.add(ad.add(ad.total(ad.mul(s, Tensor(w1))), ad.total(ad.mul(hT, Tensor(w2)))),
                          ad.total(ad.mul(cT, Tensor(w3))))
        return loss, {"pre": pre, "w_h": w_h, "h0": h0, "c0": c0}

    return {
        "matmul": matmul,
        "add": binary(ad.add),
        "sub": binary(ad.sub),
        "mul": binary(ad.mul),
        "scale": unary(lambda x: ad.scale(x, -1.7)),
        "add_bias": add_bias,
        "sigmoid": unary(ad.sigmoid),
        "tanh": unary(ad.tanh),
        "total": total,
        "reshape": reshape,
        "take": take,
        "concat": concat,
        "broadcast_to": broadcast,
        "add_broadcast": add_broadcast,
        "embedding": embedding,
        "softmax_nll": softmax_nll,
        "sigmoid_nll": sigmoid_nll,
        "row_distances": row_distances,
        "lstm_sequence": lstm_seq,
        "lstm_sequence_reverse": lambda rng, shape: lstm_seq(rng, shape, True),
    }


OP_NAMES = tuple(_op_cases())


def op_battery(seed: int = 0, epsilon: float = 3e-4, ops=None) -> dict[str, float]:
    """Worst relative error per op over the three seeded shapes."""
    cases = _op_cases()
    out = {}
    for name in ops or cases:
        worst = 0.0
        for j, shape in enumerate(SHAPES):
            rng = np.random.default_rng([seed, j])
            loss_fn, params = cases[name](rng, shape)
            worst = max(worst, ad.grad_check(loss_fn, params, epsilon=epsilon).max_rel_error)
        out[name] = worst
    return out


# ------------------------------------------------------------------ tiny model checks

@dataclass
class TinyConfig:
    hidden: int = 8
    num_classes: int = 4
    length: int = 6
    batch: int = 2
    embed_dim: int = 5
    cell: str = "lstm"
    alpha: float = 1.5
    epsilon: float = 3e-4
    seed: int = 0
    tolerance: float = 1e-4


def tiny_setup(cfg: TinyConfig, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    spec = ModelSpec(num_classes=cfg.num_classes, hidden=cfg.hidden, embed_dim=cfg.embed_dim,
                     cell=cfg.cell, precision="float64")
    model = init_model(spec, seed)
    rng = np.random.default_rng([seed, 1])
    seqs = [rng.integers(0, cfg.num_classes, size=cfg.length) for _ in range(cfg.batch)]
    if cfg.batch > 1:
        # one shorter row so masking is exercised
        seqs[-1] = seqs[-1][:max(1, cfg.length - 2)]
    return model, SequenceBatch.from_sequences(seqs)


@dataclass
class GradcheckResult:
    per_module: dict[str, float]
    per_mode: dict[str, float]
    per_op: dict[str, float]
    partition: PartitionReport
    seconds: float
    tolerance: float
    worst_param: dict[str, str] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max([*self.per_module.values(), 0.0])

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.partition.passed

    def format(self) -> str:
        lines = ["module            max rel. error  result"]
        for m, e in self.per_module.items():
            lines.append(f"{m:<18}{e:>14.3e}  {'PASS' if e < self.tolerance else 'FAIL'}")
        lines.append("")
        lines.append("backward-mode     max rel. error  worst parameter")
        for m, e in self.per_mode.items():
            lines.append(f"{m:<18}{e:>14.3e}  {self.worst_param.get(m, '')}")
        lines.append("")
        lines.append(self.partition.format())
        lines.append("")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} "
                     f"(max rel. error {self.max_rel_error:.3e}, tolerance {self.tolerance:g}, "
                     f"{self.seconds:.1f}s)")
        return "\n".join(lines)


def run_gradcheck(cfg: TinyConfig | None = None, ops: bool = True) -> GradcheckResult:
    """Op battery, forward-network check and every backward mode on the tiny model."""
    cfg = cfg or TinyConfig()
    t0 = time.perf_counter()
    per_op = op_battery(cfg.seed, cfg.epsilon) if ops else {}
    model, batch = tiny_setup(cfg)
    stack, head = model.forward.stack, model.forward.head
    fwd_params = model.forward_params()
    cells_err = ad.grad_check(lambda: run_forward(stack, head, batch).nll, fwd_params,
                              epsilon=cfg.epsilon).max_rel_error
    per_mode, worst = {}, {}
    for mode in BACKWARD_MODES:
        rep = objective_grad_check(model, batch, ObjectiveConfig(alpha=cfg.alpha, backward_mode=mode),
                                   epsilon=cfg.epsilon, seed=cfg.seed)
        per_mode[mode] = rep.max_rel_error
        worst[mode] = rep.worst_param or ""
    per_module = {}
    if per_op:
        per_module["core-autodiff"] = max(per_op.values())
    per_module["rnn-cells"] = cells_err
    per_module["twin-objective"] = max(per_mode.values())
    part = gradient_partition_check(model, batch, ObjectiveConfig(alpha=cfg.alpha))
    return GradcheckResult(per_module, per_mode, per_op, part, time.perf_counter() - t0,
                           cfg.tolerance, worst)
