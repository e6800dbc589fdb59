"""Recurrent cells, stacked unidirectional RNNs and output heads.

A stack reads one symbol per step and its top-layer state parameterizes the
prediction of the current symbol.  The forward stack at step t consumes
x_{t-1} (a learned start symbol at t=1); the backward stack at step t
consumes x_{t+1} (a learned end symbol at t=T) and iterates from T down to 1.
Embedding tables therefore have K + 2 rows: the K symbols, then SOS and EOS.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CELL_KINDS = ("lstm", "gru")
OUTPUT_KINDS = ("softmax", "bernoulli")
INIT_SCHEMES = ("uniform", "orthogonal")


@dataclass(frozen=True)
class StackSpec:
    num_classes: int
    hidden: int = 32
    layers: int = 1
    embed_dim: int = 16
    cell: str = "lstm"
    output: str = "softmax"
    cond_dim: int = 0
    dropout: float = 0.0
    direction: str = "forward"

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.cell!r}")
        if self.output not in OUTPUT_KINDS:
            raise ValueError(f"unknown output kind {self.output!r}")
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if min(self.num_classes, self.hidden, self.layers, self.embed_dim) <= 0:
            raise ValueError("stack dimensions must be positive")
        if self.output == "bernoulli" and self.num_classes != 2:
            raise ValueError("bernoulli output needs num_classes == 2")

    @property
    def sos(self) -> int:
        return self.num_classes

    @property
    def eos(self) -> int:
        return self.num_classes + 1


@dataclass
class CellParams:
    kind: str
    w_x: Tensor   # (input_size, G*hidden)
    w_h: Tensor   # (hidden, G*hidden)
    b: Tensor     # (G*hidden,)

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def gates(self) -> int:
        return 4 if self.kind == "lstm" else 3


@dataclass
class RnnStack:
    spec: StackSpec
    embed: Tensor
    layers: list[CellParams]

    @property
    def direction(self) -> str:
        return self.spec.direction

    @property
    def hidden_size(self) -> int:
        return self.layers[-1].hidden_size

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.embed": self.embed}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.l{i}.w_x"] = layer.w_x
            out[f"{prefix}.l{i}.w_h"] = layer.w_h
            out[f"{prefix}.l{i}.b"] = layer.b
        return out


@dataclass
class OutputHead:
    kind: str
    w: Tensor   # (hidden, K) or (hidden, 1)
    b: Tensor

    @property
    def num_outputs(self) -> int:
        return self.w.shape[1]

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.head.w": self.w, f"{prefix}.head.b": self.b}


@dataclass
class HiddenTrace:
    """Top-layer states aligned so ``states[:, t]`` is the state that predicts x_t."""
    states: Tensor                      # (B, T, H)
    finals: list[tuple[Tensor, Tensor | None]]
    mask: np.ndarray


@dataclass
class RunResult:
    trace: HiddenTrace
    step_nll: np.ndarray                # (B, T), zero at masked steps
    nll: Tensor                         # scalar, summed over batch and time
    logits: Tensor = field(repr=False, default=None)

    def sequence_nll(self) -> np.ndarray:
        return self.step_nll.sum(axis=1)


# ------------------------------------------------------------------ init

def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(spec: StackSpec, seed: int | np.random.Generator, scheme: str = "uniform",
                dtype=np.float64) -> tuple[RnnStack, OutputHead]:
    """Build a stack and head; weights are U(-1/sqrt(hidden), 1/sqrt(hidden)).

    LSTM biases are zero except the forget gate, which starts at +1.
    ``orthogonal`` replaces each recurrent gate block with an orthogonal matrix.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    H = spec.hidden
    G = 4 if spec.cell == "lstm" else 3
    bound = 1.0 / np.sqrt(H)
    tag = spec.direction[:3]
    embed = Tensor(rng.standard_normal((spec.num_classes + 2, spec.embed_dim)) * 0.1,
                   requires_grad=True, name=f"{tag}.embed", dtype=dtype)
    layers = []
    in_size = spec.embed_dim + spec.cond_dim
    for i in range(spec.layers):
        w_x = rng.uniform(-bound, bound, (in_size, G * H))
        if scheme == "orthogonal":
            w_h = np.concatenate([_orthogonal(rng, H) for _ in range(G)], axis=1)
        else:
            w_h = rng.uniform(-bound, bound, (H, G * H))
        b = np.zeros(G * H)
        if spec.cell == "lstm":
            b[H:2 * H] = 1.0
        layers.append(CellParams(
            spec.cell,
            Tensor(w_x, True, f"{tag}.l{i}.w_x", dtype),
            Tensor(w_h, True, f"{tag}.l{i}.w_h", dtype),
            Tensor(b, True, f"{tag}.l{i}.b", dtype),
        ))
        in_size = H
    n_out = 1 if spec.output == "bernoulli" else spec.num_classes
    head = OutputHead(
        spec.output,
        Tensor(rng.uniform(-bound, bound, (H, n_out)), True, f"{tag}.head.w", dtype),
        Tensor(np.zeros(n_out), True, f"{tag}.head.b", dtype),
    )
    return RnnStack(spec, embed, layers), head


# ------------------------------------------------------------------ single steps

def _cell_pre(params: CellParams, x: Tensor) -> Tensor:
    if x.shape[1] != params.input_size:
        raise ad.ShapeError(f"cell expects input width {params.input_size}, got {x.shape[1]}")
    return ad.add_bias(ad.matmul(x, params.w_x), params.b)


def lstm_step(params: CellParams, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM transition built from primitive ops (no peepholes)."""
    h, c = state
    H = params.hidden_size
    z = ad.add(_cell_pre(params, x), ad.matmul(h, params.w_h))
    i = ad.sigmoid(ad.take(z, (slice(None), slice(0, H))))
    f = ad.sigmoid(ad.take(z, (slice(None), slice(H, 2 * H))))
    g = ad.tanh(ad.take(z, (slice(None), slice(2 * H, 3 * H))))
    o = ad.sigmoid(ad.take(z, (slice(None), slice(3 * H, 4 * H))))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _gru_from_pre(params: CellParams, px: Tensor, h: Tensor) -> Tensor:
    H = params.hidden_size
    ph = ad.matmul(h, params.w_h)

    def part(t, k):
        return ad.take(t, (slice(None), slice(k * H, (k + 1) * H)))

    r = ad.sigmoid(ad.add(part(px, 0), part(ph, 0)))
    z = ad.sigmoid(ad.add(part(px, 1), part(ph, 1)))
    n = ad.tanh(ad.add(part(px, 2), ad.mul(r, part(ph, 2))))
    # h' = n + z * (h - n)
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def gru_step(params: CellParams, x: Tensor, h: Tensor) -> Tensor:
    return _gru_from_pre(params, _cell_pre(params, x), h)


# ------------------------------------------------------------------ sequence runs

def _check_tokens(stack: RnnStack, batch) -> None:
    tokens, mask = batch.tokens, batch.mask
    K = stack.spec.num_classes
    live = mask != 0
    if live.any():
        vals = tokens[live]
        if vals.min() < 0 or vals.max() >= K:
            raise ValueError(f"token id out of vocabulary range [0, {K})")


def _input_ids(stack: RnnStack, batch, reverse: bool) -> np.ndarray:
    tokens = np.where(batch.mask != 0, batch.tokens, 0)
    B, T = tokens.shape
    ids = np.empty((B, T), dtype=np.int64)
    if not reverse:
        ids[:, 0] = stack.spec.sos
        ids[:, 1:] = tokens[:, :-1]
    else:
        ids[:, :-1] = tokens[:, 1:]
        ids[:, -1] = stack.spec.eos
        lengths = np.asarray(batch.lengths)
        rows = np.nonzero(lengths > 0)[0]
        ids[rows, lengths[rows] - 1] = stack.spec.eos
    return ids


def _layer_inputs(stack: RnnStack, batch, ids: np.ndarray) -> Tensor:
    x = ad.embedding(stack.embed, ids)
    cd = stack.spec.cond_dim
    if cd:
        cond = getattr(batch, "cond", None)
        if cond is None:
            raise ValueError("stack expects a conditioning vector but the batch has none")
        cond = cond if isinstance(cond, Tensor) else Tensor(cond, dtype=x.dtype)
        if cond.shape != (ids.shape[0], cd):
            raise ad.ShapeError(f"conditioning shape {cond.shape} != {(ids.shape[0], cd)}")
        B, T = ids.shape
        c3 = ad.broadcast_to(ad.reshape(cond, (B, 1, cd)), (B, T, cd))
        x = ad.concat([x, c3], axis=2)
    return x


def _first_layer_pre(stack: RnnStack, layer: CellParams, batch, ids: np.ndarray) -> Tensor:
    """Layer-0 pre-activations, same values as ``_cell_pre`` on ``_layer_inputs``.

    The embedding table is projected once and gathered, and the per-sequence
    conditioning is projected once and broadcast over time, instead of
    multiplying every (sequence, step) row.
    """
    E = stack.spec.embed_dim
    cd = stack.spec.cond_dim
    w_emb = ad.take(layer.w_x, (slice(0, E),)) if cd else layer.w_x
    table = ad.add_bias(ad.matmul(stack.embed, w_emb), layer.b)
    pre = ad.embedding(table, ids)
    if cd:
        B = ids.shape[0]
        cond = getattr(batch, "cond", None)
        if cond is None:
            raise ValueError("stack expects a conditioning vector but the batch has none")
        cond = cond if isinstance(cond, Tensor) else Tensor(cond, dtype=table.dtype)
        if cond.shape != (B, cd):
            raise ad.ShapeError(f"conditioning shape {cond.shape} != {(B, cd)}")
        proj = ad.matmul(cond, ad.take(layer.w_x, (slice(E, E + cd),)))
        pre = ad.add_broadcast(pre, ad.reshape(proj, (B, 1, proj.shape[1])))
    return pre


def _gru_sequence(params: CellParams, pre: Tensor, h0: Tensor, mask: np.ndarray,
                  reverse: bool) -> tuple[Tensor, Tensor]:
    B, T, _ = pre.shape
    H = params.hidden_size
    steps = range(T - 1, -1, -1) if reverse else range(T)
    h = h0
    outs: list[Tensor | None] = [None] * T
    for t in steps:
        px = ad.take(pre, (slice(None), t))
        h_new = _gru_from_pre(params, px, h)
        m = mask[:, t]
        if not m.all():
            keep = np.repeat(m[:, None], H, axis=1).astype(pre.dtype)
            h_new = ad.add(ad.mul(h_new, Tensor(keep)), ad.mul(h, Tensor(1.0 - keep)))
        h = h_new
        outs[t] = ad.reshape(h, (B, 1, H))
    return ad.concat(outs, axis=1), h


def _dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


def _run(stack: RnnStack, head: OutputHead, batch, reverse: bool, initial=None,
         train: bool = False, rng: np.random.Generator | None = None) -> RunResult:
    _check_tokens(stack, batch)
    mask = np.asarray(batch.mask)
    B, T = mask.shape
    dtype = stack.embed.dtype
    ids = _input_ids(stack, batch, reverse)
    x = None
    finals = []
    rate = stack.spec.dropout if train else 0.0
    if rate > 0 and rng is None:
        raise ValueError("dropout during training needs an rng")
    top = None
    for i, layer in enumerate(stack.layers):
        H = layer.hidden_size
        if initial is not None:
            h0, c0 = initial[i]
        else:
            h0 = Tensor(np.zeros((B, H), dtype=dtype))
            c0 = Tensor(np.zeros((B, H), dtype=dtype))
        if i == 0:
            pre = _first_layer_pre(stack, layer, batch, ids)
        else:
            flat = ad.reshape(x, (B * T, x.shape[2]))
            pre = ad.reshape(_cell_pre(layer, flat), (B, T, layer.gates * H))
        if layer.kind == "lstm":
            states, h_last, c_last = ad.lstm_sequence(pre, layer.w_h, h0, c0, mask, reverse)
            finals.append((h_last, c_last))
        else:
            states, h_last = _gru_sequence(layer, pre, h0, mask, reverse)
            finals.append((h_last, None))
        top = states
        x = _dropout(states, rate, rng) if rate > 0 else states
    H = stack.hidden_size
    logits = ad.add_bias(ad.matmul(ad.reshape(x, (B * T, H)), head.w), head.b)
    targets = np.where(mask != 0, batch.tokens, 0).reshape(-1)
    if head.kind == "softmax":
        rows = ad.softmax_nll_rows(logits, targets, mask.reshape(-1))
    else:
        rows = ad.sigmoid_nll_rows(logits, targets, mask.reshape(-1))
    nll = ad.total(rows)
    trace = HiddenTrace(top, finals, mask)
    return RunResult(trace, rows.data.reshape(B, T), nll, logits)


def run_forward(stack: RnnStack, head: OutputHead, batch, initial=None, train: bool = False,
                rng: np.random.Generator | None = None) -> RunResult:
    """Teacher-forced pass predicting x_t from x_{<t}."""
    return _run(stack, head, batch, reverse=False, initial=initial, train=train, rng=rng)


def run_backward(stack: RnnStack, head: OutputHead, batch, initial=None, train: bool = False,
                 rng: np.random.Generator | None = None) -> RunResult:
    """Teacher-forced pass predicting x_t from x_{>t}, iterating t = T..1.

    Trailing padding is visited first and leaves the initial state untouched,
    so the last real step still starts from the initial state and reads EOS.
    """
    return _run(stack, head, batch, reverse=True, initial=initial, train=train, rng=rng)


# ------------------------------------------------------------------ sampling

def sample(stack: RnnStack, head: OutputHead, length: int, seed: int, temperature: float = 1.0,
           conditioning: np.ndarray | None = None, n: int = 1) -> np.ndarray:
    """Ancestral sampling from a forward stack; returns (n, length) token ids.

    ``temperature == 0`` decodes greedily.
    """
    if stack.direction != "forward":
        raise ValueError("sampling needs the forward stack")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    rng = np.random.default_rng(seed)
    dtype = stack.embed.dtype
    cd = stack.spec.cond_dim
    if cd:
        if conditioning is None:
            raise ValueError("stack expects conditioning for sampling")
        cond = np.broadcast_to(np.asarray(conditioning, dtype=dtype).reshape(-1, cd), (n, cd))
    states = []
    for layer in stack.layers:
        H = layer.hidden_size
        z = np.zeros((n, H), dtype=dtype)
        states.append((Tensor(z), Tensor(z.copy())) if layer.kind == "lstm" else Tensor(z))
    prev = np.full(n, stack.spec.sos, dtype=np.int64)
    out = np.empty((n, length), dtype=np.int64)
    for t in range(length):
        x = Tensor(stack.embed.data[prev])
        if cd:
            x = Tensor(np.concatenate([x.data, cond], axis=1))
        for i, layer in enumerate(stack.layers):
            if layer.kind == "lstm":
                h, c = lstm_step(layer, x, states[i])
                states[i] = (h, c)
            else:
                h = gru_step(layer, x, states[i])
                states[i] = h
            x = h
        logits = x.data @ head.w.data + head.b.data
        u = rng.random(n)
        if head.kind == "bernoulli":
            z = logits[:, 0]
            if temperature == 0:
                tok = (z > 0).astype(np.int64)
            else:
                p = 0.5 * (1.0 + np.tanh(0.5 * z / temperature))
                tok = (u < p).astype(np.int64)
        elif temperature == 0:
            tok = logits.argmax(axis=1)
        else:
            s = logits / temperature
            s = s - s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            cdf = np.cumsum(p, axis=1)
            tok = np.minimum((u[:, None] > cdf).sum(axis=1), p.shape[1] - 1)
        out[:, t] = tok
        prev = tok
    return out
