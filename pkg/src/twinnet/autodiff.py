"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` (define-by-run).
Outside a tape every op just computes values, which is what evaluation and
sampling use.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(tanh(matmul(w, w)))
    >>> grads = tape.backward(loss)
    >>> grads[w].shape
    (2, 2)
"""
from __future__ import annotations

import contextlib
import itertools
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor", "Tape", "Gradients", "GradCheckReport",
    "AutodiffError", "ShapeError", "NonFiniteError",
    "matmul", "add", "sub", "mul", "scale", "add_bias", "sigmoid", "tanh",
    "elementwise", "total", "reshape", "take", "concat", "broadcast_to",
    "embedding", "stop_gradient", "softmax_nll_rows", "softmax_cross_entropy",
    "sigmoid_nll_rows", "sigmoid_cross_entropy", "row_distances",
    "l2_distance", "row_norms", "lstm_sequence", "backward", "grad_check",
    "inject_fault", "active_tape", "FAULTABLE_OPS",
]


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


_TAPES: list["Tape"] = []
# op name -> multiplier applied to that op's input adjoints (fault injection)
_FAULTS: dict[str, float] = {}
FAULTABLE_OPS = ("matmul", "add", "sub", "mul", "scale", "add_bias", "sigmoid", "tanh", "total", "reshape",
                 "take", "concat", "broadcast_to", "add_broadcast", "embedding", "softmax_nll_rows",
                 "sigmoid_nll_rows", "row_distances", "lstm_sequence")


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Dense array plus an optional handle into the active tape."""

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self) -> int | None:
        tape = active_tape()
        if tape is None:
            return None
        return tape.node_of(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class _Op:
    name: str
    inputs: list[int | None]
    outputs: list[int]
    backward: Callable[[list], Sequence]


class Gradients:
    """Mapping from tensors to their adjoint arrays for one backward sweep."""

    def __init__(self, tape: "Tape", buffers: dict[int, np.ndarray]):
        self._tape = tape
        self._buffers = buffers

    def __getitem__(self, t: Tensor) -> np.ndarray:
        node = self._tape.node_of(t)
        if node is not None and node in self._buffers:
            return self._buffers[node]
        return np.zeros_like(t.data)

    def __contains__(self, t: Tensor) -> bool:
        node = self._tape.node_of(t)
        return node is not None and node in self._buffers

    def get(self, t: Tensor, default=None):
        return self[t] if t in self else default


class Tape:
    """Ordered record of differentiable operations for one training step."""

    def __init__(self):
        self.ops: list[_Op] = []
        self._ref = weakref.ref(self)
        self._count = itertools.count()
        self._leaves: dict[int, tuple[Tensor, int]] = {}
        self._producer: dict[int, int] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def node_of(self, t: Tensor) -> int | None:
        if t._tape is not None and t._tape() is self:
            return t._node
        leaf = self._leaves.get(id(t))
        if leaf is not None and leaf[0] is t:
            return leaf[1]
        return None

    def _input_node(self, t: Tensor) -> int | None:
        node = self.node_of(t)
        if node is None and t.requires_grad:
            node = next(self._count)
            self._leaves[id(t)] = (t, node)
        return node

    def record(self, name: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor],
               backward_fn: Callable[[list], Sequence]) -> None:
        nodes = [self._input_node(t) for t in inputs]
        if all(n is None for n in nodes):
            return
        out_nodes = []
        for t in outputs:
            # weak so that op closures holding tensors do not form cycles
            t._tape = self._ref
            t._node = next(self._count)
            out_nodes.append(t._node)
            self._producer[t._node] = len(self.ops)
        self.ops.append(_Op(name, nodes, out_nodes, backward_fn))

    def zero_grad(self) -> None:
        self._done = False

    def backward(self, loss: Tensor, order: Sequence[int] | None = None,
                 retain_all: bool = False) -> Gradients:
        """Sweep adjoints from ``loss`` back through the recorded ops.

        ``order`` optionally lists op indices in a (validated) alternative
        topological order; the sweep runs it in reverse. Adjoints of
        intermediate tensors are dropped once consumed unless ``retain_all``.
        """
        if self._done:
            raise AutodiffError("backward() already ran on this tape; call zero_grad() first")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if order is None:
            order = range(len(self.ops))
        else:
            self._validate_order(order)
        buffers: dict[int, np.ndarray] = {}
        root = self.node_of(loss)
        self._done = True
        if root is None:
            return Gradients(self, buffers)
        buffers[root] = np.ones_like(loss.data)
        for idx in reversed(list(order)):
            op = self.ops[idx]
            outs = [buffers.get(n) for n in op.outputs]
            if all(g is None for g in outs):
                continue
            in_grads = op.backward(outs)
            if not retain_all:
                for n in op.outputs:
                    if n != root:
                        buffers.pop(n, None)
            factor = _FAULTS.get(op.name)
            for node, g in zip(op.inputs, in_grads):
                if node is None or g is None:
                    continue
                if factor is not None:
                    g = g * factor
                if not np.isfinite(np.sum(g)) and not np.isfinite(g).all():
                    raise NonFiniteError(f"non-finite adjoint produced by op '{op.name}'")
                prev = buffers.get(node)
                buffers[node] = g if prev is None else prev + g
        return Gradients(self, buffers)

    def _validate_order(self, order: Sequence[int]) -> None:
        if sorted(order) != list(range(len(self.ops))):
            raise AutodiffError("order must be a permutation of recorded op indices")
        seen: set[int] = set(n for _, n in self._leaves.values())
        for idx in order:
            op = self.ops[idx]
            for n in op.inputs:
                if n is not None and n not in seen:
                    raise AutodiffError(f"op {idx} ('{op.name}') scheduled before its inputs")
            seen.update(op.outputs)


def backward(loss: Tensor, tape: Tape) -> Gradients:
    return tape.backward(loss)


@contextlib.contextmanager
def inject_fault(op_name: str, factor: float = 1.5):
    """Scale every adjoint an op emits; used as a negative control for grad checks."""
    if op_name not in FAULTABLE_OPS:
        raise ValueError(f"unknown op {op_name!r}")
    _FAULTS[op_name] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op_name, None)


def _check_finite(name: str, arr: np.ndarray) -> None:
    # sum() propagates NaN/Inf and is much cheaper than isfinite().all()
    if not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"op '{name}' produced non-finite values")


def _emit(name: str, inputs: Sequence[Tensor], out_data, backward_fn) -> Tensor:
    _check_finite(name, out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.record(name, inputs, [out], backward_fn)
    return out


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bwd(g):
        g = g[0]
        return g @ B.T, A.T @ g

    return _emit("matmul", [a, b], A @ B, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", [a, b], a.data + b.data, lambda g: (g[0], g[0]))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", [a, b], a.data - b.data, lambda g: (g[0], -g[0]))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", [a, b], A * B, lambda g: (g[0] * B, g[0] * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", [a], a.data * c, lambda g: (g[0] * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _emit("add_bias", [x, b], x.data + b.data, lambda g: (g[0], g[0].sum(axis=lead)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", [a], s, lambda g: (g[0] * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit("tanh", [a], t, lambda g: (g[0] * (1.0 - t * t),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid,
                "tanh": tanh, "scale": scale}


def elementwise(op: str, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- shape plumbing

def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("total", [a], np.asarray(a.data.sum()),
                 lambda g: (np.broadcast_to(g[0], shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", [a], a.data.reshape(shape), lambda g: (g[0].reshape(old),))


def take(a: Tensor, index) -> Tensor:
    """Numpy-style indexing ``a[index]``."""
    src = a.data

    def bwd(g):
        out = np.zeros_like(src)
        np.add.at(out, index, g[0])
        return (out,)

    return _emit("take", [a], np.array(src[index]), bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in tensors]
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return np.split(g[0], splits, axis=axis)

    return _emit("concat", list(tensors), np.concatenate(arrays, axis=axis), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Broadcast by inserting/expanding leading axes, e.g. (B, C) -> (B, T, C) needs reshape first."""
    src_shape = a.shape
    out = np.broadcast_to(a.data, shape)
    extra = len(shape) - len(src_shape)
    axes = tuple(range(extra)) + tuple(
        extra + i for i, n in enumerate(src_shape) if n == 1 and shape[extra + i] != 1)

    def bwd(g):
        return (g[0].sum(axis=axes).reshape(src_shape),)

    return _emit("broadcast_to", [a], np.array(out), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")

    def bwd(g):
        g = g[0]
        flat = ids
        if g.ndim == 3 and not g.flags.c_contiguous and g.transpose(1, 0, 2).flags.c_contiguous:
            # time-major adjoint from the fused recurrence: reorder ids, not the big array
            g, flat = g.transpose(1, 0, 2), ids.transpose(1, 0)
        g = g.reshape(-1, table.shape[1])
        flat = flat.reshape(-1)
        # scatter-add as a sparse one-hot product; far faster than np.add.at
        onehot = sparse.csr_matrix((np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
                                   shape=(table.shape[0], flat.size))
        return (np.asarray(onehot @ g).astype(table.dtype, copy=False),)

    return _emit("embedding", [table], table.data[ids], bwd)


def add_broadcast(x: Tensor, v: Tensor) -> Tensor:
    """``x + v`` where ``v`` broadcasts against ``x`` (same rank, size-1 axes)."""
    if v.data.ndim != x.data.ndim or any(a != b and a != 1 for a, b in zip(v.shape, x.shape)):
        raise ShapeError(f"add_broadcast: cannot broadcast {v.shape} onto {x.shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(v.shape, x.shape)) if a != b)

    def bwd(g):
        return g[0], g[0].sum(axis=axes, keepdims=True)

    return _emit("add_broadcast", [x, v], x.data + v.data, bwd)


def stop_gradient(t: Tensor) -> Tensor:
    """Same values, but no adjoint ever flows back through this edge."""
    return Tensor(t.data)


# ---------------------------------------------------------------- losses

def _mask_vector(mask, n: int, dtype) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=dtype)
    m = np.asarray(mask, dtype=dtype).reshape(-1)
    if m.shape[0] != n:
        raise ShapeError(f"mask length {m.shape[0]} does not match {n} rows")
    return m


def softmax_nll_rows(logits: Tensor, targets, mask=None) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``, zero on masked-out rows."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_nll_rows expects (N, K) logits, got {z.shape}")
    n, k = z.shape
    y = np.asarray(targets).reshape(-1)
    m = _mask_vector(mask, n, z.dtype)
    live = m != 0
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} targets for {n} rows")
    if live.any() and (y[live].min() < 0 or y[live].max() >= k):
        raise IndexError(f"target index out of range [0, {k})")
    y = np.where(live, y, 0)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = (lse - shifted[np.arange(n), y]) * m

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return (p * (g[0] * m)[:, None],)

    return _emit("softmax_nll_rows", [logits], rows, bwd)


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    return total(softmax_nll_rows(logits, targets, mask))


def sigmoid_nll_rows(logits: Tensor, targets, mask=None) -> Tensor:
    """Bernoulli NLL of binary targets under ``sigmoid(logits)``; logits are (N, 1) or (N,)."""
    z = logits.data.reshape(-1)
    n = z.shape[0]
    y = np.asarray(targets, dtype=z.dtype).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} targets for {n} rows")
    m = _mask_vector(mask, n, z.dtype)
    if np.any((y != 0) & (y != 1) & (m != 0)):
        raise IndexError("binary targets must be 0 or 1")
    # softplus(z) - y*z, stable form
    rows = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))) * m
    shape = logits.shape

    def bwd(g):
        return (((_sigmoid(z) - y) * g[0] * m).reshape(shape),)

    return _emit("sigmoid_nll_rows", [logits], rows, bwd)


def sigmoid_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    return total(sigmoid_nll_rows(logits, targets, mask))


def row_distances(a: Tensor, b: Tensor, mask=None) -> Tensor:
    """Per-row Euclidean distance ``||a_i - b_i||``; zero subgradient where a_i == b_i."""
    _same_shape("row_distances", a, b)
    if a.data.ndim != 2:
        raise ShapeError(f"row_distances expects (N, d) inputs, got {a.shape}")
    diff = a.data - b.data
    norms = np.sqrt((diff * diff).sum(axis=1))
    m = _mask_vector(mask, diff.shape[0], diff.dtype)
    safe = np.where(norms > 0, norms, 1.0)

    def bwd(g):
        unit = diff * ((g[0] * m) / safe * (norms > 0))[:, None]
        return unit, -unit

    return _emit("row_distances", [a, b], norms * m, bwd)


def l2_distance(a: Tensor, b: Tensor, mask=None) -> Tensor:
    return total(row_distances(a, b, mask))


def row_norms(a: Tensor, mask=None) -> Tensor:
    return row_distances(a, Tensor(np.zeros_like(a.data)), mask)


# ---------------------------------------------------------------- fused recurrence

def lstm_sequence(pre: Tensor, w_h: Tensor, h0: Tensor, c0: Tensor, mask,
                  reverse: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Run an LSTM over time given input pre-activations.

    ``pre`` is (B, T, 4H) and already holds ``x W_x + b``; gate layout is
    [input, forget, candidate, output]. Steps with mask 0 carry the previous
    state through unchanged. Returns (states (B, T, H), h_last, c_last).
    """
    P = pre.data
    W = w_h.data
    B, T, G = P.shape
    H = G // 4
    if G != 4 * H or W.shape != (H, G):
        raise ShapeError(f"lstm_sequence: pre {P.shape} incompatible with w_h {W.shape}")
    if h0.shape != (B, H) or c0.shape != (B, H):
        raise ShapeError(f"lstm_sequence: initial state shapes {h0.shape}, {c0.shape} != {(B, H)}")
    dt = P.dtype
    M = np.ones((B, T), dtype=dt) if mask is None else np.asarray(mask, dtype=dt)
    full = M.all(axis=0)
    Mt = np.ascontiguousarray(M.T)[:, :, None]
    steps = range(T - 1, -1, -1) if reverse else range(T)
    i_, f_, g_, o_ = slice(0, H), slice(H, 2 * H), slice(2 * H, 3 * H), slice(3 * H, G)

    # sigmoid(x) = 0.5 * tanh(x / 2) + 0.5, so one tanh over the whole row
    # handles every gate after a per-column scale
    sc = np.full(G, 0.5, dtype=dt)
    sc[g_] = 1.0
    off = np.full(G, 0.5, dtype=dt)
    off[g_] = 0.0
    Ws = W * sc
    # time-major buffers keep every per-step slice contiguous
    acts = np.multiply(P.transpose(1, 0, 2), sc, order="C")
    tanh_c = np.empty((T, B, H), dtype=dt)
    c_all = np.empty((T, B, H), dtype=dt)
    out = np.empty((T, B, H), dtype=dt)
    h, c = h0.data, c0.data
    for t in steps:
        a = acts[t]
        a += h @ Ws
        np.tanh(a, out=a)
        a *= sc
        a += off
        c_new = np.multiply(a[:, f_], c, out=c_all[t])
        c_new += a[:, i_] * a[:, g_]
        tc = np.tanh(c_new, out=tanh_c[t])
        h_new = np.multiply(a[:, o_], tc, out=out[t])
        if not full[t]:
            m = Mt[t]
            h_new[...] = m * h_new + (1.0 - m) * h
            c_new[...] = m * c_new + (1.0 - m) * c
        h, c = h_new, c_new

    def prev_states(states, init):
        prev = np.empty_like(states)
        if reverse:
            prev[:-1] = states[1:]
            prev[-1] = init
        else:
            prev[1:] = states[:-1]
            prev[0] = init
        return prev

    def bwd(grads):
        d_out, d_hT, d_cT = grads
        dh = np.zeros((B, H), dtype=dt) if d_hT is None else d_hT.copy()
        dc = np.zeros((B, H), dtype=dt) if d_cT is None else d_cT.copy()
        d_out_t = None if d_out is None else np.ascontiguousarray(d_out.transpose(1, 0, 2))
        c_prev = prev_states(c_all, c0.data)
        WT = np.ascontiguousarray(W.T)
        dz_all = np.empty((T, B, G), dtype=dt)
        for t in reversed(steps):
            if d_out_t is not None:
                dh += d_out_t[t]
            a = acts[t]
            tc = tanh_c[t]
            if full[t]:
                dh_new, dc_new = dh, dc
                dh_keep = dc_keep = None
            else:
                m = Mt[t]
                dh_new, dc_new = m * dh, m * dc
                dh_keep, dc_keep = (1.0 - m) * dh, (1.0 - m) * dc
            dc_tot = dh_new * a[:, o_]
            dc_tot *= 1.0 - tc * tc
            dc_tot += dc_new
            dz = dz_all[t]
            np.multiply(dc_tot, a[:, g_], out=dz[:, i_])
            np.multiply(dc_tot, c_prev[t], out=dz[:, f_])
            np.multiply(dc_tot, a[:, i_], out=dz[:, g_])
            np.multiply(dh_new, tc, out=dz[:, o_])
            deriv = 1.0 - a
            deriv *= a
            cand = a[:, g_]
            np.multiply(cand, cand, out=deriv[:, g_])
            np.subtract(1.0, deriv[:, g_], out=deriv[:, g_])
            dz *= deriv
            dh = dz @ WT
            dc = dc_tot * a[:, f_]
            if dh_keep is not None:
                dh += dh_keep
                dc += dc_keep
        h_prev = prev_states(out, h0.data)
        dW = h_prev.reshape(-1, H).T @ dz_all.reshape(-1, G)
        return dz_all.transpose(1, 0, 2), dW, dh, dc

    seq = np.ascontiguousarray(out.transpose(1, 0, 2))
    _check_finite("lstm_sequence", seq)
    states, h_last, c_last = Tensor(seq), Tensor(h.copy()), Tensor(c.copy())
    tape = active_tape()
    if tape is not None:
        tape.record("lstm_sequence", [pre, w_h, h0, c0], [states, h_last, c_last], bwd)
    return states, h_last, c_last


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    analytic: float
    numeric: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _loss_value(loss_fn) -> float:
    return float(np.asarray(loss_fn().data).reshape(()))


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               epsilon: float = 3e-4, max_coords: int | None = None, seed: int = 0,
               floor: float = 1e-6, stencil: int = 4) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``stencil`` is 2 (the classic (f(x+e) - f(x-e)) / 2e) or 4 (the
    fourth-order central formula); the latter stays accurate near the kink
    of a norm, where second-order truncation error grows like e^2 / |x|^3.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is below finite-difference
    resolution from dominating. ``max_coords`` subsamples (seeded) per parameter.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise AutodiffError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    base = _loss_value(loss_fn)
    if base != _loss_value(loss_fn) or base != float(loss.data):
        raise AutodiffError("loss_fn is not deterministic: repeated evaluations disagree")
    rng = np.random.default_rng(seed)
    worst = GradCheckReport(0.0, None, None, 0.0, 0.0, 0)
    for name, p in params.items():
        g = grads[p]
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        param_worst = 0.0
        for i in coords:
            orig = flat[i]

            def at(delta):
                flat[i] = orig + delta
                return _loss_value(loss_fn)

            if stencil == 2:
                num = (at(epsilon) - at(-epsilon)) / (2.0 * epsilon)
            else:
                num = (8.0 * (at(epsilon) - at(-epsilon)) - (at(2 * epsilon) - at(-2 * epsilon))) / (12.0 * epsilon)
            flat[i] = orig
            ana = float(g.reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst.n_checked += 1
            param_worst = max(param_worst, rel)
            if rel > worst.max_rel_error or worst.worst_param is None:
                worst.max_rel_error = rel
                worst.worst_param = name
                worst.worst_index = np.unravel_index(i, p.shape)
                worst.analytic, worst.numeric = ana, num
        worst.per_param[name] = param_worst
    return worst
