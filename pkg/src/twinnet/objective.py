"""The twin penalty, the combined training objective and its ablations.

All quantities are in minimization form: the optimizer sees

    total = NLL_forward + NLL_backward + alpha * penalty

averaged over the batch, where ``penalty = sum_t ||g(h_t^f) - sg(h_t^b)||_2``
and ``sg`` blocks gradients so the backward network learns from its own
likelihood only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .cells import run_backward, run_forward

BACKWARD_MODES = ("twin", "gaussian-noise", "zeros-AR", "stabilizing-norm", "baseline")
G_MODES = ("identity", "learned")


@dataclass
class AffineMap:
    """``g(h) = h W + b``; with ``identity`` set the map is parameter-free."""
    weight: Tensor | None
    bias: Tensor | None
    identity: bool = False

    @classmethod
    def create(cls, d_f: int, d_b: int, dtype=np.float64, name: str = "g") -> "AffineMap":
        # start at the identity (zero-padded when d_f != d_b)
        w = np.eye(d_f, d_b)
        return cls(Tensor(w, True, f"{name}.w", dtype), Tensor(np.zeros(d_b), True, f"{name}.b", dtype))

    @property
    def out_dim(self) -> int | None:
        return None if self.identity else self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if self.identity:
            return x
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)

    def named_params(self) -> dict[str, Tensor]:
        if self.identity:
            return {}
        return {"g.w": self.weight, "g.b": self.bias}


IDENTITY = AffineMap(None, None, identity=True)


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 1.5
    backward_mode: str = "twin"
    g_mode: str = "learned"
    noise_sigma: float = 1.0
    normalize_by_length: bool = False

    def __post_init__(self):
        if self.backward_mode not in BACKWARD_MODES:
            raise ValueError(f"unknown backward mode {self.backward_mode!r}")
        if self.g_mode not in G_MODES:
            raise ValueError(f"unknown g mode {self.g_mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass
class LossBreakdown:
    total: Tensor
    nll_f: Tensor
    nll_b: Tensor
    penalty: Tensor
    alpha: float
    penalty_trace: np.ndarray           # (B, T) per-step L_t
    step_nll_f: np.ndarray              # (B, T)
    forward_states: Tensor | None = field(default=None, repr=False)
    backward_states: Tensor | None = field(default=None, repr=False)

    @property
    def forward_nll(self) -> float:
        return float(self.nll_f.data)

    @property
    def backward_nll(self) -> float:
        return float(self.nll_b.data)

    @property
    def penalty_value(self) -> float:
        return float(self.penalty.data)

    @property
    def total_value(self) -> float:
        return float(self.total.data)


def _flat(states: Tensor) -> Tensor:
    B, T, H = states.shape
    return ad.reshape(states, (B * T, H))


def _length_weights(mask: np.ndarray, normalize: bool) -> np.ndarray:
    if not normalize:
        return mask
    lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    return mask / lengths


def twin_penalty(hf: Tensor, hb: Tensor, g: AffineMap, mask, normalize_by_length: bool = False
                 ) -> tuple[Tensor, np.ndarray]:
    """Sum over batch and time of ``||g(h_t^f) - sg(h_t^b)||_2`` on live steps.

    Returns the scalar and the unweighted (B, T) per-step trace.
    """
    mask = np.asarray(mask, dtype=hf.dtype)
    if hf.shape[:2] != hb.shape[:2] or hf.shape[:2] != mask.shape:
        raise ad.ShapeError(f"twin_penalty: traces {hf.shape}, {hb.shape} and mask {mask.shape} disagree")
    B, T = mask.shape
    mapped = g(_flat(hf))
    if mapped.shape[1] != hb.shape[2]:
        raise ad.ShapeError(f"g maps to width {mapped.shape[1]} but backward states have {hb.shape[2]}")
    target = ad.stop_gradient(_flat(hb))
    rows = ad.row_distances(mapped, target, _length_weights(mask, normalize_by_length).reshape(-1))
    trace = np.sqrt(((mapped.data - target.data) ** 2).sum(axis=1)).reshape(B, T) * mask
    return ad.total(rows), trace


def stabilizing_penalty(hf: Tensor, mask, normalize_by_length: bool = False
                        ) -> tuple[Tensor, np.ndarray]:
    """Sum of squared differences between norms of consecutive live states."""
    mask = np.asarray(mask, dtype=hf.dtype)
    B, T, _ = hf.shape
    norms = ad.reshape(ad.row_norms(_flat(hf)), (B, T))
    diff = ad.sub(ad.take(norms, (slice(None), slice(1, None))),
                  ad.take(norms, (slice(None), slice(0, T - 1))))
    pairs = mask[:, 1:] * mask[:, :-1]
    w = pairs
    if normalize_by_length:
        w = pairs / np.maximum(mask.sum(axis=1, keepdims=True), 1)
    sq = ad.mul(diff, diff)
    pen = ad.total(ad.mul(sq, Tensor(w)))
    trace = np.zeros((B, T), dtype=hf.dtype)
    trace[:, 1:] = sq.data * pairs
    return pen, trace


def _resolve_g(model, cfg: ObjectiveConfig) -> AffineMap:
    return IDENTITY if cfg.g_mode == "identity" else model.g


def compute_objective(model, batch, cfg: ObjectiveConfig, rng: np.random.Generator | None = None,
                      train: bool = False, rngs: tuple | None = None,
                      frozen_targets: np.ndarray | None = None) -> LossBreakdown:
    """Evaluate the training objective for one batch under ``cfg.backward_mode``.

    ``rng`` drives the gaussian-noise targets; ``rngs`` is an optional
    (forward, backward) pair of generators for dropout. In twin mode
    ``frozen_targets`` replaces the live backward states inside the penalty
    (the backward NLL is still computed live); finite-difference checks use
    it to express the stop-gradient as an ordinary function.
    """
    mask = np.asarray(batch.mask)
    B = mask.shape[0]
    dtype = model.dtype
    fr, br = rngs if rngs is not None else (None, None)
    fwd = run_forward(model.forward.stack, model.forward.head, batch, train=train, rng=fr)
    hf = fwd.trace.states
    inv_b = 1.0 / B
    zero = Tensor(np.zeros((), dtype=dtype))
    nll_b = zero
    hb = None
    mode = cfg.backward_mode
    g = _resolve_g(model, cfg)
    if mode == "twin":
        bwd = run_backward(model.backward.stack, model.backward.head, batch, train=train, rng=br)
        hb = bwd.trace.states if frozen_targets is None else Tensor(frozen_targets)
        pen, trace = twin_penalty(hf, hb, g, mask, cfg.normalize_by_length)
        nll_b = ad.scale(bwd.nll, inv_b)
    elif mode in ("gaussian-noise", "zeros-AR"):
        width = hf.shape[2] if g.identity else g.out_dim
        shape = (B, mask.shape[1], width)
        if mode == "zeros-AR":
            target = np.zeros(shape, dtype=dtype)
        else:
            if rng is None:
                raise ValueError("gaussian-noise mode needs an rng")
            target = rng.normal(0.0, cfg.noise_sigma, size=shape).astype(dtype)
        hb = Tensor(target)
        pen, trace = twin_penalty(hf, hb, g, mask, cfg.normalize_by_length)
    elif mode == "stabilizing-norm":
        pen, trace = stabilizing_penalty(hf, mask, cfg.normalize_by_length)
    else:
        pen, trace = zero, np.zeros(mask.shape, dtype=dtype)
    nll_f = ad.scale(fwd.nll, inv_b)
    penalty = ad.scale(pen, inv_b) if pen is not zero else zero
    total = ad.add(ad.add(nll_f, nll_b), ad.scale(penalty, cfg.alpha))
    return LossBreakdown(total, nll_f, nll_b, penalty, cfg.alpha, trace, fwd.step_nll, hf, hb)


# ------------------------------------------------------------------ gradient partition

@dataclass
class PartitionRow:
    check: str
    description: str
    group: str
    passed: bool
    max_abs: float


@dataclass
class PartitionReport:
    rows: list[PartitionRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def format(self) -> str:
        lines = [f"{'check':<6}{'group':<10}{'max|grad|':>14}  result  description"]
        for r in self.rows:
            lines.append(f"({r.check})".ljust(6) + f"{r.group:<10}{r.max_abs:>14.3e}  "
                         f"{'PASS' if r.passed else 'FAIL':<6}  {r.description}")
        return "\n".join(lines)


def _max_abs(grads, tensors) -> float:
    out = 0.0
    for t in tensors:
        if t in grads:
            out = max(out, float(np.abs(grads[t]).max()))
    return out


def objective_grad_check(model, batch, cfg: ObjectiveConfig, epsilon: float = 3e-4,
                         max_coords: int | None = None, seed: int = 0, noise_seed: int = 0):
    """Finite-difference check of the full objective gradient for one batch.

    Backward states entering the penalty are frozen at their current values
    and gaussian-noise targets are redrawn from the same seed on every
    evaluation, so the checked function is exactly what the tape differentiates.
    """
    frozen = None
    if cfg.backward_mode == "twin":
        frozen = compute_objective(model, batch, cfg).backward_states.data.copy()

    def loss_fn():
        return compute_objective(model, batch, cfg, rng=np.random.default_rng(noise_seed),
                                 frozen_targets=frozen).total

    return ad.grad_check(loss_fn, model.parameters(), epsilon=epsilon, max_coords=max_coords,
                         seed=seed)


def gradient_partition_check(model, batch, cfg: ObjectiveConfig) -> PartitionReport:
    """Verify the stop-gradient contract on one batch (twin mode).

    (a) the weighted penalty sends exactly zero gradient to the backward net;
    (b) the backward NLL sends exactly zero gradient to the forward net;
    (c) the weighted penalty does reach the forward net.
    """
    if cfg.backward_mode != "twin":
        raise ValueError("gradient_partition_check needs backward_mode='twin'")
    fwd_params = list(model.forward_params().values())
    bwd_params = list(model.backward_params().values())
    with Tape() as tape:
        loss = compute_objective(model, batch, cfg)
        weighted = ad.scale(loss.penalty, cfg.alpha)
    g_pen = tape.backward(weighted)
    a = _max_abs(g_pen, bwd_params)
    c = _max_abs(g_pen, fwd_params)
    tape.zero_grad()
    g_nllb = tape.backward(loss.nll_b)
    b = _max_abs(g_nllb, fwd_params)
    rows = [
        PartitionRow("a", "d(alpha*penalty)/d(theta_b) == 0", "backward", a == 0.0, a),
        PartitionRow("b", "d(NLL_b)/d(theta_f) == 0", "forward", b == 0.0, b),
        PartitionRow("c", "d(alpha*penalty)/d(theta_f) != 0", "forward", c > 0.0, c),
    ]
    return PartitionReport(rows)
