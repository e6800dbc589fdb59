"""Scalar reference implementations used as independent oracles.

Plain Python floats and loops only; nothing here imports the package's
numerical code, so agreement is evidence rather than tautology.
"""
from __future__ import annotations

import itertools
import math


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def vec_mat(v, m):
    """Row vector (list) times matrix (list of rows)."""
    cols = len(m[0])
    return [sum(v[i] * m[i][j] for i in range(len(v))) for j in range(cols)]


def lstm_cell(x, h, c, w_x, w_h, b):
    """Gate order i, f, g, o along the columns; no peepholes."""
    H = len(h)
    z = [a + bb + cc for a, bb, cc in zip(vec_mat(x, w_x), vec_mat(h, w_h), b)]
    i = [sigmoid(v) for v in z[0:H]]
    f = [sigmoid(v) for v in z[H:2 * H]]
    g = [math.tanh(v) for v in z[2 * H:3 * H]]
    o = [sigmoid(v) for v in z[3 * H:4 * H]]
    c2 = [f[k] * c[k] + i[k] * g[k] for k in range(H)]
    h2 = [o[k] * math.tanh(c2[k]) for k in range(H)]
    return h2, c2


def gru_cell(x, h, w_x, w_h, b):
    """Gate order r, z, n; the reset gate multiplies the recurrent candidate term."""
    H = len(h)
    px = [a + bb for a, bb in zip(vec_mat(x, w_x), b)]
    ph = vec_mat(h, w_h)
    r = [sigmoid(px[k] + ph[k]) for k in range(H)]
    z = [sigmoid(px[H + k] + ph[H + k]) for k in range(H)]
    n = [math.tanh(px[2 * H + k] + r[k] * ph[2 * H + k]) for k in range(H)]
    return [(1 - z[k]) * n[k] + z[k] * h[k] for k in range(H)]


def log_softmax_at(logits, k) -> float:
    m = max(logits)
    return logits[k] - m - math.log(sum(math.exp(v - m) for v in logits))


def bernoulli_nll(logit: float, x: int) -> float:
    p = sigmoid(logit)
    return -math.log(p if x == 1 else 1.0 - p)


def run_stack(seq, embed, layers, head_w, head_b, sos, eos, reverse=False, kind="lstm",
              bernoulli=False):
    """Teacher-forced run of one sequence through a single-direction stack.

    ``layers`` is a list of (w_x, w_h, b) as nested lists. Returns the per-step
    NLL and the top-layer state used to predict each x_t.
    """
    T = len(seq)
    if reverse:
        inputs = [seq[t + 1] if t + 1 < T else eos for t in range(T)]
        order = range(T - 1, -1, -1)
    else:
        inputs = [seq[t - 1] if t > 0 else sos for t in range(T)]
        order = range(T)
    H = [len(l[1]) for l in layers]
    h = [[0.0] * n for n in H]
    c = [[0.0] * n for n in H]
    states = [None] * T
    nll = [0.0] * T
    for t in order:
        x = list(embed[inputs[t]])
        for li, (w_x, w_h, b) in enumerate(layers):
            if kind == "lstm":
                h[li], c[li] = lstm_cell(x, h[li], c[li], w_x, w_h, b)
            else:
                h[li] = gru_cell(x, h[li], w_x, w_h, b)
            x = h[li]
        states[t] = list(x)
        logits = [a + bb for a, bb in zip(vec_mat(x, head_w), head_b)]
        nll[t] = bernoulli_nll(logits[0], seq[t]) if bernoulli else -log_softmax_at(logits, seq[t])
    return nll, states


def stack_lists(stack, head):
    """Convert a model stack/head into nested lists for :func:`run_stack`."""
    layers = [(l.w_x.data.tolist(), l.w_h.data.tolist(), l.b.data.tolist()) for l in stack.layers]
    return stack.embed.data.tolist(), layers, head.w.data.tolist(), head.b.data.tolist()


def l2(a, b) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def adam_scalar(grad_fn, theta: float, steps: int, lr: float, b1=0.9, b2=0.999, eps=1e-8):
    """Bias-corrected Adam on one scalar; returns the trajectory including theta_0."""
    m = v = 0.0
    out = [theta]
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


def delayed_copy_enumeration_entropy(length: int, offset: int, alphabet: int) -> float:
    """Entropy (nats) of the delayed-copy generator by enumerating every sequence.

    The generator: choose p uniformly in [0, length - offset), place the
    marker (alphabet - 1) at p and p + offset, fill the rest uniformly from
    the other symbols. A sequence's probability is summed over every p that
    could have produced it.
    """
    marker = alphabet - 1
    n_pos = length - offset
    fill = (1.0 / (alphabet - 1)) ** (length - 2)
    h = 0.0
    for seq in itertools.product(range(alphabet), repeat=length):
        p_seq = 0.0
        for p in range(n_pos):
            if seq[p] != marker or seq[p + offset] != marker:
                continue
            if any(s == marker for i, s in enumerate(seq) if i not in (p, p + offset)):
                continue
            p_seq += fill / n_pos
        if p_seq > 0:
            h -= p_seq * math.log(p_seq)
    return h


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2.0 + 1
            i = j + 1
        return r
    rx, ry = ranks(x), ranks(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den
