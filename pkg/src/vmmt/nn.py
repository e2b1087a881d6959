"""Recurrent layers, bilinear attention, MLPs, initialisation and Adam.

Parameters live in a flat ``dict[str, Tensor]`` keyed by hierarchical,
dot-separated names (``gen.enc.l0.fwd.W_x``).  Layer functions take that dict
and the layer prefix, so a model is just a parameter dict plus the code that
reads from it.
"""
from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

INIT_SCALE = 0.1
MASK_NEG = -1e9
CELL_TYPES = ("lstm", "gru")


class ConfigError(ValueError):
    pass


def uniform_init(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


def init_linear(params: dict, prefix: str, n_in: int, n_out: int, rng) -> None:
    params[f"{prefix}.W"] = T.parameter(uniform_init(rng, (n_in, n_out)), f"{prefix}.W")
    params[f"{prefix}.b"] = T.parameter(np.zeros(n_out), f"{prefix}.b")


def init_embedding(params: dict, name: str, vocab: int, dim: int, rng) -> None:
    params[name] = T.parameter(uniform_init(rng, (vocab, dim)), name)


def linear(params: dict, prefix: str, x: Tensor) -> Tensor:
    return T.affine(x, params[f"{prefix}.W"], params[f"{prefix}.b"])


def init_mlp(params: dict, prefix: str, n_in: int, n_hidden: int, n_out: int, rng) -> None:
    init_linear(params, f"{prefix}.l1", n_in, n_hidden, rng)
    init_linear(params, f"{prefix}.l2", n_hidden, n_out, rng)


def mlp(params: dict, prefix: str, x: Tensor) -> Tensor:
    """affine -> ReLU -> affine; the output is linear."""
    w1 = params[f"{prefix}.l1.W"]
    if x.shape[-1] != w1.shape[0]:
        raise T.ShapeError(f"mlp {prefix}: input dim {x.shape[-1]} != {w1.shape[0]}")
    return linear(params, f"{prefix}.l2", T.relu(linear(params, f"{prefix}.l1", x)))


# ---------------------------------------------------------------------------
# recurrent cells

class RnnState(NamedTuple):
    h: Tensor
    c: Tensor | None = None


def _check_cell(cell: str) -> None:
    if cell not in CELL_TYPES:
        raise ConfigError(f"unknown cell type {cell!r}; expected one of {CELL_TYPES}")


def init_rnn(params: dict, prefix: str, cell: str, n_in: int, n_hidden: int, rng) -> None:
    _check_cell(cell)
    k = 4 if cell == "lstm" else 3
    params[f"{prefix}.W_x"] = T.parameter(uniform_init(rng, (n_in, k * n_hidden)), f"{prefix}.W_x")
    params[f"{prefix}.W_h"] = T.parameter(uniform_init(rng, (n_hidden, k * n_hidden)), f"{prefix}.W_h")
    params[f"{prefix}.b"] = T.parameter(np.zeros(k * n_hidden), f"{prefix}.b")
    if cell == "gru":
        params[f"{prefix}.b_h"] = T.parameter(np.zeros(k * n_hidden), f"{prefix}.b_h")


def zero_state(cell: str, batch: int, hidden: int) -> RnnState:
    _check_cell(cell)
    h = T.constant(np.zeros((batch, hidden)))
    return RnnState(h, T.constant(np.zeros((batch, hidden))) if cell == "lstm" else None)


def _input_proj(params: dict, prefix: str, x: Tensor) -> Tensor:
    return T.affine(x, params[f"{prefix}.W_x"], params[f"{prefix}.b"])


def _step_from_proj(cell: str, params: dict, prefix: str, xp: Tensor, state: RnnState,
                    mask: np.ndarray) -> RnnState:
    if cell == "lstm":
        gates = xp + T.matmul(state.h, params[f"{prefix}.W_h"])
        h, c = T.lstm_pointwise(gates, state.c, state.h, mask)
        return RnnState(h, c)
    H = state.h.shape[1]
    hp = T.affine(state.h, params[f"{prefix}.W_h"], params[f"{prefix}.b_h"])
    r = T.sigmoid(xp[:, :H] + hp[:, :H])
    u = T.sigmoid(xp[:, H:2 * H] + hp[:, H:2 * H])
    n = T.tanh(xp[:, 2 * H:] + r * hp[:, 2 * H:])
    h_new = n + u * (state.h - n)
    if np.all(mask == 1.0):
        return RnnState(h_new)
    m = T.constant(np.repeat(np.asarray(mask, dtype=np.float64)[:, None], H, axis=1))
    return RnnState(state.h + m * (h_new - state.h))


def rnn_cell_step(cell: str, x: Tensor, state: RnnState, params: dict, prefix: str,
                  mask: np.ndarray | None = None) -> RnnState:
    """One recurrent update.  Rows with ``mask == 0`` keep their state."""
    _check_cell(cell)
    if mask is None:
        mask = np.ones(x.shape[0])
    return _step_from_proj(cell, params, prefix, _input_proj(params, prefix, x), state, mask)


def run_rnn(cell: str, params: dict, prefix: str, xs: Tensor, mask: np.ndarray,
            reverse: bool = False) -> Tensor:
    """Run a cell over ``xs`` [B, T, D]; returns hidden states [B, T, H].

    Right-padded rows are handled by masking: the reverse direction starts
    from a zero state at each row's last real token.
    """
    _check_cell(cell)
    B, steps = mask.shape
    hidden = params[f"{prefix}.W_h"].shape[0]
    xp = _input_proj(params, prefix, xs)
    state = zero_state(cell, B, hidden)
    outs: list = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        state = _step_from_proj(cell, params, prefix, xp[:, t, :], state, mask[:, t])
        outs[t] = state.h
    return T.stack(outs, axis=1)


def init_birnn(params: dict, prefix: str, cell: str, n_in: int, n_hidden: int, rng) -> None:
    init_rnn(params, f"{prefix}.fwd", cell, n_in, n_hidden, rng)
    init_rnn(params, f"{prefix}.bwd", cell, n_in, n_hidden, rng)


def birnn(cell: str, params: dict, prefix: str, xs: Tensor, mask: np.ndarray) -> Tensor:
    fwd = run_rnn(cell, params, f"{prefix}.fwd", xs, mask)
    bwd = run_rnn(cell, params, f"{prefix}.bwd", xs, mask, reverse=True)
    return T.concat([fwd, bwd], axis=-1)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Average of ``x`` [B, T, D] over the unmasked positions of each row."""
    B, steps, D = x.shape
    mask = np.asarray(mask, dtype=np.float64)
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("masked_mean: a row has no unmasked positions")
    m3 = T.constant(np.repeat(mask[:, :, None], D, axis=2))
    inv = T.constant(np.repeat((1.0 / lengths)[:, None], D, axis=1))
    return T.sum_(x * m3, axis=1) * inv


# ---------------------------------------------------------------------------
# attention

class Memory(NamedTuple):
    keys: Tensor          # [B, T, 2H] encoder states
    proj: Tensor          # [B, T, Hd] keys projected by the bilinear matrix
    mask_add: Tensor      # [B, T] 0 on real positions, MASK_NEG on padding
    mask: np.ndarray      # [B, T]


def attention_memory(keys: Tensor, mask: np.ndarray, w: Tensor) -> Memory:
    mask = np.asarray(mask, dtype=np.float64)
    if np.any(mask.sum(axis=1) == 0):
        raise ValueError("bilinear_attention: all positions masked")
    return Memory(keys, T.matmul(keys, w), T.constant((1.0 - mask) * MASK_NEG), mask)


def attend(query: Tensor, memory: Memory) -> tuple[Tensor, Tensor]:
    """Returns ``(context, weights)`` for ``query`` [B, Hd]."""
    scores = T.batched_dot(query, memory.proj) + memory.mask_add
    weights = T.softmax(scores)
    return T.weighted_sum(weights, memory.keys), weights


def bilinear_attention(query: Tensor, keys: Tensor, mask: np.ndarray, w: Tensor) -> Tensor:
    """Context ``sum_i softmax_i(query^T W h_i) h_i`` over unmasked keys.

    ``w`` has shape [key_dim, query_dim].
    """
    context, _ = attend(query, attention_memory(keys, mask, w))
    return context


# ---------------------------------------------------------------------------
# optimisation

def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; 0 disables."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


class Adam:
    """Bias-corrected Adam.  A step with any non-finite gradient is skipped."""

    def __init__(self, lr: float = 0.002, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> bool:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                log.warning("adam: non-finite gradient in %s; step skipped", name)
                return False
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.data.shape:
                raise T.ShapeError(f"adam: grad shape {g.shape} != param {name} {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True
