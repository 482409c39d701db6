"""Small building blocks shared by the encoder and decoders."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, default_dtype


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(default_dtype())
    return Tensor(w, requires_grad=True)


def bias(n: int) -> Tensor:
    return Tensor(np.zeros((1, n), dtype=default_dtype()), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM step; gate columns are ordered (input, forget, candidate, output).

    Shapes: x (B, D), h and c (B, H), w_x (D, 4H), w_h (H, 4H), b (1, 4H).
    """
    hidden = h.shape[1]
    if w_h.shape != (hidden, 4 * hidden) or w_x.shape[1] != 4 * hidden or x.shape[1] != w_x.shape[0]:
        raise ShapeError(
            f"lstm_cell: x{x.shape} h{h.shape} w_x{w_x.shape} w_h{w_h.shape} inconsistent"
        )
    if c.shape != h.shape:
        raise ShapeError(f"lstm_cell: cell state {c.shape} != hidden state {h.shape}")
    gates = x @ w_x + h @ w_h + b
    i = gates[:, 0 * hidden : 1 * hidden].sigmoid()
    f = gates[:, 1 * hidden : 2 * hidden].sigmoid()
    g = gates[:, 2 * hidden : 3 * hidden].tanh()
    o = gates[:, 3 * hidden : 4 * hidden].sigmoid()
    c_next = f * c + i * g
    h_next = o * c_next.tanh()
    return h_next, c_next
