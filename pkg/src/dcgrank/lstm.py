"""Batched, length-masked LSTM with a hand-written backward pass.

Sequences are right-padded; ``mask[b, t]`` is 1 for real steps.  Gate order
in the packed pre-activation is input, forget, output, candidate.
"""

from __future__ import annotations

import numpy as np

from .numkit import ParamStore, sigmoid


def init_lstm(params: ParamStore, prefix: str, n_in: int, n_hidden: int,
              rng: np.random.Generator, scale: float | None = None) -> None:
    scale = scale if scale is not None else 1.0 / np.sqrt(n_hidden)
    params.add(f"{prefix}.Wx", rng.uniform(-scale, scale, (n_in, 4 * n_hidden)))
    params.add(f"{prefix}.Wh", rng.uniform(-scale, scale, (n_hidden, 4 * n_hidden)))
    b = np.zeros((1, 4 * n_hidden))
    b[0, n_hidden:2 * n_hidden] = 1.0  # forget-gate bias
    params.add(f"{prefix}.b", b)


def lstm_forward(params: ParamStore, prefix: str, X: np.ndarray, mask: np.ndarray,
                 h0: np.ndarray | None = None, c0: np.ndarray | None = None):
    """Run over ``X`` (B, T, in).  Returns ``(outputs, cache)``.

    Outputs at padded steps are zero; state is carried through padding.
    """
    Wx, Wh, b = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"], params[f"{prefix}.b"]
    B, T, _ = X.shape
    H = Wh.shape[0]
    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H)) if c0 is None else c0
    out = np.zeros((B, T, H))
    steps = []
    for t in range(T):
        m = mask[:, t:t + 1]
        z = X[:, t] @ Wx + h @ Wh + b
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        o = sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps.append((h, c, i, f, o, g, tc))
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        out[:, t] = m * h_new
    return out, (prefix, X, mask, steps)


def lstm_backward(params: ParamStore, dout: np.ndarray, cache):
    """Accumulate parameter gradients; return ``(dX, dh0, dc0)``."""
    prefix, X, mask, steps = cache
    Wx, Wh = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"]
    gWx, gWh, gb = (params.grad(f"{prefix}.{n}") for n in ("Wx", "Wh", "b"))
    B, T, _ = X.shape
    H = Wh.shape[0]
    dX = np.zeros_like(X)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in reversed(range(T)):
        h_prev, c_prev, i, f, o, g, tc = steps[t]
        m = mask[:, t:t + 1]
        dh_new = m * (dh + dout[:, t])
        dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc_new * g * i * (1.0 - i),
            dc_new * c_prev * f * (1.0 - f),
            dh_new * tc * o * (1.0 - o),
            dc_new * i * (1.0 - g * g),
        ], axis=1)
        gWx += X[:, t].T @ dz
        gWh += h_prev.T @ dz
        gb += dz.sum(axis=0, keepdims=True)
        dX[:, t] = dz @ Wx.T
        dh = dz @ Wh.T + (1.0 - m) * dh
        dc = dc_new * f + (1.0 - m) * dc
    return dX, dh, dc


def reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row index that reverses the first ``length`` steps in place.

    The map is an involution, so the same index undoes the reversal.
    """
    t = np.arange(T)[None, :]
    n = lengths[:, None]
    return np.where(t < n, n - 1 - t, t)
