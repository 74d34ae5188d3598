"""Fused LSTM sequence kernels (time-major layout).

Gate order inside every 4H block is ``[input, forget, cell, output]``.
Sigmoid gates are evaluated as ``0.5 + 0.5 * tanh(z / 2)`` so that every
transcendental call goes through numpy's vectorised ``tanh``; the numba
kernels only do the cheap per-element arithmetic around it.
"""

from __future__ import annotations

import numpy as np
from numba import njit


def gate_scale(hidden: int) -> np.ndarray:
    scale = np.full(4 * hidden, 0.5)
    scale[2 * hidden : 3 * hidden] = 1.0
    return scale


@njit(cache=True)
def _cell_gates(a, c_prev, c_out):
    # a holds tanh of the scaled pre-activations; turn the sigmoid slots
    # into gate values in place and write the new cell state.
    n, g4 = a.shape
    h = g4 // 4
    for b in range(n):
        for j in range(h):
            i = 0.5 * a[b, j] + 0.5
            f = 0.5 * a[b, h + j] + 0.5
            o = 0.5 * a[b, 3 * h + j] + 0.5
            a[b, j] = i
            a[b, h + j] = f
            a[b, 3 * h + j] = o
            c_out[b, j] = f * c_prev[b, j] + i * a[b, 2 * h + j]


@njit(cache=True)
def _cell_backward(a, c_prev, tc, dh, dc, dz):
    n, g4 = a.shape
    h = g4 // 4
    for b in range(n):
        for j in range(h):
            i = a[b, j]
            f = a[b, h + j]
            g = a[b, 2 * h + j]
            o = a[b, 3 * h + j]
            t = tc[b, j]
            dhh = dh[b, j]
            dz[b, 3 * h + j] = dhh * t * o * (1.0 - o)
            dcc = dc[b, j] + dhh * o * (1.0 - t * t)
            dz[b, j] = dcc * g * i * (1.0 - i)
            dz[b, h + j] = dcc * c_prev[b, j] * f * (1.0 - f)
            dz[b, 2 * h + j] = dcc * i * (1.0 - g * g)
            dc[b, j] = dcc * f


def lstm_forward(x, w_x, w_h, b, h0=None, c0=None, keep=True):
    """Run one LSTM layer over a time-major sequence ``x`` of shape (L, B, in).

    Returns the hidden sequence (L, B, H) and, when ``keep`` is set, the
    cache needed by :func:`lstm_backward`.
    """
    steps, batch, _ = x.shape
    hidden = w_h.shape[0]
    scale = gate_scale(hidden)
    z = (x.reshape(steps * batch, -1) @ (w_x * scale) + b * scale).reshape(steps, batch, 4 * hidden)
    w_hs = w_h * scale
    hs = np.empty((steps + 1, batch, hidden))
    cs = np.empty((steps + 1, batch, hidden))
    hs[0] = 0.0 if h0 is None else h0
    cs[0] = 0.0 if c0 is None else c0
    if keep:
        gates = z
        tcs = np.empty((steps, batch, hidden))
    else:
        tc = np.empty((batch, hidden))
    for t in range(steps):
        a = z[t]
        a += hs[t] @ w_hs
        np.tanh(a, out=a)
        _cell_gates(a, cs[t], cs[t + 1])
        out_tc = tcs[t] if keep else tc
        np.tanh(cs[t + 1], out=out_tc)
        np.multiply(a[:, 3 * hidden :], out_tc, out=hs[t + 1])
    if not keep:
        return hs[1:], None
    return hs[1:], (x, hs, cs, gates, tcs)


def lstm_backward(cache, w_x, w_h, d_out):
    """Backpropagate ``d_out`` (L, B, H) through a cached layer.

    Returns gradients for (x, w_x, w_h, b, h0, c0).
    """
    x, hs, cs, gates, tcs = cache
    steps, batch, hidden = d_out.shape
    dz = np.empty((steps, batch, 4 * hidden))
    dh = np.zeros((batch, hidden))
    dc = np.zeros((batch, hidden))
    w_ht = np.ascontiguousarray(w_h.T)
    for t in range(steps - 1, -1, -1):
        dh += d_out[t]
        _cell_backward(gates[t], cs[t], tcs[t], dh, dc, dz[t])
        np.dot(dz[t], w_ht, out=dh)
    flat_dz = dz.reshape(steps * batch, 4 * hidden)
    d_wh = hs[:-1].reshape(steps * batch, hidden).T @ flat_dz
    d_wx = x.reshape(steps * batch, -1).T @ flat_dz
    d_b = flat_dz.sum(axis=0)
    d_x = (flat_dz @ w_x.T).reshape(x.shape)
    return d_x, d_wx, d_wh, d_b, dh, dc
