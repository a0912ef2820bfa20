"""Hot loops of the LSTM: single-step and full-sequence forward, and BPTT.

Gate blocks are stacked row-wise in the order candidate, forget, input,
output, so ``Wx[:u]`` is W1, ``Wx[u:2u]`` is W3, ``Wx[2u:3u]`` is W5 and
``Wx[3u:]`` is W7 (likewise W2/W4/W6/W8 in ``Wh`` and b1..b4 in ``b``).
Activations are stored in the same block order: tanh candidate, then the
three sigmoid gates.

Every function here compiles under numba unless ``LSTMTROJAN_NO_JIT`` is
set, in which case the identical source runs as numpy.
"""
import numpy as np

from ._accel import njit


@njit
def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@njit
def lstm_step(Wx, Wh, b, x, c_prev, h_prev):
    """One time step. Returns ``(acts, c, h)``."""
    u = h_prev.shape[0]
    z = np.dot(Wx, x) + np.dot(Wh, h_prev) + b
    acts = np.empty(4 * u)
    acts[:u] = np.tanh(z[:u])
    acts[u:] = _sigmoid(z[u:])
    c = acts[u:2 * u] * c_prev + acts[2 * u:3 * u] * acts[:u]
    h = acts[3 * u:] * np.tanh(c)
    return acts, c, h


@njit
def lstm_forward_seq(Wx, Wh, b, X, c0, h0):
    """Run one layer over ``X`` (T x in). Returns ``(acts, C, H)``."""
    T = X.shape[0]
    u = h0.shape[0]
    ZX = np.dot(X, Wx.T)
    acts = np.empty((T, 4 * u))
    C = np.empty((T, u))
    H = np.empty((T, u))
    c = c0.copy()
    h = h0.copy()
    for t in range(T):
        z = ZX[t] + np.dot(Wh, h) + b
        g = np.tanh(z[:u])
        gates = _sigmoid(z[u:])
        f = gates[:u]
        i = gates[u:2 * u]
        o = gates[2 * u:]
        c = f * c + i * g
        h = o * np.tanh(c)
        acts[t, :u] = g
        acts[t, u:] = gates
        C[t] = c
        H[t] = h
    return acts, C, H


@njit
def lstm_backward_seq(Wx, Wh, X, acts, C, H, c0, h0, dH, dWx, dWh, db):
    """Reverse-mode pass for one layer.

    ``dH`` is the loss gradient arriving at each hidden output from above.
    Parameter gradients are accumulated in place into ``dWx``, ``dWh`` and
    ``db``. Returns ``(dX, dc0, dh0)``.
    """
    T = X.shape[0]
    u = h0.shape[0]
    dZ = np.empty((T, 4 * u))
    dh_next = np.zeros(u)
    dc_next = np.zeros(u)
    for t in range(T - 1, -1, -1):
        g = acts[t, :u]
        f = acts[t, u:2 * u]
        i = acts[t, 2 * u:3 * u]
        o = acts[t, 3 * u:]
        if t > 0:
            c_prev = C[t - 1]
        else:
            c_prev = c0
        tc = np.tanh(C[t])
        dh = dH[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dZ[t, :u] = dc * i * (1.0 - g * g)
        dZ[t, u:2 * u] = dc * c_prev * f * (1.0 - f)
        dZ[t, 2 * u:3 * u] = dc * g * i * (1.0 - i)
        dZ[t, 3 * u:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = np.dot(Wh.T, dZ[t])
    dWx += np.dot(dZ.T, X)
    dWh += np.outer(dZ[0], h0)
    if T > 1:
        dWh += np.dot(dZ[1:].T, H[:-1])
    db += dZ.sum(axis=0)
    dX = np.dot(dZ, Wx)
    return dX, dc_next, dh_next
