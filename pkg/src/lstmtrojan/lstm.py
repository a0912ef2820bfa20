"""Multi-layer LSTM policy/value network with exact BPTT.

All learnable arrays are views into one flat float64 vector, so optimizers
and gradient clipping work on ``params.flat`` directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

OBS_DIM = 54
N_ACTIONS = 4


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class LstmLayerParameters:
    """Weight views for one layer.

    ``Wx`` stacks W1, W3, W5, W7 (input weights for candidate, forget,
    input and output gate), ``Wh`` stacks W2, W4, W6, W8 and ``b`` stacks
    b1..b4.
    """

    def __init__(self, Wx: np.ndarray, Wh: np.ndarray, b: np.ndarray):
        self.Wx = Wx
        self.Wh = Wh
        self.b = b

    @property
    def units(self) -> int:
        return self.Wh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.Wx.shape[1]

    def _block(self, arr, k):
        u = self.units
        return arr[k * u:(k + 1) * u]

    W1 = property(lambda self: self._block(self.Wx, 0))
    W2 = property(lambda self: self._block(self.Wh, 0))
    W3 = property(lambda self: self._block(self.Wx, 1))
    W4 = property(lambda self: self._block(self.Wh, 1))
    W5 = property(lambda self: self._block(self.Wx, 2))
    W6 = property(lambda self: self._block(self.Wh, 2))
    W7 = property(lambda self: self._block(self.Wx, 3))
    W8 = property(lambda self: self._block(self.Wh, 3))
    b1 = property(lambda self: self._block(self.b, 0))
    b2 = property(lambda self: self._block(self.b, 1))
    b3 = property(lambda self: self._block(self.b, 2))
    b4 = property(lambda self: self._block(self.b, 3))

    def named_arrays(self):
        """``(name, view)`` pairs in checkpoint order W1..W8, b1..b4."""
        names = ["W1", "W2", "W3", "W4", "W5", "W6", "W7", "W8",
                 "b1", "b2", "b3", "b4"]
        return [(n, getattr(self, n)) for n in names]


class LstmParameters:
    """Stacked LSTM trunk plus linear policy and value heads."""

    def __init__(self, input_dim: int, units, n_actions: int = N_ACTIONS, flat=None):
        units = tuple(int(u) for u in units)
        if not units or min(units) <= 0 or input_dim <= 0:
            raise DimensionError(f"bad network dims input={input_dim} units={units}")
        self.input_dim = int(input_dim)
        self.units = units
        self.n_actions = int(n_actions)
        size = self.size_for(self.input_dim, units, self.n_actions)
        if flat is None:
            flat = np.zeros(size)
        elif flat.shape != (size,):
            raise DimensionError(f"flat vector has {flat.shape}, expected ({size},)")
        self.flat = flat
        self.layers: list[LstmLayerParameters] = []
        pos = 0

        def take(shape):
            nonlocal pos
            n = int(np.prod(shape))
            view = flat[pos:pos + n].reshape(shape)
            pos += n
            return view

        d = self.input_dim
        for u in units:
            Wx = take((4 * u, d))
            Wh = take((4 * u, u))
            b = take((4 * u,))
            self.layers.append(LstmLayerParameters(Wx, Wh, b))
            d = u
        self.policy_w = take((self.n_actions, d))
        self.policy_b = take((self.n_actions,))
        self.value_w = take((d,))
        self.value_b = take((1,))

    @staticmethod
    def size_for(input_dim, units, n_actions=N_ACTIONS):
        n = 0
        d = input_dim
        for u in units:
            n += 4 * u * d + 4 * u * u + 4 * u
            d = u
        return n + n_actions * d + n_actions + d + 1

    @property
    def dims(self):
        return (self.input_dim, self.units, self.n_actions)

    def copy(self) -> "LstmParameters":
        return LstmParameters(self.input_dim, self.units, self.n_actions, self.flat.copy())

    def zeros_like(self) -> "LstmParameters":
        return LstmParameters(self.input_dim, self.units, self.n_actions)

    def named_arrays(self):
        out = []
        for k, layer in enumerate(self.layers):
            out.extend((f"layer{k + 1}.{n}", a) for n, a in layer.named_arrays())
        out += [("policy_w", self.policy_w), ("policy_b", self.policy_b),
                ("value_w", self.value_w), ("value_b", self.value_b)]
        return out


@dataclass
class LstmState:
    """Per-layer cell and hidden vectors."""

    c: list
    h: list

    @classmethod
    def zeros(cls, params: LstmParameters) -> "LstmState":
        return cls([np.zeros(u) for u in params.units], [np.zeros(u) for u in params.units])

    def copy(self) -> "LstmState":
        return LstmState([a.copy() for a in self.c], [a.copy() for a in self.h])

    def flatten(self) -> np.ndarray:
        """Concatenation c1, h1, c2, h2, ... used for trace recording."""
        return np.concatenate([v for pair in zip(self.c, self.h) for v in pair])


@dataclass
class NetworkOutput:
    action_probs: np.ndarray
    value: float
    new_state: LstmState
    logits: np.ndarray = field(repr=False, default=None)
    gates: list = field(repr=False, default=None)   # per layer: [candidate, f, i, o] stacked


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def init_parameters(input_dim, units, seed, n_actions=N_ACTIONS) -> LstmParameters:
    """Uniform(-k, k) weights with k = 1/sqrt(fan_in); forget bias b2 = 1."""
    rng = np.random.default_rng(seed)
    p = LstmParameters(input_dim, units, n_actions)
    for layer in p.layers:
        for W in (layer.Wx, layer.Wh):
            k = 1.0 / np.sqrt(W.shape[1])
            W[...] = rng.uniform(-k, k, size=W.shape)
        layer.b2[...] = 1.0
    k = 1.0 / np.sqrt(p.units[-1])
    p.policy_w[...] = rng.uniform(-k, k, size=p.policy_w.shape)
    p.value_w[...] = rng.uniform(-k, k, size=p.value_w.shape)
    return p


def heads(params: LstmParameters, h_last):
    logits = h_last @ params.policy_w.T + params.policy_b
    value = h_last @ params.value_w + params.value_b[0]
    return logits, value


def _check_state(params, state):
    if len(state.c) != len(params.units) or len(state.h) != len(params.units):
        raise DimensionError("state layer count does not match parameters")
    for u, c, h in zip(params.units, state.c, state.h):
        if c.shape != (u,) or h.shape != (u,):
            raise DimensionError(f"state vector shapes {c.shape}/{h.shape}, expected ({u},)")


def forward(params: LstmParameters, state: LstmState, x) -> NetworkOutput:
    """Advance the network one step from ``state`` on input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise DimensionError(f"input has shape {x.shape}, expected ({params.input_dim},)")
    _check_state(params, state)
    cs, hs, gates = [], [], []
    inp = x
    for layer, c, h in zip(params.layers, state.c, state.h):
        acts, c, h = kernels.lstm_step(layer.Wx, layer.Wh, layer.b, inp, c, h)
        gates.append(acts)
        cs.append(c)
        hs.append(h)
        inp = h
    logits, value = heads(params, inp)
    if not (np.all(np.isfinite(logits)) and np.isfinite(value)):
        raise NonFiniteError("network produced a non-finite output")
    return NetworkOutput(softmax(logits), float(value), LstmState(cs, hs), logits, gates)


@dataclass
class SequenceCache:
    """Everything BPTT needs from a forward pass over one sequence."""

    inputs: list      # per-layer input matrix (T x in)
    acts: list
    C: list
    H: list
    c0: list
    h0: list
    logits: np.ndarray
    probs: np.ndarray
    values: np.ndarray


def forward_sequence(params: LstmParameters, X, state: LstmState | None = None) -> SequenceCache:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise DimensionError(f"sequence has shape {X.shape}, expected (T, {params.input_dim})")
    if state is None:
        state = LstmState.zeros(params)
    _check_state(params, state)
    inputs, acts_l, C_l, H_l = [], [], [], []
    inp = X
    for layer, c0, h0 in zip(params.layers, state.c, state.h):
        acts, C, H = kernels.lstm_forward_seq(layer.Wx, layer.Wh, layer.b, inp, c0, h0)
        inputs.append(inp)
        acts_l.append(acts)
        C_l.append(C)
        H_l.append(H)
        inp = H
    logits, values = heads(params, inp)
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(values))):
        raise NonFiniteError("network produced a non-finite output")
    return SequenceCache(inputs, acts_l, C_l, H_l, list(state.c), list(state.h),
                         logits, softmax(logits), values)


def backward(params: LstmParameters, cache: SequenceCache, d_logits=None, d_values=None,
             d_hidden=None, return_input_grad: bool = False):
    """Gradient of a loss w.r.t. every parameter by BPTT.

    The upstream gradients are dL/dlogits (T x A), dL/dvalue (T,) and,
    optionally, dL/dh of the last layer (T x U) for losses defined directly
    on hidden states. Missing arguments count as zero. With
    ``return_input_grad`` the result is ``(grads, dL/dX)``.
    """
    T = cache.logits.shape[0]
    U = params.units[-1]
    d_logits = np.zeros((T, params.n_actions)) if d_logits is None else np.asarray(d_logits, float)
    d_values = np.zeros(T) if d_values is None else np.asarray(d_values, float)
    if d_logits.shape != (T, params.n_actions) or d_values.shape != (T,):
        raise DimensionError("upstream gradients do not cover the forward time span")
    grads = params.zeros_like()
    H_last = cache.H[-1]
    grads.policy_w[...] = d_logits.T @ H_last
    grads.policy_b[...] = d_logits.sum(axis=0)
    grads.value_w[...] = d_values @ H_last
    grads.value_b[0] = d_values.sum()
    dH = d_logits @ params.policy_w + np.outer(d_values, params.value_w)
    if d_hidden is not None:
        d_hidden = np.asarray(d_hidden, float)
        if d_hidden.shape != (T, U):
            raise DimensionError("hidden-state gradient does not cover the forward time span")
        dH = dH + d_hidden
    for k in range(len(params.layers) - 1, -1, -1):
        layer, g = params.layers[k], grads.layers[k]
        dH, _, _ = kernels.lstm_backward_seq(
            layer.Wx, layer.Wh, cache.inputs[k], cache.acts[k], cache.C[k], cache.H[k],
            cache.c0[k], cache.h0[k], np.ascontiguousarray(dH), g.Wx, g.Wh, g.b)
    if return_input_grad:
        return grads, dH
    return grads
