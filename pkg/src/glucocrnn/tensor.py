"""Dense array ops with a reverse-mode tape, sized for the CRNN layer set.

Every op accepts plain ``numpy`` arrays or :class:`Var` objects.  When a
:class:`Tape` is passed the op records a vector-Jacobian closure and returns
``Var`` outputs; without a tape it is a plain forward evaluation, which is
what inference uses.

Layouts (row-major, float64):

* sequences are ``(steps, channels)`` or batched ``(batch, steps, channels)``
* conv kernels are ``(k, ch_in, ch_out)``
* dense and LSTM weights are ``(out, in)``
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "sigmoid", "tanh")


def as_array(data, shape=None) -> np.ndarray:
    """Validate external input as a finite float64 array."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(shape)
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{arr.size} values do not fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains NaN or Inf")
    return arr


class Var:
    """A value whose gradient is tracked by a tape."""

    __slots__ = ("value", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name!r}, shape={self.value.shape})"


def _v(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


@dataclass
class _Record:
    inputs: tuple
    outputs: tuple
    vjp: Callable


class Tape:
    """Ordered log of executed ops, replayed in reverse by :func:`backward`."""

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self):
        return len(self.records)

    def record(self, inputs, out_values, vjp):
        outs = tuple(Var(v) for v in out_values)
        self.records.append(_Record(tuple(inputs), outs, vjp))
        return outs


def _emit(tape, inputs, out, vjp):
    if tape is None:
        return out
    return tape.record(inputs, (out,), lambda gs: vjp(gs[0]))[0]


def backward(tape: Tape, loss: Var, params: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ValueError("backward needs a scalar loss recorded on the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        out_grads = [grads.pop(id(o), None) for o in rec.outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = [np.zeros_like(o.value) if g is None else g
                     for o, g in zip(rec.outputs, out_grads)]
        for inp, g in zip(rec.inputs, rec.vjp(out_grads)):
            if g is None or not isinstance(inp, Var):
                continue
            key = id(inp)
            grads[key] = g if key not in grads else grads[key] + g
    return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


# --------------------------------------------------------------------------
# layers


def conv1d(x, kernels, bias, pad_left: int | None = None, tape: Tape | None = None):
    """Temporal convolution with left zero-padding.

    ``z[m, o] = sum_i sum_c xp[m + i, c] * kernels[i, c, o] + bias[o]`` where
    ``xp`` is ``x`` padded with ``pad_left`` zeros at the start.  The default
    ``pad_left = k - 1`` is causal and keeps the step count.
    """
    xv, kv, bv = _v(x), _v(kernels), _v(bias)
    if kv.ndim != 3:
        raise ValueError(f"kernels must be (k, ch_in, ch_out), got {kv.shape}")
    k, cin, cout = kv.shape
    if bv.shape != (cout,):
        raise ValueError(f"bias shape {bv.shape} != ({cout},)")
    if xv.ndim not in (2, 3) or xv.shape[-1] != cin:
        raise ValueError(f"input {xv.shape} does not end in ch_in={cin}")
    pad = k - 1 if pad_left is None else int(pad_left)
    batched = xv.ndim == 3
    xb = xv if batched else xv[None]
    n, steps, _ = xb.shape
    lout = steps + pad - k + 1
    if lout < 1:
        raise ValueError(f"input of {steps} steps too short for kernel {k}")
    xp = np.concatenate([np.zeros((n, pad, cin)), xb], axis=1) if pad else xb
    cols = np.concatenate([xp[:, i:i + lout, :] for i in range(k)], axis=2)
    wmat = kv.reshape(k * cin, cout)
    out = cols @ wmat + bv
    if not batched:
        out = out[0]

    def vjp(g):
        gb = g if batched else g[None]
        g2 = gb.reshape(-1, cout)
        gw = (cols.reshape(-1, k * cin).T @ g2).reshape(k, cin, cout)
        gbias = g2.sum(axis=0)
        gcols = gb @ wmat.T
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[:, i:i + lout, :] += gcols[:, :, i * cin:(i + 1) * cin]
        gx = gxp[:, pad:, :]
        return (gx if batched else gx[0]), gw, gbias

    return _emit(tape, (x, kernels, bias), out, vjp)


def maxpool1d(x, size: int = 2, stride: int = 2, tape: Tape | None = None):
    """Max-pooling over steps.  Returns ``(pooled, argmax)``.

    ``argmax`` holds, per output cell, the input step index that won (first
    maximum on ties).
    """
    xv = _v(x)
    batched = xv.ndim == 3
    xb = xv if batched else xv[None]
    steps = xb.shape[1]
    if size > steps:
        raise ValueError(f"pool size {size} exceeds {steps} steps")
    if (steps - size) % stride:
        raise ValueError(f"(steps - size) = {steps - size} not divisible by stride {stride}")
    lout = (steps - size) // stride + 1
    idx = np.arange(lout)[:, None] * stride + np.arange(size)[None, :]
    win = xb[:, idx, :]  # (n, lout, size, d)
    which = win.argmax(axis=2)
    out = np.take_along_axis(win, which[:, :, None, :], axis=2)[:, :, 0, :]
    argmax = idx[np.arange(lout)[None, :, None], which]
    if not batched:
        out, argmax = out[0], argmax[0]

    def vjp(g):
        gb = g if batched else g[None]
        gx = np.zeros_like(xb)
        for f in range(size):
            gx[:, idx[:, f], :] += np.where(which == f, gb, 0.0)
        return ((gx if batched else gx[0]),)

    return _emit(tape, (x,), out, vjp), argmax


def relu(x, tape: Tape | None = None):
    xv = _v(x)
    out = np.maximum(xv, 0.0)
    return _emit(tape, (x,), out, lambda g: (g * (xv > 0),))


def take(x, key, tape: Tape | None = None):
    """``x[key]`` as a differentiable op (basic slicing only)."""
    xv = _v(x)
    out = xv[key]

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[key] = g
        return (gx,)

    return _emit(tape, (x,), np.array(out), vjp)


def reshape(x, shape, tape: Tape | None = None):
    xv = _v(x)
    out = xv.reshape(shape)
    return _emit(tape, (x,), out, lambda g: (g.reshape(xv.shape),))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _activate(a, act):
    if act == "linear":
        return a
    if act == "relu":
        return np.maximum(a, 0.0)
    if act == "sigmoid":
        return _sigmoid(a)
    if act == "tanh":
        return np.tanh(a)
    raise ValueError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")


def dense(x, W, b, act: str = "linear", tape: Tape | None = None):
    """``act(W @ x + b)`` for a vector or a batch of row vectors."""
    xv, wv, bv = _v(x), _v(W), _v(b)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ValueError(f"weights {wv.shape} do not accept input {xv.shape}")
    if bv.shape != (wv.shape[0],):
        raise ValueError(f"bias shape {bv.shape} != ({wv.shape[0]},)")
    a = xv @ wv.T + bv
    z = _activate(a, act)

    def vjp(g):
        if act == "linear":
            ga = g
        elif act == "relu":
            ga = g * (a > 0)
        elif act == "sigmoid":
            ga = g * z * (1.0 - z)
        else:
            ga = g * (1.0 - z * z)
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = ga.reshape(-1, wv.shape[0])
        return ga @ wv, g2.T @ x2, g2.sum(axis=0)

    return _emit(tape, (x, W, b), z, vjp)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool,
            tape: Tape | None = None):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    xv = _v(x)
    mask = (rng.random(xv.shape) >= rate) / (1.0 - rate)
    return _emit(tape, (x,), xv * mask, lambda g: (g * mask,))


def mae_loss(pred, target, tape: Tape | None = None):
    """Mean absolute error; the subgradient at a zero residual is 0."""
    pv, tv = _v(pred), np.asarray(target, dtype=np.float64)
    if pv.size == 0:
        raise ValueError("mae_loss of empty input")
    if pv.shape != tv.shape:
        raise ValueError(f"pred {pv.shape} and target {tv.shape} differ")
    r = pv - tv
    out = np.array(np.abs(r).mean())
    return _emit(tape, (pred,), out, lambda g: (g * np.sign(r) / r.size,))


# --------------------------------------------------------------------------
# LSTM


@dataclass
class LstmParams:
    """Gate weights of one LSTM layer (forget, input, output, candidate)."""

    W_f: object
    W_i: object
    W_o: object
    W_g: object
    U_f: object
    U_i: object
    U_o: object
    U_g: object
    b_f: object
    b_i: object
    b_o: object
    b_g: object

    def as_list(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]

    @property
    def cells(self) -> int:
        return _v(self.U_f).shape[0]

    @property
    def input_dim(self) -> int:
        return _v(self.W_f).shape[1]

    @staticmethod
    def count(input_dim: int, cells: int) -> int:
        return 4 * ((input_dim + cells) * cells + cells)

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lstm_step(x_t, h_prev, c_prev, params: LstmParams, tape: Tape | None = None):
    """One LSTM update.  Returns ``(h_t, c_t)``.

    Gates ``f, i, o = sigmoid(W x + U h + b)``, candidate
    ``g = tanh(W_g x + U_g h + b_g)``; the cell state takes a second tanh of
    the candidate, ``c = f*c_prev + i*tanh(g)``, and ``h = o*tanh(c)``.
    """
    plist = params.as_list()
    xv, hv, cv = _v(x_t), _v(h_prev), _v(c_prev)
    W = np.concatenate([_v(p) for p in plist[0:4]], axis=0)
    U = np.concatenate([_v(p) for p in plist[4:8]], axis=0)
    bias = np.concatenate([_v(p) for p in plist[8:12]])
    H = params.cells
    if W.shape[1] != xv.shape[-1]:
        raise ValueError(f"x_t width {xv.shape[-1]} != input_dim {W.shape[1]}")
    if U.shape != (4 * H, H) or hv.shape[-1] != H or cv.shape != hv.shape:
        raise ValueError("inconsistent LSTM state or recurrent weight shapes")

    a = xv @ W.T + hv @ U.T + bias
    f = _sigmoid(a[..., 0:H])
    i = _sigmoid(a[..., H:2 * H])
    o = _sigmoid(a[..., 2 * H:3 * H])
    g = np.tanh(a[..., 3 * H:])
    tg = np.tanh(g)
    c = f * cv + i * tg
    tc = np.tanh(c)
    h = o * tc
    if tape is None:
        return h, c

    def vjp(gs):
        gh, gc = gs
        do = gh * tc
        dc = gc + gh * o * (1.0 - tc * tc)
        df = dc * cv
        di = dc * tg
        dg = dc * i * (1.0 - tg * tg)
        da = np.concatenate([df * f * (1.0 - f), di * i * (1.0 - i),
                             do * o * (1.0 - o), dg * (1.0 - g * g)], axis=-1)
        da2 = da.reshape(-1, 4 * H)
        dW = da2.T @ xv.reshape(-1, xv.shape[-1])
        dU = da2.T @ hv.reshape(-1, H)
        db = da2.sum(axis=0)
        dx = da @ W
        dh = da @ U
        dcp = dc * f
        return ([dx, dh, dcp] + np.split(dW, 4) + np.split(dU, 4) + np.split(db, 4))

    h_var, c_var = tape.record([x_t, h_prev, c_prev] + plist, (h, c), vjp)
    return h_var, c_var


# --------------------------------------------------------------------------
# optimizer


@dataclass
class RmspropState:
    """Moving average of squared gradients, one array per parameter."""

    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    sq: list = field(default_factory=list)


def rmsprop_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                 state: RmspropState) -> Sequence[np.ndarray]:
    """In-place update ``p -= lr * g / (sqrt(s) + eps)`` with
    ``s = rho * s + (1 - rho) * g**2``."""
    if not state.sq:
        state.sq = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(state.sq) != len(params):
        raise ValueError("params, grads and optimizer state lengths differ")
    for p, g, s in zip(params, grads, state.sq):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        s *= state.rho
        s += (1.0 - state.rho) * g * g
        p -= state.lr * g / (np.sqrt(s) + state.eps)
    return params
