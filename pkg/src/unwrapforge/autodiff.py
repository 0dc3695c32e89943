"""A small tape-based reverse-mode autodiff over numpy arrays.

Only the operations the denoiser needs are provided. Image tensors are
channels-last, shape (N, H, W, C).
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward closures (inference)."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


def parameter(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _wrap(data, parents, fn):
    if not _recording or not any(p.requires_grad or p.backward_fn for p in parents):
        return Tensor(data)
    return Tensor(data, parents, fn)


def _accum(t, g):
    # never in place: the same upstream array may feed several parents
    t.grad = g if t.grad is None else t.grad + g


def backward(out: Tensor, grad=None):
    """Propagate d(out)/d(leaf) into ``.grad`` of every reachable parameter."""
    if out.backward_fn is None:
        raise RuntimeError("backward called on a tensor with no recorded forward computation")
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        if node is not out and node.backward_fn is not None:
            node.grad = None
    out.grad = np.ones_like(out.data) if grad is None else np.asarray(grad, dtype=out.data.dtype) * np.ones_like(out.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            if node is not out:
                node.grad = None  # release intermediate buffers


def zero_grad(params):
    for p in params:
        p.grad = None


# --- elementwise / reductions -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        _accum(a, g)
        _accum(b, g)
    return _wrap(a.data + b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _wrap(a.data * b.data, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    return _wrap(a.data * c, (a,), lambda g: _accum(a, g * c))


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _wrap(out, (a,), lambda g: _accum(a, np.broadcast_to(g, a.data.shape).copy()))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = x.data * s

    def fn(g):
        _accum(x, g * (s * (1.0 + x.data * (1.0 - s))))
    return _wrap(out, (x,), fn)


def add_channel_bias(x: Tensor, v: Tensor) -> Tensor:
    """x (N, H, W, C) + v (N, C) broadcast over space."""
    def fn(g):
        _accum(x, g)
        _accum(v, g.sum(axis=(1, 2)))
    return _wrap(x.data + v.data[:, None, None, :], (x, v), fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    def fn(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))
    return _wrap(x.data @ w.data + b.data, (x, w, b), fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ca = a.data.shape[-1]

    def fn(g):
        _accum(a, np.ascontiguousarray(g[..., :ca]))
        _accum(b, np.ascontiguousarray(g[..., ca:]))
    return _wrap(np.concatenate([a.data, b.data], axis=-1), (a, b), fn)


def upsample2(x: Tensor) -> Tensor:
    n, h, w, c = x.data.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def fn(g):
        _accum(x, g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))
    return _wrap(out, (x,), fn)


def conv3x3(x: Tensor, w: Tensor, b: Tensor, stride=1) -> Tensor:
    """3x3 convolution, zero padding 1. x (N,H,W,Cin), w (3,3,Cin,Cout), b (Cout,)."""
    xd = x.data
    n, h, wd, cin = xd.shape
    cout = w.data.shape[-1]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.zeros((n, h + 2, wd + 2, cin), dtype=xd.dtype)
    xp[:, 1:-1, 1:-1, :] = xd
    cols = np.empty((n, ho, wo, 3, 3, cin), dtype=xd.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    cols2 = cols.reshape(-1, 9 * cin)
    w2 = w.data.reshape(9 * cin, cout)
    out = (cols2 @ w2).reshape(n, ho, wo, cout)
    out += b.data

    def fn(g):
        g2 = g.reshape(-1, cout)
        _accum(w, (cols2.T @ g2).reshape(w.data.shape))
        _accum(b, g2.sum(axis=0))
        if x.requires_grad or x.backward_fn is not None:
            gc = (g2 @ w2.T).reshape(n, ho, wo, 3, 3, cin)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gc[:, :, :, i, j, :]
            _accum(x, gxp[:, 1:-1, 1:-1, :])
    return _wrap(out, (x, w, b), fn)


def weighted_mse(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """mean_i w_i * ||target_i - pred_i||^2 / pixels_per_item, as a scalar tensor."""
    n = pred.data.shape[0]
    per = pred.data[0].size
    diff = pred.data - target
    wb = np.asarray(weights, dtype=pred.data.dtype).reshape((n,) + (1,) * (diff.ndim - 1))
    val = np.asarray((wb * diff * diff).sum() / (n * per), dtype=pred.data.dtype)

    def fn(g):
        _accum(pred, (2.0 / (n * per)) * g * wb * diff)
    return _wrap(val, (pred,), fn)
