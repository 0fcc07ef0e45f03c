"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery for a convolutional encoder-decoder: convolution,
transposed convolution, broadcast arithmetic, spatial statistics, and a
smooth activation.  Every backward rule is written by hand against the
forward definition and verified by central finite differences in the
test suite.  Double precision throughout so those checks are decisive.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the tape: a value, its parents, and a backward rule."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def backward(self):
        """Accumulate gradients of this (scalar) node into every parent."""
        if self.value.size != 1:
            raise ValueError("backward() expects a scalar loss node")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node._backward(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad += g


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def add_scalar(a: Var, c: float) -> Var:
    return Var(a.value + c, (a,), lambda g: (g,))


def sqrt(a: Var) -> Var:
    root = np.sqrt(a.value)
    return Var(root, (a,), lambda g: (g * 0.5 / root,))


def silu(a: Var) -> Var:
    """x * sigmoid(x); smooth, so finite-difference checks stay clean."""
    s = 1.0 / (1.0 + np.exp(-a.value))
    return Var(a.value * s, (a,), lambda g: (g * s * (1.0 + a.value * (1.0 - s)),))


def spatial_mean(a: Var) -> Var:
    """Mean over the two trailing spatial axes, keeping dims."""
    n = a.value.shape[2] * a.value.shape[3]
    return Var(
        a.value.mean(axis=(2, 3), keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.value.shape).copy(),),
    )


def mean_all(a: Var) -> Var:
    n = a.value.size
    return Var(
        np.asarray(a.value.mean()),
        (a,),
        lambda g: (np.full(a.value.shape, float(g) / n),),
    )


def concat_channels(a: Var, b: Var) -> Var:
    ca = a.value.shape[1]
    return Var(
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def broadcast_batch(a: Var, n: int) -> Var:
    """Tile a (1, C, H, W) tensor across the batch dimension."""
    return Var(
        np.broadcast_to(a.value, (n,) + a.value.shape[1:]).copy(),
        (a,),
        lambda g: (g.sum(axis=0, keepdims=True),),
    )


# ---------------------------------------------------------------------------
# Convolution kernels (im2col based), shared by the tape ops and by the
# plain forward-only entry points in the pipeline module.
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, i, j
            ]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv_forward(x, w, b, stride: int, pad: int) -> np.ndarray:
    """Direct cross-correlation; weight layout (C_out, C_in, kH, kW)."""
    co, ci, kh, kw = w.shape
    n = x.shape[0]
    ho = (x.shape[2] + 2 * pad - kh) // stride + 1
    wo = (x.shape[3] + 2 * pad - kw) // stride + 1
    cols = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(co, -1), cols).reshape(n, co, ho, wo)
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv_input_grad(dy, w, stride: int, pad: int, in_hw: tuple) -> np.ndarray:
    """Gradient of conv_forward wrt its input; also the transposed-conv map."""
    co, ci, kh, kw = w.shape
    n = dy.shape[0]
    cols = np.matmul(w.reshape(co, -1).T, dy.reshape(n, co, -1))
    return _col2im(cols, (n, ci) + tuple(in_hw), kh, kw, stride, pad)


def conv_weight_grad(x, dy, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, co = dy.shape[0], dy.shape[1]
    cols = _im2col(x, kh, kw, stride, pad)
    dw = np.matmul(dy.reshape(n, co, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, -1, kh, kw)


def conv2d_op(x: Var, w: Var, b: Var, stride: int, pad: int) -> Var:
    in_hw = x.value.shape[2:]
    kh, kw = w.value.shape[2:]

    def backward(g):
        return (
            conv_input_grad(g, w.value, stride, pad, in_hw),
            conv_weight_grad(x.value, g, kh, kw, stride, pad),
            g.sum(axis=(0, 2, 3)),
        )

    return Var(conv_forward(x.value, w.value, b.value, stride, pad), (x, w, b), backward)


def conv_transpose2d_op(x: Var, w: Var, b: Var, stride: int, pad: int, output_pad: int) -> Var:
    """Transposed convolution; weight layout (C_out, C_in, kH, kW).

    Forward is the adjoint of the matching strided convolution, realized
    as that convolution's input gradient.
    """
    co, ci, kh, kw = w.value.shape
    n, _, h, win = x.value.shape
    out_h = (h - 1) * stride - 2 * pad + kh + output_pad
    out_w = (win - 1) * stride - 2 * pad + kw + output_pad
    w_t = w.value.transpose(1, 0, 2, 3)  # conv mapping C_out -> C_in spaces
    out = conv_input_grad(x.value, w_t, stride, pad, (out_h, out_w))
    out += b.value[None, :, None, None]

    def backward(g):
        dx = conv_forward(g, w_t, None, stride, pad)
        # pad/crop to the exact input size (output_padding asymmetry)
        dx = dx[:, :, : x.value.shape[2], : x.value.shape[3]]
        dw_t = conv_weight_grad(g, x.value, kh, kw, stride, pad)
        return dx, dw_t.transpose(1, 0, 2, 3), g.sum(axis=(0, 2, 3))

    return Var(out, (x, w, b), backward)
