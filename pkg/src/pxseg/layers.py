"""Forward and backward passes for every layer type the networks use.

All functions operate on ``(channels, height, width)`` arrays.  Convolution
state (weights, biases, accumulated diffs) lives in :class:`LayerState`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, pick
from .errors import SizeError
from . import tensor
from .tensor import ConvGeometry, SharedBuffer


@dataclass
class LayerState:
    """Learnable parameters of a convolution: ``weight`` is ``f_out x (f_in*k*k)``."""

    weight: np.ndarray
    bias: np.ndarray
    weight_diff: np.ndarray = field(default=None)
    bias_diff: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise SizeError(f"weight {self.weight.shape} and bias {self.bias.shape} disagree")
        self.weight = np.ascontiguousarray(self.weight)
        if self.weight_diff is None:
            self.weight_diff = np.zeros_like(self.weight)
        if self.bias_diff is None:
            self.bias_diff = np.zeros_like(self.bias)

    @classmethod
    def zeros(cls, f_in, f_out, k, dtype=np.float32):
        return cls(np.zeros((f_out, f_in * k * k), dtype=dtype), np.zeros(f_out, dtype=dtype))

    @property
    def f_out(self):
        return self.weight.shape[0]

    def f_in(self, k):
        return self.weight.shape[1] // (k * k)

    def zero_diffs(self):
        self.weight_diff[...] = 0
        self.bias_diff[...] = 0

    def astype(self, dtype):
        return LayerState(self.weight.astype(dtype), self.bias.astype(dtype),
                          self.weight_diff.astype(dtype), self.bias_diff.astype(dtype))


# --- strided-kernel convolution ------------------------------------------

def _columns(x, geom, buffer, layer):
    out = None
    if buffer is not None:
        out = buffer.get(x.shape[0] * geom.k * geom.k, geom.out_h * geom.out_w, x.dtype)
    return tensor.im2col_sk(x, geom, out=out, layer=layer)


def conv_sk_forward(x, state: LayerState, geom: ConvGeometry,
                    buffer: SharedBuffer | None = None, layer=None):
    """``W @ im2col(x) + b`` reshaped to ``(f_out, out_h, out_w)``."""
    geom.check_input(x.shape, layer)
    if state.weight.shape[1] != x.shape[0] * geom.k * geom.k:
        raise SizeError(
            f"input has {x.shape[0]} channels, weights expect {state.weight.shape[1] // (geom.k ** 2)}",
            layer)
    cols = _columns(x, geom, buffer, layer)
    out = np.empty((state.f_out, geom.out_h * geom.out_w), dtype=x.dtype)
    out[...] = state.bias[:, None]
    tensor.gemm(state.weight.astype(x.dtype, copy=False), cols.data, out, 1.0, 1.0)
    return out.reshape(state.f_out, geom.out_h, geom.out_w)


def conv_sk_backward(x, grad_out, state: LayerState, geom: ConvGeometry,
                     buffer: SharedBuffer | None = None, layer=None, need_input_grad=True):
    """Accumulate weight/bias diffs and return the gradient w.r.t. ``x``."""
    expect = (state.f_out, geom.out_h, geom.out_w)
    if grad_out.shape != expect:
        raise SizeError(f"grad_out is {grad_out.shape}, forward output was {expect}", layer)
    g = np.ascontiguousarray(grad_out.reshape(state.f_out, -1))
    cols = _columns(x, geom, buffer, layer)
    tensor.gemm(g, np.ascontiguousarray(cols.data.T), state.weight_diff, 1.0, 1.0)
    state.bias_diff += g.sum(axis=1, dtype=np.float64).astype(state.bias_diff.dtype)
    if not need_input_grad:
        return None
    # the column buffer is free again once the weight gradient is formed
    gcols = cols if buffer is not None else tensor.ColumnBuffer(np.empty_like(cols.data))
    tensor.gemm(np.ascontiguousarray(state.weight.T.astype(g.dtype, copy=False)), g, gcols.data)
    return tensor.col2im_sk(gcols, geom, x.shape[0], layer=layer).data


# --- max pooling ----------------------------------------------------------

@njit
def _maxpool_numba(x, k, s, d, out_h, out_w, out, arg):
    C, H, W = x.shape
    for c in range(C):
        for oy in range(out_h):
            for ox in range(out_w):
                best = x[c, oy * s, ox * s]
                bi = (oy * s) * W + ox * s
                for ky in range(k):
                    iy = oy * s + ky * d
                    for kx in range(k):
                        ix = ox * s + kx * d
                        v = x[c, iy, ix]
                        if v > best:
                            best = v
                            bi = iy * W + ix
                out[c, oy, ox] = best
                arg[c, oy, ox] = bi


def _maxpool_numpy(x, k, s, d, out_h, out_w, out, arg):
    W = x.shape[2]
    ys = np.arange(out_h) * s
    xs = np.arange(out_w) * s
    out[...] = x[:, ys[0]:ys[-1] + 1:s, xs[0]:xs[-1] + 1:s]
    arg[...] = (ys[:, None] * W + xs[None, :])[None]
    for ky in range(k):
        for kx in range(k):
            y0, x0 = ky * d, kx * d
            v = x[:, y0:y0 + s * (out_h - 1) + 1:s, x0:x0 + s * (out_w - 1) + 1:s]
            better = v > out
            out[better] = v[better]
            idx = np.broadcast_to(((ys + y0)[:, None] * W + (xs + x0)[None, :])[None], out.shape)
            arg[better] = idx[better]


@njit
def _unpool_numba(grad_out, arg, grad_in):
    C, oh, ow = grad_out.shape
    W = grad_in.shape[2]
    for c in range(C):
        for oy in range(oh):
            for ox in range(ow):
                i = arg[c, oy, ox]
                grad_in[c, i // W, i % W] += grad_out[c, oy, ox]


def _unpool_numpy(grad_out, arg, grad_in):
    C, H, W = grad_in.shape
    flat = grad_in.reshape(C, H * W)
    for c in range(C):
        np.add.at(flat[c], arg[c].ravel(), grad_out[c].ravel())


_maxpool = pick(_maxpool_numba, _maxpool_numpy)
_unpool = pick(_unpool_numba, _unpool_numpy)


def pool_geometry(in_h, in_w, k, s, d, layer=None):
    if s not in (1, k):
        raise SizeError(f"max pooling needs s=1 (strided kernel) or s=k (downsampling), got k={k} s={s}",
                        layer)
    if s == k and k > 1 and (in_h % k or in_w % k):
        raise SizeError(f"downsampling pool: w mod k != 0 for input {in_h}x{in_w}, k={k}", layer)
    return ConvGeometry.make(k, in_h, in_w, d=d, s=s, layer=layer)


def maxpool_sk_forward(x, k, s=1, d=1, layer=None):
    """Max over the ``k x k`` taps spaced ``d`` apart, windows ``s`` apart.

    Returns ``(out, argmax)``; argmax holds flat ``iy*W + ix`` indices into
    each input channel.  Ties keep the first tap in raster order, i.e. the
    smallest linear index.
    """
    geom = pool_geometry(x.shape[1], x.shape[2], k, s, d, layer)
    out = np.empty((x.shape[0], geom.out_h, geom.out_w), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.int64)
    _maxpool(np.ascontiguousarray(x), k, s, d, geom.out_h, geom.out_w, out, arg)
    return out, arg


def maxpool_sk_backward(grad_out, argmax, in_shape):
    """Route each output gradient to its cached argmax cell, accumulating collisions."""
    if grad_out.shape != argmax.shape:
        raise SizeError(f"grad_out {grad_out.shape} does not match argmax cache {argmax.shape}")
    grad_in = np.zeros(in_shape, dtype=grad_out.dtype)
    _unpool(np.ascontiguousarray(grad_out), argmax, grad_in)
    return grad_in


# --- element-wise and structural layers ------------------------------------

def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def upconv_forward(x, factor=2):
    """Nearest-neighbour upsampling: every pixel fills a ``factor x factor`` block."""
    if factor != 2:
        raise SizeError(f"only factor-2 upconvolution is supported, got {factor}")
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upconv_backward(grad_out, factor=2):
    c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise SizeError(f"upconv grad has odd size {h}x{w}")
    return grad_out.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def crop_offsets(a_shape, b_shape, layer=None):
    dy = b_shape[1] - a_shape[1]
    dx = b_shape[2] - a_shape[2]
    if dy < 0 or dx < 0:
        raise SizeError(f"mergecrop input B {b_shape[1:]} is smaller than A {a_shape[1:]}", layer)
    return dy // 2, dx // 2


def mergecrop_forward(a, b, layer=None):
    """A's maps followed by B's maps centre-cropped to A's spatial size."""
    oy, ox = crop_offsets(a.shape, b.shape, layer)
    h, w = a.shape[1:]
    return np.concatenate([a, b[:, oy:oy + h, ox:ox + w].astype(a.dtype, copy=False)], axis=0)


def mergecrop_backward(grad_out, f_a):
    """Gradient for input A only; B receives nothing from this layer."""
    return grad_out[:f_a].copy()


# --- softmax and loss -------------------------------------------------------

def softmax(scores):
    z = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(prob, grad_prob):
    """Chain a gradient w.r.t. probabilities through the channel softmax."""
    dot = (prob * grad_prob).sum(axis=0, keepdims=True)
    return prob * (grad_prob - dot)


def softmax_loss(scores, labels, mask=None):
    """Mean negative log-likelihood over unmasked pixels.

    ``mask`` is True where a pixel contributes.  Returns ``(loss, grad)``
    with ``grad`` shaped like ``scores``; a fully masked patch gives
    ``(0.0, zeros)``.
    """
    n_cls = scores.shape[0]
    labels = np.asarray(labels)
    if labels.shape != scores.shape[1:]:
        raise SizeError(f"labels {labels.shape} do not match scores {scores.shape[1:]}")
    if labels.min() < 0 or labels.max() >= n_cls:
        raise SizeError(f"labels must lie in [0, {n_cls}), got range [{labels.min()}, {labels.max()}]")
    keep = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(keep.sum())
    grad = np.zeros_like(scores)
    if count == 0:
        return 0.0, grad
    z = scores - scores.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=0))
    rows, cols = np.nonzero(keep)
    picked = z[labels[rows, cols], rows, cols] - logsum[rows, cols]
    loss = float(-picked.sum(dtype=np.float64) / count)
    prob = np.exp(z - logsum[None])
    prob[labels, np.arange(labels.shape[0])[:, None], np.arange(labels.shape[1])[None, :]] -= 1
    grad[...] = prob * keep[None] / count
    return loss, grad
