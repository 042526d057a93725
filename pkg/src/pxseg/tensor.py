"""Blob storage and the im2col / col2im / GEMM primitives.

Every convolution in the library is ``W @ im2col(x)``.  Kernel strides
(``d``) only change how im2col walks the input: a tap at kernel offset
``(ky, kx)`` reads ``x[c, oy*s + ky*d - p, ox*s + kx*d - p]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, pick
from .errors import SizeError

__all__ = [
    "Blob",
    "ColumnBuffer",
    "ConvGeometry",
    "SharedBuffer",
    "im2col_sk",
    "col2im_sk",
    "gemm",
    "gemm_flops",
]


@dataclass
class Blob:
    """A ``(channels, height, width)`` feature map stack with a lazy diff plane."""

    data: np.ndarray
    diff: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise SizeError(f"blob data must be 3-D (c, h, w), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise SizeError(f"blob dimensions must be >= 1, got {self.data.shape}")
        if self.diff is not None and self.diff.shape != self.data.shape:
            raise SizeError(f"diff shape {self.diff.shape} != data shape {self.data.shape}")

    @classmethod
    def zeros(cls, channels, height, width, dtype=np.float32):
        return cls(np.zeros((channels, height, width), dtype=dtype))

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def ensure_diff(self):
        if self.diff is None:
            self.diff = np.zeros_like(self.data)
        return self.diff


@dataclass
class ColumnBuffer:
    """The ``K x N`` im2col matrix, ``K = f_in*k*k`` and ``N = out_h*out_w``."""

    data: np.ndarray

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]


class SharedBuffer:
    """One growable scratch allocation that every convolution layer reuses.

    Peak size is therefore ``max(K*N)`` over layers rather than the sum.
    """

    def __init__(self):
        self._store = {}

    def get(self, rows, cols, dtype):
        dtype = np.dtype(dtype)
        flat = self._store.get(dtype)
        need = rows * cols
        if flat is None or flat.size < need:
            flat = np.empty(need, dtype=dtype)
            self._store[dtype] = flat
        return ColumnBuffer(flat[:need].reshape(rows, cols))

    @property
    def nbytes(self):
        return sum(a.nbytes for a in self._store.values())


@dataclass(frozen=True)
class ConvGeometry:
    """Sizes of one strided-kernel window sweep over a feature map."""

    k: int
    d: int
    s: int
    p: int
    in_h: int
    in_w: int
    out_h: int = field(default=0)
    out_w: int = field(default=0)

    @classmethod
    def make(cls, k, in_h, in_w, d=1, s=1, p=0, layer=None):
        if k < 1 or d < 1 or s < 1 or p < 0:
            raise SizeError(f"invalid geometry k={k} d={d} s={s} p={p}", layer)
        span = (k - 1) * d + 1
        out = []
        for name, size in (("height", in_h), ("width", in_w)):
            room = size + 2 * p - span
            if room < 0:
                raise SizeError(
                    f"external kernel size {span} exceeds input {name} {size} (+2*{p} padding)",
                    layer)
            if room % s:
                raise SizeError(
                    f"input {name} {size}: ({size} + 2*{p} - {span}) not divisible by stride {s}",
                    layer)
            out.append(room // s + 1)
        return cls(k, d, s, p, in_h, in_w, out[0], out[1])

    @property
    def span(self):
        """External kernel size ``(k - 1)*d + 1``."""
        return (self.k - 1) * self.d + 1

    def check_input(self, channels_h_w, layer=None):
        _, h, w = channels_h_w
        if (h, w) != (self.in_h, self.in_w):
            raise SizeError(f"input is {h}x{w}, geometry expects {self.in_h}x{self.in_w}", layer)


# --- im2col -------------------------------------------------------------

@njit
def _im2col_numba(x, k, d, s, p, out_h, out_w, cols):
    C, H, W = x.shape
    for c in range(C):
        for ky in range(k):
            for kx in range(k):
                r = (c * k + ky) * k + kx
                for oy in range(out_h):
                    iy = oy * s + ky * d - p
                    base = oy * out_w
                    if iy < 0 or iy >= H:
                        for ox in range(out_w):
                            cols[r, base + ox] = 0
                        continue
                    for ox in range(out_w):
                        ix = ox * s + kx * d - p
                        if 0 <= ix < W:
                            cols[r, base + ox] = x[c, iy, ix]
                        else:
                            cols[r, base + ox] = 0


def _im2col_numpy(x, k, d, s, p, out_h, out_w, cols):
    C = x.shape[0]
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    view = cols.reshape(C, k, k, out_h, out_w)
    for ky in range(k):
        y0 = ky * d
        for kx in range(k):
            x0 = kx * d
            view[:, ky, kx] = x[:, y0:y0 + s * (out_h - 1) + 1:s, x0:x0 + s * (out_w - 1) + 1:s]


@njit
def _col2im_numba(cols, k, d, s, p, out_h, out_w, x):
    C, H, W = x.shape
    for c in range(C):
        for ky in range(k):
            for kx in range(k):
                r = (c * k + ky) * k + kx
                for oy in range(out_h):
                    iy = oy * s + ky * d - p
                    if iy < 0 or iy >= H:
                        continue
                    base = oy * out_w
                    for ox in range(out_w):
                        ix = ox * s + kx * d - p
                        if 0 <= ix < W:
                            x[c, iy, ix] += cols[r, base + ox]


def _col2im_numpy(cols, k, d, s, p, out_h, out_w, x):
    C, H, W = x.shape
    acc = np.zeros((C, H + 2 * p, W + 2 * p), dtype=x.dtype) if p else x
    view = cols.reshape(C, k, k, out_h, out_w)
    for ky in range(k):
        y0 = ky * d
        for kx in range(k):
            x0 = kx * d
            acc[:, y0:y0 + s * (out_h - 1) + 1:s, x0:x0 + s * (out_w - 1) + 1:s] += view[:, ky, kx]
    if p:
        x += acc[:, p:p + H, p:p + W]


_im2col = pick(_im2col_numba, _im2col_numpy)
_col2im = pick(_col2im_numba, _col2im_numpy)


def _as_array(x):
    return x.data if isinstance(x, Blob) else np.asarray(x)


def im2col_sk(input, geom: ConvGeometry, out: ColumnBuffer | None = None, layer=None):
    """Unfold ``input`` (Blob or ``(c, h, w)`` array) into a ColumnBuffer.

    Row ``c*k*k + ky*k + kx``, column ``oy*out_w + ox`` holds the input value
    under kernel tap ``(ky, kx)`` for output pixel ``(oy, ox)``; taps that
    land in the padding read zero.
    """
    x = np.ascontiguousarray(_as_array(input))
    if x.ndim != 3:
        raise SizeError(f"im2col expects a (c, h, w) input, got shape {x.shape}", layer)
    geom.check_input(x.shape, layer)
    rows = x.shape[0] * geom.k * geom.k
    ncols = geom.out_h * geom.out_w
    if out is None:
        out = ColumnBuffer(np.empty((rows, ncols), dtype=x.dtype))
    elif out.data.shape != (rows, ncols):
        raise SizeError(f"column buffer is {out.data.shape}, need {(rows, ncols)}", layer)
    _im2col(x, geom.k, geom.d, geom.s, geom.p, geom.out_h, geom.out_w, out.data)
    return out


def col2im_sk(cols, geom: ConvGeometry, channels: int, layer=None) -> Blob:
    """Adjoint of :func:`im2col_sk`: scatter-add columns back onto the input grid."""
    c = cols.data if isinstance(cols, ColumnBuffer) else np.asarray(cols)
    expect = (channels * geom.k * geom.k, geom.out_h * geom.out_w)
    if c.shape != expect:
        raise SizeError(f"column buffer is {c.shape}, geometry needs {expect}", layer)
    x = np.zeros((channels, geom.in_h, geom.in_w), dtype=c.dtype)
    _col2im(np.ascontiguousarray(c), geom.k, geom.d, geom.s, geom.p, geom.out_h, geom.out_w, x)
    return Blob(x)


# --- GEMM ---------------------------------------------------------------

@njit
def _gemm_numba(A, B, C, alpha, beta):
    M, K = A.shape
    N = B.shape[1]
    acc = np.empty(N, dtype=np.float64)
    for i in range(M):
        acc[:] = 0.0
        for kk in range(K):
            a = np.float64(A[i, kk])
            for j in range(N):
                acc[j] += a * B[kk, j]
        if beta == 0.0:
            for j in range(N):
                C[i, j] = alpha * acc[j]
        else:
            for j in range(N):
                C[i, j] = alpha * acc[j] + beta * C[i, j]


def _gemm_numpy(A, B, C, alpha, beta):
    prod = np.matmul(A.astype(np.float64, copy=False), B.astype(np.float64, copy=False))
    if beta == 0.0:
        C[...] = alpha * prod
    else:
        C[...] = alpha * prod + beta * C.astype(np.float64)


_gemm = pick(_gemm_numba, _gemm_numpy)


def gemm(A, B, C=None, alpha=1.0, beta=0.0):
    """Row-major ``C <- alpha*A@B + beta*C`` with float64 accumulation.

    The reduction over ``K`` always runs in index order, so repeated calls on
    the same operands are bit-identical.  ``C`` is updated in place and
    returned; when omitted a zero matrix of A's dtype is allocated.
    """
    A = np.ascontiguousarray(A)
    B = np.ascontiguousarray(B)
    if A.ndim != 2 or B.ndim != 2:
        raise SizeError(f"gemm operands must be matrices, got {A.shape} and {B.shape}")
    M, K = A.shape
    if B.shape[0] != K:
        raise SizeError(f"gemm inner dimensions differ: A is {A.shape}, B is {B.shape}")
    N = B.shape[1]
    if C is None:
        C = np.zeros((M, N), dtype=np.result_type(A.dtype, B.dtype))
        beta = 0.0
    elif C.shape != (M, N):
        raise SizeError(f"gemm output is {C.shape}, expected {(M, N)}")
    if not C.flags.c_contiguous:
        raise SizeError("gemm output must be C-contiguous")
    _gemm(A, B, C, float(alpha), float(beta))
    return C


def gemm_flops(M, N, K):
    """FLOP count of one ``M x K`` by ``K x N`` product, ``M*N*(2K - 1)``."""
    return M * N * (2 * K - 1)
