"""Affinity graphs, connected components and the Malis maximin loss.

Pixel ``i = y*W + x`` owns two edges: id ``2i`` joins it to its right neighbour
(stored in ``a_x[y, x]``) and id ``2i + 1`` to the pixel below (``a_y[y, x]``).
The last column of ``a_x`` and last row of ``a_y`` hold no edge and are set to 1.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ._accel import njit, pick
from .errors import SizeError


@dataclass
class AffinityGraph:
    a_x: np.ndarray
    a_y: np.ndarray
    m_x: np.ndarray
    m_y: np.ndarray

    @property
    def shape(self):
        return self.a_x.shape


@dataclass
class ComponentMap:
    """Integer label image: 0 is background, ``1..count`` are components."""

    labels: np.ndarray
    count: int


@dataclass
class MalisResult:
    d_x: np.ndarray
    d_y: np.ndarray
    loss: float
    pos_pairs_x: np.ndarray
    pos_pairs_y: np.ndarray
    neg_pairs_x: np.ndarray
    neg_pairs_y: np.ndarray
    total_pos: int
    total_neg: int


# --- affinity layer -------------------------------------------------------------

def affinity_forward(fg) -> AffinityGraph:
    """Edge value = min of its two endpoint pixels; ``m`` records which (ties -> 0)."""
    img = np.asarray(fg, dtype=np.float64)
    if img.ndim != 2:
        raise SizeError(f"affinity input must be 2-D, got {img.shape}")
    H, W = img.shape
    a_x = np.ones((H, W))
    a_y = np.ones((H, W))
    m_x = np.zeros((H, W), dtype=np.int8)
    m_y = np.zeros((H, W), dtype=np.int8)
    if W > 1:
        l, r = img[:, :-1], img[:, 1:]
        a_x[:, :-1] = np.minimum(l, r)
        m_x[:, :-1] = r < l
    if H > 1:
        t, b = img[:-1], img[1:]
        a_y[:-1] = np.minimum(t, b)
        m_y[:-1] = b < t
    return AffinityGraph(a_x, a_y, m_x, m_y)


def affinity_backward(d_x, d_y, graph: AffinityGraph):
    """Route each edge gradient to its argmin pixel: ``(dI+, dI-)`` with ``dI- = -dI+``."""
    H, W = graph.shape
    dp = np.zeros((H, W))
    ys, xs = np.mgrid[0:H, 0:W]
    if W > 1:
        sl = (slice(None), slice(0, W - 1))
        np.add.at(dp, (ys[sl], xs[sl] + graph.m_x[sl]), np.asarray(d_x)[sl])
    if H > 1:
        sl = (slice(0, H - 1), slice(None))
        np.add.at(dp, (ys[sl] + graph.m_y[sl], xs[sl]), np.asarray(d_y)[sl])
    return dp, -dp


# --- connected components --------------------------------------------------------

@njit
def _components_numba(fg, out):
    H, W = fg.shape
    stack = np.empty(H * W, dtype=np.int64)
    n = 0
    for y0 in range(H):
        for x0 in range(W):
            if not fg[y0, x0] or out[y0, x0]:
                continue
            n += 1
            out[y0, x0] = n
            stack[0] = y0 * W + x0
            top = 1
            while top:
                top -= 1
                i = stack[top]
                y = i // W
                x = i % W
                for nb in range(4):
                    yy = y + (nb == 1) - (nb == 0)
                    xx = x + (nb == 3) - (nb == 2)
                    if 0 <= yy < H and 0 <= xx < W and fg[yy, xx] and not out[yy, xx]:
                        out[yy, xx] = n
                        stack[top] = yy * W + xx
                        top += 1
    return n


def _components_python(fg, out):
    H, W = fg.shape
    n = 0
    for y0, x0 in zip(*np.nonzero(fg)):
        if out[y0, x0]:
            continue
        n += 1
        out[y0, x0] = n
        queue = deque([(y0, x0)])
        while queue:
            y, x = queue.popleft()
            for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= yy < H and 0 <= xx < W and fg[yy, xx] and not out[yy, xx]:
                    out[yy, xx] = n
                    queue.append((yy, xx))
    return n


_components = pick(_components_numba, _components_python)


def connected_components(labels) -> ComponentMap:
    """4-connected flood fill of the nonzero pixels, numbered in raster order."""
    fg = np.ascontiguousarray(np.asarray(labels) != 0)
    if fg.ndim != 2:
        raise SizeError(f"component input must be 2-D, got {fg.shape}")
    out = np.zeros(fg.shape, dtype=np.int32)
    n = _components(fg, out)
    return ComponentMap(out, int(n))


# --- maximin pair counting --------------------------------------------------------

def edge_list(shape):
    """Valid edge ids in increasing order with their endpoint pixel indices."""
    H, W = shape
    ex = np.zeros((H, W), dtype=bool)
    ey = np.zeros((H, W), dtype=bool)
    ex[:, :-1] = True
    ey[:-1] = True
    valid = np.stack([ex.ravel(), ey.ravel()], axis=1).ravel()
    ids = np.nonzero(valid)[0]
    u = ids // 2
    v = np.where(ids % 2 == 0, u + 1, u + W)
    return ids, u, v


def edge_values(a_x, a_y, ids):
    flat = np.stack([np.asarray(a_x).ravel(), np.asarray(a_y).ravel()], axis=1).ravel()
    return flat[ids]


def sort_edges(values):
    """Descending by value; equal values keep increasing edge id."""
    return np.argsort(-np.asarray(values), kind="stable")


@njit
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit
def _pair_counts_numba(order, u, v, comp, n_comp, positive):
    n = comp.size
    parent = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    cnt = np.zeros((n, n_comp + 1), dtype=np.int64)
    for i in range(n):
        cnt[i, comp[i]] = 1
    out = np.zeros(order.size, dtype=np.int64)
    for j in range(order.size):
        e = order[j]
        r1 = _find(parent, u[e])
        r2 = _find(parent, v[e])
        if r1 == r2:
            continue
        same = 0
        for c in range(1, n_comp + 1):
            same += cnt[r1, c] * cnt[r2, c]
        if positive:
            out[e] = same
        else:
            out[e] = size[r1] * size[r2] - same - cnt[r1, 0] * cnt[r2, 0]
        if size[r1] < size[r2]:
            r1, r2 = r2, r1
        parent[r2] = r1
        size[r1] += size[r2]
        for c in range(n_comp + 1):
            cnt[r1, c] += cnt[r2, c]
    return out


def _pair_counts_python(order, u, v, comp, n_comp, positive):
    n = comp.size
    parent = list(range(n))
    members = [{int(c): 1} for c in comp]
    size = [1] * n

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    out = np.zeros(order.size, dtype=np.int64)
    for e in order:
        r1, r2 = find(int(u[e])), find(int(v[e]))
        if r1 == r2:
            continue
        m1, m2 = members[r1], members[r2]
        if len(m1) > len(m2):
            small, big = m2, m1
        else:
            small, big = m1, m2
        same = sum(k * big.get(c, 0) for c, k in small.items() if c != 0)
        if positive:
            out[e] = same
        else:
            out[e] = size[r1] * size[r2] - same - m1.get(0, 0) * m2.get(0, 0)
        if size[r1] < size[r2]:
            r1, r2 = r2, r1
        parent[r2] = r1
        size[r1] += size[r2]
        for c, k in members[r2].items():
            members[r1][c] = members[r1].get(c, 0) + k
        members[r2] = {}
    return out


_pair_counts = pick(_pair_counts_numba, _pair_counts_python)


def pair_counts(values, u, v, comp: ComponentMap, positive):
    """Pairs whose maximin edge is each edge (positional, same order as ``values``)."""
    order = sort_edges(values).astype(np.int64)
    c = np.ascontiguousarray(comp.labels.ravel().astype(np.int64))
    return _pair_counts(order, np.ascontiguousarray(u, dtype=np.int64),
                        np.ascontiguousarray(v, dtype=np.int64), c, int(comp.count), bool(positive))


def _scatter(shape, ids, values):
    flat = np.zeros(2 * shape[0] * shape[1], dtype=np.asarray(values).dtype)
    flat[ids] = values
    both = flat.reshape(shape[0] * shape[1], 2)
    return both[:, 0].reshape(shape).copy(), both[:, 1].reshape(shape).copy()


def malis_gradient(pred: AffinityGraph, truth: AffinityGraph, comp: ComponentMap) -> MalisResult:
    """Constrained two-pass Malis on ``A+ = min(pred, truth)`` and ``A- = max(pred, truth)``.

    Loss is ``sum_e P_e (1 - a+_e)^2 / P_total + sum_e N_e (a-_e)^2 / N_total``
    where ``P_e`` (``N_e``) counts the should-connect (should-separate) pixel
    pairs whose maximin edge is ``e``.  Background-to-background pairs are
    ignored.  The returned gradient is with respect to the predicted edges.
    """
    shape = pred.shape
    if truth.shape != shape or comp.labels.shape != shape:
        raise SizeError(f"malis inputs disagree: {shape}, {truth.shape}, {comp.labels.shape}")
    ids, u, v = edge_list(shape)
    a_pred = edge_values(pred.a_x, pred.a_y, ids)
    a_true = edge_values(truth.a_x, truth.a_y, ids)
    a_pos = np.minimum(a_pred, a_true)
    a_neg = np.maximum(a_pred, a_true)
    pos = pair_counts(a_pos, u, v, comp, True)
    neg = pair_counts(a_neg, u, v, comp, False)
    tp, tn = int(pos.sum()), int(neg.sum())
    grad = np.zeros(ids.size)
    loss = 0.0
    if tp:
        grad += -2.0 * pos * (1.0 - a_pos) / tp
        loss += float((pos * (1.0 - a_pos) ** 2).sum() / tp)
    if tn:
        grad += 2.0 * neg * a_neg / tn
        loss += float((neg * a_neg ** 2).sum() / tn)
    d_x, d_y = _scatter(shape, ids, grad)
    px, py = _scatter(shape, ids, pos)
    nx, ny = _scatter(shape, ids, neg)
    return MalisResult(d_x, d_y, loss, px, py, nx, ny, tp, tn)


# --- loss-layer wiring ---------------------------------------------------------------

def malis_loss(prob_fg, labels):
    """Malis loss of a foreground-probability map against a binary label image.

    Returns ``(loss, dI_plus, dI_minus, result)``; ``dI_plus`` is the gradient
    for the foreground channel and ``dI_minus`` for the background one.
    """
    labels = np.asarray(labels)
    if labels.shape != np.shape(prob_fg):
        raise SizeError(f"labels {labels.shape} do not match prediction {np.shape(prob_fg)}")
    fg = (labels != 0).astype(np.float64)
    comp = connected_components(fg)
    pred = affinity_forward(prob_fg)
    res = malis_gradient(pred, affinity_forward(fg), comp)
    dp, dm = affinity_backward(res.d_x, res.d_y, pred)
    return res.loss, dp, dm, res


def malis_total_loss(prob, labels):
    """Objective whose gradient the symmetric attribution reproduces.

    With ``prob`` the ``(2, h, w)`` softmax output, the foreground map feeds
    the loss directly and the background map through ``1 - p0``; on a
    softmax output both terms are equal.
    """
    l1 = malis_loss(prob[1], labels)[0]
    l0 = malis_loss(1.0 - prob[0], labels)[0]
    return l1 + l0


def malis_prob_grad(prob, labels):
    """``(loss, grad)`` with ``grad`` shaped like the 2-channel probability map."""
    loss, dp, dm, _ = malis_loss(prob[1], labels)
    grad = np.zeros(prob.shape)
    grad[1] = dp
    grad[0] = dm
    return 2.0 * loss, grad
