"""Brute-force references used by the test suite and ``pxseg selftest``.

Nothing here shares code with the fast paths it checks.
"""
from __future__ import annotations

import heapq

import numpy as np


def numeric_grad(f, x, eps):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place).

    The divisor is the step actually stored in ``x``, which differs from
    ``2*eps`` once ``x +- eps`` rounds (float32).
    """
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(flat[i])
        fp = float(f())
        flat[i] = old - eps
        lo = float(flat[i])
        fm = float(f())
        flat[i] = old
        gf[i] = (fp - fm) / (hi - lo)
    return g


def rel_error(a, b):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def _grid_edges(H, W):
    """``(edge id, p, q)`` for every 4-neighbour edge: 2i right, 2i+1 down."""
    out = []
    for y in range(H):
        for x in range(W):
            i = y * W + x
            if x + 1 < W:
                out.append((2 * i, i, i + 1))
            if y + 1 < H:
                out.append((2 * i + 1, i, i + W))
    return out


def maximin_edges(values, H, W):
    """For every pixel pair, the edge id of the bottleneck on the best path.

    ``values`` maps edge id to affinity.  Edges are ranked by descending
    value with ties broken by increasing id; the best path minimises the
    worst rank it uses, found by a minimax Dijkstra from every source.
    """
    edges = _grid_edges(H, W)
    ranked = sorted(edges, key=lambda e: (-values[e[0]], e[0]))
    rank = {e[0]: r for r, e in enumerate(ranked)}
    adj = [[] for _ in range(H * W)]
    for eid, p, q in edges:
        adj[p].append((q, eid))
        adj[q].append((p, eid))
    result = {}
    for src in range(H * W):
        best = [None] * (H * W)
        best[src] = -1
        heap = [(-1, src)]
        done = [False] * (H * W)
        while heap:
            r, p = heapq.heappop(heap)
            if done[p]:
                continue
            done[p] = True
            for q, eid in adj[p]:
                cand = max(r, rank[eid])
                if best[q] is None or cand < best[q]:
                    best[q] = cand
                    heapq.heappush(heap, (cand, q))
        for dst in range(src + 1, H * W):
            result[(src, dst)] = ranked[best[dst]][0]
    return result


def malis_bruteforce(pred_x, pred_y, true_x, true_y, comp):
    """Per-pair Malis accumulation: ``(pos counts, neg counts, grad, loss)`` by edge id."""
    H, W = comp.shape
    lab = comp.ravel()
    def edge_map(ax, ay):
        vals = {}
        for eid, p, q in _grid_edges(H, W):
            y, x = divmod(p, W)
            vals[eid] = float(ax[y, x] if eid % 2 == 0 else ay[y, x])
        return vals

    pv, tv = edge_map(pred_x, pred_y), edge_map(true_x, true_y)
    a_pos = {e: min(pv[e], tv[e]) for e in pv}
    a_neg = {e: max(pv[e], tv[e]) for e in pv}
    mm_pos = maximin_edges(a_pos, H, W)
    mm_neg = maximin_edges(a_neg, H, W)
    pos = dict.fromkeys(pv, 0)
    neg = dict.fromkeys(pv, 0)
    for (p, q), e in mm_pos.items():
        if lab[p] == lab[q] and lab[p] > 0:
            pos[e] += 1
    for (p, q), e in mm_neg.items():
        if lab[p] != lab[q]:
            neg[e] += 1
    tp, tn = sum(pos.values()), sum(neg.values())
    grad = dict.fromkeys(pv, 0.0)
    loss = 0.0
    for e in pv:
        if tp:
            grad[e] += -2.0 * pos[e] * (1.0 - a_pos[e]) / tp
            loss += pos[e] * (1.0 - a_pos[e]) ** 2 / tp
        if tn:
            grad[e] += 2.0 * neg[e] * a_neg[e] / tn
            loss += neg[e] * a_neg[e] ** 2 / tn
    return pos, neg, grad, loss
