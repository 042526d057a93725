"""Invariant checks bundled with the package (``pxseg selftest``)."""
from __future__ import annotations

import sys

import numpy as np

from . import convert as C
from . import layers as L
from . import malis as M
from . import oracles as O
from .tensor import ConvGeometry


def _check_conv_grad(rng):
    x = rng.normal(size=(2, 6, 6))
    geom = ConvGeometry.make(3, 6, 6, d=int(rng.integers(1, 3)))
    st = L.LayerState(rng.normal(size=(3, 18)), rng.normal(size=3))
    r = rng.normal(size=(3, geom.out_h, geom.out_w))
    loss = lambda: float((L.conv_sk_forward(x, st, geom) * r).sum())
    st.zero_diffs()
    gx = L.conv_sk_backward(x, r, st, geom)
    return max(O.rel_error(gx, O.numeric_grad(loss, x, 1e-6)),
               O.rel_error(st.weight_diff, O.numeric_grad(loss, st.weight, 1e-6)))


def _check_pool_grad(rng):
    x = rng.permutation(72).reshape(2, 6, 6) / 7.0
    r = rng.normal(size=(2, 4, 4))
    out, arg = L.maxpool_sk_forward(x, 2, 1, 2)
    g = L.maxpool_sk_backward(r, arg, x.shape)
    loss = lambda: float((L.maxpool_sk_forward(x, 2, 1, 2)[0] * r).sum())
    return O.rel_error(g, O.numeric_grad(loss, x, 1e-6))


def _check_sk_sw(rng):
    sw = C.random_sw_net(rng)
    sk = C.sw_to_sk(sw)
    return max(C.sk_sw_equivalence_check(sw, sk, sw.input_w + e, seed=int(rng.integers(1 << 30)),
                                         dtype=np.float64).max_abs_dev for e in (0, 1, 5))


def _check_malis(rng):
    p = rng.random((5, 5))
    lab = rng.random((5, 5)) > 0.45
    comp = M.connected_components(lab)
    pred, truth = M.affinity_forward(p), M.affinity_forward(lab.astype(float))
    res = M.malis_gradient(pred, truth, comp)
    pos, neg, grad, _ = O.malis_bruteforce(pred.a_x, pred.a_y, truth.a_x, truth.a_y, comp.labels)
    ids, _, _ = M.edge_list((5, 5))
    got = M.edge_values(res.d_x, res.d_y, ids)
    want = np.array([grad[e] for e in ids])
    counts_ok = all(M.edge_values(res.pos_pairs_x, res.pos_pairs_y, ids) == [pos[e] for e in ids]) and \
        all(M.edge_values(res.neg_pairs_x, res.neg_pairs_y, ids) == [neg[e] for e in ids])
    return float(np.abs(got - want).max()) if counts_ok else float("inf")


CHECKS = (
    ("conv gradient (f64)", _check_conv_grad, 1e-6),
    ("strided-kernel pool gradient (f64)", _check_pool_grad, 1e-6),
    ("SW == SK equivalence (f64)", _check_sk_sw, 1e-10),
    ("Malis vs. brute-force maximin", _check_malis, 1e-12),
)


def run_selftest(seed=0, quick=False, out=None):
    out = out or sys.stdout
    rng = np.random.default_rng(seed)
    reps = 3 if quick else 10
    ok = True
    for name, fn, tol in CHECKS:
        worst = max(fn(rng) for _ in range(reps))
        passed = worst <= tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: worst {worst:.3g} (tol {tol:g}, {reps} instances)", file=out)
    print("selftest " + ("passed" if ok else "FAILED"), file=out)
    return ok
