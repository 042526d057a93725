"""The numba kernels and their numpy fallbacks must agree exactly."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pxseg import _accel, layers, malis, tensor
from pxseg.tensor import ConvGeometry

SEEDS = st.integers(0, 2 ** 32 - 1)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2), st.integers(0, 5), SEEDS)
def test_im2col_col2im_agree(c, k, d, p, extra, seed):
    r = np.random.default_rng(seed)
    n = (k - 1) * d + 1 + extra
    g = ConvGeometry.make(k, n, n, d=d, p=p)
    x = r.normal(size=(c, n, n))
    a = np.full((c * k * k, g.out_h * g.out_w), np.nan)
    b = a.copy()
    tensor._im2col_numba(x, k, d, 1, p, g.out_h, g.out_w, a)
    tensor._im2col_numpy(x, k, d, 1, p, g.out_h, g.out_w, b)
    assert np.array_equal(a, b)
    cols = r.normal(size=a.shape)
    xa, xb = np.zeros_like(x), np.zeros_like(x)
    tensor._col2im_numba(cols, k, d, 1, p, g.out_h, g.out_w, xa)
    tensor._col2im_numpy(cols, k, d, 1, p, g.out_h, g.out_w, xb)
    assert np.allclose(xa, xb, rtol=0, atol=1e-12)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), SEEDS)
def test_gemm_agree(m, n, kk, seed):
    r = np.random.default_rng(seed)
    A, B, C0 = r.normal(size=(m, kk)), r.normal(size=(kk, n)), r.normal(size=(m, n))
    ca, cb = C0.copy(), C0.copy()
    tensor._gemm_numba(A, B, ca, 1.5, 0.5)
    tensor._gemm_numpy(A, B, cb, 1.5, 0.5)
    assert np.allclose(ca, cb, rtol=1e-12, atol=1e-12)


@given(st.sampled_from([(2, 2, 1), (2, 1, 1), (2, 1, 2), (3, 1, 2), (3, 3, 1)]), st.booleans(), SEEDS)
def test_pool_agree(ksd, ties, seed):
    k, s, d = ksd
    r = np.random.default_rng(seed)
    x = r.integers(0, 3, size=(2, 12, 12)).astype(float) if ties else r.normal(size=(2, 12, 12))
    pg = layers.pool_geometry(12, 12, k, s, d)
    outs = []
    for impl in (layers._maxpool_numba, layers._maxpool_numpy):
        out = np.empty((2, pg.out_h, pg.out_w))
        arg = np.empty(out.shape, dtype=np.int64)
        impl(x, k, s, d, pg.out_h, pg.out_w, out, arg)
        outs.append((out, arg))
    assert np.array_equal(outs[0][0], outs[1][0]) and np.array_equal(outs[0][1], outs[1][1])
    g = r.normal(size=outs[0][0].shape)
    ga, gb = np.zeros_like(x), np.zeros_like(x)
    layers._unpool_numba(g, outs[0][1], ga)
    layers._unpool_numpy(g, outs[0][1], gb)
    assert np.allclose(ga, gb, rtol=0, atol=1e-12)


@given(st.integers(1, 15), st.integers(1, 15), SEEDS)
def test_components_agree(h, w, seed):
    fg = np.random.default_rng(seed).random((h, w)) > 0.5
    a, b = np.zeros((h, w), np.int32), np.zeros((h, w), np.int32)
    na = malis._components_numba(fg, a)
    nb = malis._components_python(fg, b)
    assert na == nb and np.array_equal(a, b)


@given(st.integers(1, 7), st.integers(1, 7), st.booleans(), st.booleans(), SEEDS)
def test_pair_counts_agree(h, w, positive, ties, seed):
    r = np.random.default_rng(seed)
    comp = malis.connected_components(r.random((h, w)) > 0.4)
    ids, u, v = malis.edge_list((h, w))
    vals = r.integers(0, 3, ids.size) / 2.0 if ties else r.random(ids.size)
    order = malis.sort_edges(vals).astype(np.int64)
    c = comp.labels.ravel().astype(np.int64)
    a = malis._pair_counts_numba(order, u.astype(np.int64), v.astype(np.int64), c, comp.count, positive)
    b = malis._pair_counts_python(order, u.astype(np.int64), v.astype(np.int64), c, comp.count, positive)
    assert np.array_equal(a, b)


def _run(code, backend):
    env = dict(os.environ, PXSEG_BACKEND=backend)
    return subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)


def test_env_flag_selects_numpy():
    r = _run("from pxseg import _accel, tensor; print(_accel.BACKEND, tensor._im2col is tensor._im2col_numpy)",
             "numpy")
    assert r.returncode == 0 and r.stdout.split() == ["numpy", "True"]


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")
def test_default_backend_is_numba():
    r = _run("from pxseg import _accel; print(_accel.BACKEND)", "numba")
    assert r.stdout.strip() == "numba"


def test_bad_flag_rejected():
    r = _run("import pxseg.tensor", "cuda")
    assert r.returncode != 0 and "PXSEG_BACKEND" in r.stderr


def test_selftest_passes_on_numpy_backend():
    r = _run("import sys; from pxseg.selftest import run_selftest; sys.exit(0 if run_selftest(quick=True) else 1)",
             "numpy")
    assert r.returncode == 0, r.stdout + r.stderr


def test_forward_identical_across_backends():
    code = ("import numpy as np; from pxseg.netgraph import Net, builtin_net;"
            "s = builtin_net('toy_usk'); x = np.random.default_rng(0).uniform(-1, 1, (1, 54, 54));"
            "print(repr(float(Net(s, seed=1, dtype=np.float64).predict(x).sum(dtype=np.float64))))")
    a, b = _run(code, "numba"), _run(code, "numpy")
    assert a.returncode == 0 and b.returncode == 0
    assert abs(float(a.stdout) - float(b.stdout)) < 1e-9
