"""Compare the numba kernels against their numpy fallbacks.

Calls both implementations of each kernel directly in one process, checks
that they agree, and prints the median time of each.

    python3 benchmarks/bench_backends.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from pxseg import layers, malis, tensor
from pxseg.tensor import ConvGeometry


def median_time(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    x = rng.normal(size=(16, 80, 80)).astype(np.float32)
    g = ConvGeometry.make(3, 80, 80, d=4)
    cols = np.empty((16 * 9, g.out_h * g.out_w), dtype=np.float32)

    def im2col(impl):
        return lambda: impl(x, g.k, g.d, g.s, g.p, g.out_h, g.out_w, cols) or cols.copy()

    ycol = rng.normal(size=cols.shape).astype(np.float32)

    def col2im(impl):
        def run():
            out = np.zeros_like(x)
            impl(ycol, g.k, g.d, g.s, g.p, g.out_h, g.out_w, out)
            return out
        return run

    A = rng.normal(size=(32, 144)).astype(np.float32)
    B = rng.normal(size=(144, 4096)).astype(np.float32)

    def gemm(impl):
        def run():
            C = np.zeros((32, 4096), dtype=np.float32)
            impl(A, B, C, 1.0, 0.0)
            return C
        return run

    pg = layers.pool_geometry(80, 80, 2, 1, 4)

    def pool(impl):
        def run():
            out = np.empty((16, pg.out_h, pg.out_w), dtype=np.float32)
            arg = np.empty(out.shape, dtype=np.int64)
            impl(x, 2, 1, 4, pg.out_h, pg.out_w, out, arg)
            return out
        return run

    fg = rng.random((256, 256)) > 0.4

    def components(impl):
        def run():
            out = np.zeros(fg.shape, dtype=np.int32)
            impl(fg, out)
            return out
        return run

    p = rng.random((64, 64))
    lab = rng.random((64, 64)) > 0.4
    comp = malis.connected_components(lab)
    ids, u, v = malis.edge_list(p.shape)
    vals = malis.edge_values(*(lambda a: (a.a_x, a.a_y))(malis.affinity_forward(p)), ids)
    order = malis.sort_edges(vals).astype(np.int64)
    c = comp.labels.ravel().astype(np.int64)

    def pairs(impl):
        return lambda: impl(order, u, v, c, comp.count, False)

    return [
        ("im2col 16x80x80 k3 d4", im2col, tensor._im2col_numba, tensor._im2col_numpy),
        ("col2im 16x80x80 k3 d4", col2im, tensor._col2im_numba, tensor._col2im_numpy),
        ("gemm 32x144x4096", gemm, tensor._gemm_numba, tensor._gemm_numpy),
        ("maxpool 16x80x80 k2 d4", pool, layers._maxpool_numba, layers._maxpool_numpy),
        ("components 256x256", components, malis._components_numba, malis._components_python),
        ("malis pairs 64x64", pairs, malis._pair_counts_numba, malis._pair_counts_python),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':26s} {'numba s':>10s} {'numpy s':>10s} {'ratio':>7s}  agree")
    for name, make, fast, slow in cases(rng):
        a, b = make(fast), make(slow)
        same = np.allclose(a(), b(), rtol=1e-5, atol=1e-5)
        tf, ts = median_time(a, args.repeat), median_time(b, args.repeat)
        print(f"{name:26s} {tf:10.5f} {ts:10.5f} {ts / tf:7.1f}  {'yes' if same else 'NO'}")


if __name__ == "__main__":
    main()
