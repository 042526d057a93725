"""Layer-wise timing on random data, and the sliding-window throughput baseline."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .convert import DeviceProfile, cost_report
from .netgraph import Net, NetSpec


@dataclass
class BenchRow:
    name: str
    kind: str
    out_size: int
    flop: int
    buffer_elems: int
    params: int
    fwd_s: float
    bwd_s: float | None
    efficiency: float | None


@dataclass
class BenchReport:
    rows: list
    w0: int
    out_size: int
    trials: int
    buffer_bytes: int
    processing_bytes: int
    training_bytes: int
    total_flop: int
    fwd_total_s: float
    bwd_total_s: float | None

    @property
    def throughput(self):
        """Output pixels labelled per second of forward time."""
        return self.out_size ** 2 / self.fwd_total_s if self.fwd_total_s > 0 else float("inf")


def bench(spec: NetSpec, w0=None, trials=3, seed=0, profile: DeviceProfile | None = None,
          backward=False, dtype=np.float32, warmup=True) -> BenchReport:
    """Median per-layer forward (and optionally backward) times over ``trials`` runs."""
    profile = profile or DeviceProfile()
    w0 = spec.input_w if w0 is None else w0
    sized = spec.with_input_w(w0)
    cost = cost_report(sized, w0, profile)
    rng = np.random.default_rng(seed)
    net = Net(sized, seed=seed, dtype=dtype)
    x = rng.uniform(-1.0, 1.0, size=(spec.input_f, w0, w0)).astype(dtype)
    out_blob = sized.output_blob
    grad = None
    if warmup:
        blobs = net.forward(x)
        grad = rng.normal(size=blobs[out_blob].shape).astype(dtype)
        if backward:
            net.backward({out_blob: grad})
    fwd, bwd = [], []
    for _ in range(max(1, trials)):
        t = {}
        blobs = net.forward(x, timings=t)
        fwd.append(t)
        if backward:
            if grad is None:
                grad = rng.normal(size=blobs[out_blob].shape).astype(dtype)
            tb = {}
            net.backward({out_blob: grad}, timings=tb)
            net.zero_diffs()
            bwd.append(tb)
    med_f = {k: float(np.median([t.get(k, 0.0) for t in fwd])) for k in fwd[0]}
    med_b = {k: float(np.median([t.get(k, 0.0) for t in bwd])) for k in bwd[0]} if backward else {}
    cost.set_times(med_f)
    rows = [BenchRow(r.name, r.kind, r.out_size, r.flop, r.buffer_elems, r.params,
                     med_f.get(r.name, 0.0), med_b.get(r.name) if backward else None, r.efficiency)
            for r in cost.rows]
    mem = cost.memory
    return BenchReport(rows, w0, sized.output_size(), trials, mem.buffer_bytes, mem.processing_bytes,
                       mem.training_bytes, cost.total_flop, sum(med_f.values()),
                       sum(med_b.values()) if backward else None)


def sk_throughput(sk: NetSpec, area, seed=0, trials=1, dtype=np.float32):
    """Seconds to label an ``area x area`` block with one strided-kernel forward."""
    w0 = sk.input_size_for(area)
    net = Net(sk.with_input_w(w0), seed=seed, dtype=dtype)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(sk.input_f, w0, w0)).astype(dtype)
    net.forward(x)
    best = float("inf")
    for _ in range(trials):
        t0 = time.perf_counter()
        net.forward(x)
        best = min(best, time.perf_counter() - t0)
    return best


def sw_emulation(sw: NetSpec, area, seed=0, dtype=np.float32, max_pixels=None):
    """Seconds to label ``area x area`` pixels with one SW forward per pixel.

    With ``max_pixels`` only that many forwards are timed and the total is
    extrapolated linearly.
    """
    v = sw.input_w
    net = Net(sw, seed=seed, dtype=dtype)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(sw.input_f, area + v - 1, area + v - 1)).astype(dtype)
    pixels = [(y, xx) for y in range(area) for xx in range(area)]
    if max_pixels is not None:
        pixels = pixels[:max_pixels]
    net.forward(x[:, :v, :v])
    t0 = time.perf_counter()
    for y, xx in pixels:
        net.forward(x[:, y:y + v, xx:xx + v])
    elapsed = time.perf_counter() - t0
    return elapsed * (area * area) / len(pixels)
