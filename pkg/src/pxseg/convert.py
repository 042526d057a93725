"""Sliding-window to strided-kernel conversion and the analytic cost models.

The converter walks the sliding-window (SW) net once, carrying a running
kernel stride.  Convolutions inherit it, each downsampling pool multiplies
it by ``k`` and becomes a stride-1 pool, and each inner product becomes a
convolution spanning its whole input, which resets the stride to 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConversionError, SizeError
from .netgraph import PARAM_KINDS, Net, NetSpec
from .layers import LayerState

GIB = 1 << 30


# --- conversion ---------------------------------------------------------------

def check_sw(spec: NetSpec):
    """Raise ConversionError unless ``spec`` looks like a plain sliding-window net."""
    for l in spec.layers[1:]:
        if l.kind in ("upconv", "mergecrop"):
            raise ConversionError(f"not an SW net: layer {l.name!r} is a {l.kind} layer")
        if l.d != 1:
            raise ConversionError(f"not an SW net: layer {l.name!r} already has kernel stride d={l.d}")
        if l.kind == "pool_max" and l.s == 1 and l.k > 1:
            raise ConversionError(
                f"not an SW net: pool {l.name!r} has s=1 (already a strided-kernel pool); "
                "converting stride-1 pools is not supported")


def _back_size(l, w_out):
    if l.kind == "pool_max":
        return l.k * w_out if l.s == l.k else w_out + (l.k - 1) * l.d
    if l.kind in PARAM_KINDS:
        return (l.k - 1) + w_out
    return w_out


def correct_sw(spec: NetSpec, out_w=None) -> NetSpec:
    """Recompute the input size backwards from the output so every pool divides.

    ``out_w`` defaults to the output size the net currently produces (with
    border-overlapping pools rounding up), so an already consistent net is
    returned unchanged.
    """
    if out_w is None:
        out_w = spec.output_size(strict=False)
    need = {spec.output_blob: int(out_w)}
    for l in reversed(spec.layers[1:]):
        if l.output not in need:
            continue
        need[l.inputs[0]] = _back_size(l, need[l.output])
    return spec.with_input_w(need[spec.data_blob])


def sw_to_sk(spec: NetSpec, out_w=1) -> NetSpec:
    """Convert a sliding-window net into an equivalent strided-kernel net.

    The returned spec's input is sized for an ``out_w x out_w`` output patch.
    Raises :class:`ConversionError` naming the violated rule.
    """
    check_sw(spec)
    w_sw = {spec.data_blob: spec.input_w}
    d_temp = 1
    out = [spec.data_layer]
    for l in spec.layers[1:]:
        wi = w_sw[l.inputs[0]]
        if l.kind == "conv_sk":
            new = replace(l, s=1, p=0, d=d_temp)
            wo = wi - (l.k - 1)
        elif l.kind == "pool_max":
            if wi % l.k or l.k != l.s:
                raise ConversionError(
                    f"pool {l.name!r}: w mod k != 0 or k != s (w={wi}, k={l.k}, s={l.s}); "
                    "run correct_sw (--fix-sizes) first")
            new = replace(l, s=1, p=0, d=d_temp)
            wo = wi // l.k
            d_temp *= l.k
        elif l.kind == "ip":
            if l.k != wi:
                raise ConversionError(
                    f"inner product {l.name!r}: kernel k={l.k} does not span its {wi}x{wi} input")
            new = replace(l, kind="conv_sk", k=wi, s=1, p=0, d=d_temp)
            wo = 1
            d_temp = 1
        else:
            if l.k > 1:
                raise ConversionError(
                    f"layer {l.name!r} ({l.kind}) has k={l.k} > 1 and is not element-wise")
            new = l
            wo = wi
        if wo < 1:
            raise ConversionError(f"layer {l.name!r}: SW feature map shrinks to {wo}")
        w_sw[l.output] = wo
        out.append(new)
    if d_temp != 1:
        raise ConversionError(
            f"final kernel stride is d={d_temp}: output pixels are not independent; "
            "the network possibly lacks at least one inner product layer")
    return NetSpec(tuple(out), spec.input_w + int(out_w) - 1, spec.input_f, spec.n)


# --- size tables and estimators --------------------------------------------------

@dataclass(frozen=True)
class SizeRow:
    name: str
    kind: str
    f_in: int
    f_out: int
    k: int
    s: int
    d: int
    w_in: int | None
    w_out: int


def propagate_sizes(spec: NetSpec, w0=None, strict=True):
    """One :class:`SizeRow` per layer, data layer first."""
    chans = spec.channels()
    rows = []
    for l, wi, wo in spec.walk_sizes(w0, strict):
        f_in = spec.input_f if l.kind == "data" else sum(chans[b] for b in l.inputs)
        rows.append(SizeRow(l.name, l.kind, f_in, chans[l.output], l.k, l.s, l.d, wi, wo))
    return rows


def _conv_rows(spec, w0=None):
    return [r for r in propagate_sizes(spec, w0) if r.kind in PARAM_KINDS]


@dataclass
class ParamCount:
    weights: dict
    biases: dict

    @property
    def total(self):
        return sum(self.weights.values())

    @property
    def total_biases(self):
        return sum(self.biases.values())


def count_params(spec: NetSpec) -> ParamCount:
    """Free weights ``f_in*f_out*k^2`` per convolution-like layer; biases apart."""
    chans = spec.channels()
    weights, biases = {}, {}
    for l in spec.layers:
        if l.kind in PARAM_KINDS:
            weights[l.name] = chans[l.inputs[0]] * l.f_out * l.k * l.k
            biases[l.name] = l.f_out
    return ParamCount(weights, biases)


def flop_estimate(spec: NetSpec, w0=None):
    """FLOP per convolution layer, ``f_out * w_out^2 * (2*f_in*k^2 - 1)``."""
    return {r.name: r.f_out * r.w_out ** 2 * (2 * r.f_in * r.k * r.k - 1) for r in _conv_rows(spec, w0)}


@dataclass(frozen=True)
class DeviceProfile:
    peak_gflops: float = 1.0
    mem_bytes: int = 4 * GIB
    queues: int = 1

    def __post_init__(self):
        if self.peak_gflops <= 0 or self.mem_bytes <= 0 or self.queues < 1:
            raise ValueError("device profile values must be positive")


@dataclass
class MemoryEstimate:
    buffer_elems: int
    buffer_layer: str | None
    blob_elems: int
    param_elems: int
    total_lower_bound_elems: int
    bytes_per_elem: int = 4
    per_layer_buffer: dict = field(default_factory=dict)

    @property
    def buffer_bytes(self):
        return self.buffer_elems * self.bytes_per_elem

    @property
    def processing_bytes(self):
        """Persistent blobs, parameters and one shared column buffer."""
        return (self.buffer_elems + self.blob_elems + self.param_elems) * self.bytes_per_elem

    @property
    def training_bytes(self):
        """Processing footprint plus a diff plane for every blob and parameter."""
        return self.processing_bytes + (self.blob_elems + self.param_elems) * self.bytes_per_elem

    @property
    def total_lower_bound_bytes(self):
        return self.total_lower_bound_elems * self.bytes_per_elem


def buffer_and_memory(spec: NetSpec, w0=None, profile: DeviceProfile | None = None, n=1,
                      bytes_per_elem=4) -> MemoryEstimate:
    """Shared column buffer size and memory footprints for ``n`` samples.

    The lower bound assumes non-persistent blobs:
    ``min(n, q)*M_buffer + n*max_layer(input elems + output elems)``.
    """
    profile = profile or DeviceProfile()
    rows = propagate_sizes(spec, w0)
    sizes = {r.name: r for r in rows}
    producers = spec.producers()
    per_layer = {r.name: r.f_in * r.k * r.k * r.w_out ** 2 for r in rows if r.kind in PARAM_KINDS}
    buf_layer = max(per_layer, key=per_layer.get) if per_layer else None
    m_buffer = per_layer[buf_layer] if buf_layer else 0
    blob_elems = sum(r.f_out * r.w_out ** 2 for r in rows)
    pair = 0
    for l in spec.layers[1:]:
        ins = sum(sizes[producers[b].name].f_out * sizes[producers[b].name].w_out ** 2 for b in l.inputs)
        r = sizes[l.name]
        pair = max(pair, ins + r.f_out * r.w_out ** 2)
    params = count_params(spec)
    total = min(n, profile.queues) * m_buffer + n * pair
    return MemoryEstimate(m_buffer, buf_layer, blob_elems, params.total + params.total_biases,
                          total, bytes_per_elem, per_layer)


def max_output_size_closed_form(f_in, k, cap_bytes=4 * GIB, bytes_per_elem=4):
    """Largest ``w`` with ``f_in * k^2 * w^2`` elements fitting in ``cap_bytes``."""
    return int(math.floor(math.sqrt(cap_bytes / bytes_per_elem / (f_in * k * k))))


def max_output_size(spec: NetSpec, cap_bytes=4 * GIB, bytes_per_elem=4, limit=20000):
    """Largest network output whose shared column buffer stays within ``cap_bytes``."""
    best = None
    for w0 in range(1, limit):
        if not spec.valid_input(w0):
            continue
        if buffer_and_memory(spec, w0, bytes_per_elem=bytes_per_elem).buffer_bytes > cap_bytes:
            break
        best = spec.output_size(w0)
    if best is None:
        raise SizeError("no valid input fits the buffer cap")
    return best


@dataclass
class CostRow:
    name: str
    kind: str
    out_size: int
    flop: int
    buffer_elems: int
    params: int
    time_s: float | None = None
    efficiency: float | None = None

    def buffer_bytes(self, bytes_per_elem=4):
        return self.buffer_elems * bytes_per_elem


@dataclass
class CostReport:
    rows: list
    memory: MemoryEstimate
    profile: DeviceProfile

    @property
    def total_flop(self):
        return sum(r.flop for r in self.rows)

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_time(self):
        times = [r.time_s for r in self.rows if r.time_s is not None]
        return sum(times) if times else None

    def set_times(self, times):
        """Attach per-layer wall times and derive ``flop / (time * peak)``."""
        peak = self.profile.peak_gflops * 1e9
        for r in self.rows:
            t = times.get(r.name)
            r.time_s = t
            r.efficiency = (r.flop / (t * peak)) if (t and r.flop) else None


def cost_report(spec: NetSpec, w0=None, profile: DeviceProfile | None = None, n=1) -> CostReport:
    profile = profile or DeviceProfile()
    flops = flop_estimate(spec, w0)
    params = count_params(spec).weights
    mem = buffer_and_memory(spec, w0, profile, n)
    rows = [CostRow(r.name, r.kind, r.w_out, flops.get(r.name, 0),
                    mem.per_layer_buffer.get(r.name, 0), params.get(r.name, 0))
            for r in propagate_sizes(spec, w0) if r.kind != "data"]
    return CostReport(rows, mem, profile)


# --- sliding-window reference ------------------------------------------------------

def sliding_window_forward(spec: NetSpec, params, patch):
    """Run an SW net on one ``w0_SW`` patch with direct numpy ops, in float64.

    Deliberately independent of im2col/GEMM and the pooling kernels so it
    can serve as ground truth for strided-kernel execution.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    blobs = {spec.data_blob: np.asarray(patch, dtype=np.float64)}
    for l in spec.layers[1:]:
        x = blobs[l.inputs[0]]
        if l.kind in PARAM_KINDS:
            st = params[l.name]
            c = x.shape[0]
            w = st.weight.astype(np.float64).reshape(st.weight.shape[0], c, l.k, l.k)
            if l.kind == "ip":
                if x.shape[1:] != (l.k, l.k):
                    raise SizeError(f"inner product expects {l.k}x{l.k}, got {x.shape[1:]}", l.name)
                y = (w.reshape(w.shape[0], -1) @ x.ravel())[:, None, None]
            else:
                win = sliding_window_view(x, (l.k, l.k), axis=(1, 2))
                y = np.einsum("ocij,chwij->ohw", w, win)
            y = y + st.bias.astype(np.float64)[:, None, None]
        elif l.kind == "pool_max":
            c, h, wd = x.shape
            if l.s != l.k or h % l.k or wd % l.k:
                raise SizeError("SW pools must be non-overlapping and divide the map", l.name)
            y = x.reshape(c, h // l.k, l.k, wd // l.k, l.k).max(axis=(2, 4))
        elif l.kind == "relu":
            y = np.maximum(x, 0.0)
        elif l.kind == "softmax_loss":
            e = np.exp(x - x.max(axis=0, keepdims=True))
            y = e / e.sum(axis=0, keepdims=True)
        else:
            raise ConversionError(f"layer kind {l.kind} cannot appear in an SW net")
        blobs[l.output] = y
    return blobs


def random_check_params(spec: NetSpec, rng, dtype=np.float64):
    """Weights sized for O(1) activations and non-zero biases, for equivalence checks."""
    chans = spec.channels()
    out = {}
    for l in spec.layers:
        if l.kind in PARAM_KINDS:
            f_in = chans[l.inputs[0]]
            w = rng.normal(0.0, math.sqrt(2.0 / (f_in * l.k * l.k)), size=(l.f_out, f_in * l.k * l.k))
            b = rng.normal(0.0, 0.1, size=l.f_out)
            out[l.name] = LayerState(w.astype(dtype), b.astype(dtype))
    return out


@dataclass
class EquivalenceReport:
    max_abs_dev: float
    pixels: int
    trials: int
    out_size: int
    dtype: str

    def passed(self, tol):
        return self.max_abs_dev <= tol


def _check_related(sw: NetSpec, sk: NetSpec):
    sw_c, sk_c = sw.channels(), sk.channels()
    sw_p = {l.name: l for l in sw.layers if l.kind in PARAM_KINDS}
    sk_p = {l.name: l for l in sk.layers if l.kind in PARAM_KINDS}
    if sw_p.keys() != sk_p.keys():
        raise ConversionError("nets are not conversion-related: parameter layers differ")
    for name, a in sw_p.items():
        b = sk_p[name]
        if (a.f_out, a.k, sw_c[a.inputs[0]]) != (b.f_out, b.k, sk_c[b.inputs[0]]):
            raise ConversionError(f"nets are not conversion-related: parameter shapes of {name!r} differ")


def sk_sw_equivalence_check(sw: NetSpec, sk: NetSpec, w0=None, trials=1, seed=0,
                            dtype=np.float32) -> EquivalenceReport:
    """Max |SK - SW| over every output pixel and channel of the score blob.

    The SK net runs once on a ``w0 x w0`` input; the SW reference runs once
    per output pixel on the matching ``w0_SW`` crop.
    """
    _check_related(sw, sk)
    w_sw = sw.input_w
    w0 = sk.input_w if w0 is None else w0
    if w0 < w_sw:
        raise SizeError(f"SK input {w0} smaller than SW context {w_sw}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    pixels = 0
    out_size = 0
    sk_blob, sw_blob = sk.score_blob, sw.score_blob
    for _ in range(trials):
        params64 = random_check_params(sw, rng)
        x = rng.uniform(-1.0, 1.0, size=(sw.input_f, w0, w0))
        params = {k: v.astype(dtype) for k, v in params64.items()}
        net = Net(sk.with_input_w(w0), params=params, dtype=dtype)
        y = net.forward(x.astype(dtype))[sk_blob].astype(np.float64)
        out_size = y.shape[1]
        if out_size != w0 - w_sw + 1:
            worst = math.inf
            continue
        # reference sees the same rounded inputs and weights as the SK run
        ref_params = {k: v.astype(np.float64) for k, v in params.items()}
        xr = x.astype(dtype).astype(np.float64)
        for oy in range(out_size):
            for ox in range(out_size):
                ref = sliding_window_forward(sw, ref_params, xr[:, oy:oy + w_sw, ox:ox + w_sw])[sw_blob]
                worst = max(worst, float(np.abs(y[:, oy, ox] - ref[:, 0, 0]).max()))
                pixels += 1
    return EquivalenceReport(worst, pixels, trials, out_size, np.dtype(dtype).name)


def random_sw_net(rng, max_depth=5, f_in=1):
    """A random valid SW net: convs (k in 1..4) and 2x2 pools, then inner products.

    Sizes are fixed up with :func:`correct_sw` so every pool divides.
    """
    from .netgraph import LayerSpec

    depth = int(rng.integers(1, max_depth))
    layers = [LayerSpec(name="data", kind="data", output="data")]
    prev, f = "data", f_in
    for i in range(depth):
        if rng.random() < 0.4 and i > 0:
            layers.append(LayerSpec(name=f"pool{i}", kind="pool_max", k=2, s=2,
                                    inputs=(prev,), output=f"pool{i}"))
            prev = f"pool{i}"
        else:
            f = int(rng.integers(2, 5))
            layers.append(LayerSpec(name=f"conv{i}", kind="conv_sk", k=int(rng.integers(1, 5)),
                                    f_out=f, inputs=(prev,), output=f"conv{i}"))
            layers.append(LayerSpec(name=f"relu{i}", kind="relu", inputs=(f"conv{i}",), output=f"relu{i}"))
            prev = f"relu{i}"
    ip = LayerSpec(name="ip1", kind="ip", k=1, f_out=int(rng.integers(2, 5)), inputs=(prev,), output="ip1")
    tail = [ip, LayerSpec(name="reluip", kind="relu", inputs=("ip1",), output="reluip"),
            LayerSpec(name="ip2", kind="ip", k=1, f_out=2, inputs=("reluip",), output="ip2")]
    tail[0] = replace(ip, k=int(rng.integers(1, 4)))
    spec = NetSpec(tuple(layers + tail), 1, f_in)
    return correct_sw(spec, out_w=1)
