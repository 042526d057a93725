"""Network descriptions, the line-based config format, and DAG execution.

Config format, one directive per line (``#`` starts a comment)::

    input w=102 f=3
    layer conv1 conv_sk k=7 fout=48 in=data out=conv1
    layer relu1 relu in=conv1 out=conv1r
    layer pool1 pool_max k=2 s=2 in=conv1r out=pool1
    layer ip1 ip k=10 fout=1024 in=pool3 out=ip1
    layer prob softmax_loss in=ip3 out=prob

Unset geometry defaults to ``k=1 s=1 d=1``; ``upconv`` defaults to
``k=2 s=2``.  ``init`` is ``gaussian:<sigma>`` or ``he``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import SizeError, SpecError
from .tensor import ConvGeometry, SharedBuffer

KINDS = ("data", "conv_sk", "ip", "pool_max", "relu", "upconv", "mergecrop", "softmax_loss")
PARAM_KINDS = ("conv_sk", "ip")
ELEMENTWISE = ("relu", "softmax_loss")

_INT_KEYS = ("k", "s", "d", "p", "fout", "w", "f")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    k: int = 1
    s: int = 1
    d: int = 1
    p: int = 0
    f_out: int | None = None
    inputs: tuple = ()
    output: str = ""
    init: str = "gaussian:0.01"
    line: int | None = field(default=None, compare=False)

    @property
    def has_params(self):
        return self.kind in PARAM_KINDS

    def init_sigma(self, f_in):
        if self.init == "he":
            return math.sqrt(2.0 / (f_in * self.k * self.k))
        return float(self.init.split(":", 1)[1])


@dataclass(frozen=True)
class NetSpec:
    layers: tuple
    input_w: int
    input_f: int
    n: int = 1

    @property
    def data_layer(self):
        return self.layers[0]

    @property
    def data_blob(self):
        return self.layers[0].output

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def producers(self):
        return {l.output: l for l in self.layers}

    def consumers(self):
        out = {}
        for l in self.layers:
            for b in l.inputs:
                out.setdefault(b, []).append(l)
        return out

    @property
    def output_blob(self):
        """The blob nobody consumes (the last layer's output)."""
        return self.layers[-1].output

    @property
    def score_blob(self):
        """Input of the softmax layer, i.e. the raw class scores."""
        for l in reversed(self.layers):
            if l.kind == "softmax_loss":
                return l.inputs[0]
        return self.output_blob

    def with_input_w(self, w):
        return replace(self, input_w=int(w))

    def channels(self):
        """Feature map count of every blob."""
        f = {}
        for l in self.layers:
            if l.kind == "data":
                f[l.output] = self.input_f
            elif l.kind in PARAM_KINDS:
                f[l.output] = l.f_out
            elif l.kind == "mergecrop":
                f[l.output] = f[l.inputs[0]] + f[l.inputs[1]]
            else:
                f[l.output] = f[l.inputs[0]]
        return f

    def f_in(self, layer):
        return self.channels()[layer.inputs[0]]

    def sizes(self, w0=None, strict=True):
        """Spatial size of every blob for input size ``w0`` (default: declared).

        ``strict=False`` lets downsampling pools round up like a
        border-overlapping sliding-window pool instead of raising.
        """
        w0 = self.input_w if w0 is None else w0
        return {l.output: w for l, _, w in self.walk_sizes(w0, strict)}

    def walk_sizes(self, w0=None, strict=True):
        """Yield ``(layer, w_in, w_out)`` in declaration order."""
        w0 = self.input_w if w0 is None else w0
        w = {}
        for l in self.layers:
            if l.kind == "data":
                w[l.output] = w0
                yield l, None, w0
                continue
            wi = w[l.inputs[0]]
            wo = layer_out_size(l, wi, w.get(l.inputs[1]) if len(l.inputs) > 1 else None, strict)
            w[l.output] = wo
            yield l, wi, wo

    def output_size(self, w0=None, strict=True):
        return self.sizes(w0, strict)[self.output_blob]

    def valid_input(self, w0):
        try:
            return self.output_size(w0) >= 1
        except SizeError:
            return False

    def input_size_for(self, w_out, limit=4096):
        """Smallest input size whose output is exactly ``w_out`` pixels."""
        for w0 in range(w_out, w_out + limit):
            try:
                out = self.output_size(w0)
            except SizeError:
                continue
            if out == w_out:
                return w0
            if out > w_out:
                break
        raise SizeError(f"no input size produces a {w_out}-pixel output")


def layer_out_size(l: LayerSpec, wi, wb=None, strict=True):
    if l.kind in ("conv_sk", "pool_max", "ip"):
        span = (l.k - 1) * l.d + 1
        if l.kind == "ip" and wi != span:
            raise SizeError(f"inner product kernel {l.k} != input size {wi}", l.name)
        if l.kind == "pool_max" and l.s == l.k and l.k > 1:
            if wi % l.k:
                if strict:
                    raise SizeError(f"downsampling pool: w mod k != 0 ({wi} mod {l.k})", l.name)
                return -(-wi // l.k)
            if l.d == 1:
                return wi // l.k
        if span > wi:
            raise SizeError(f"external kernel size {span} exceeds input size {wi}", l.name)
        if (wi - span) % l.s:
            raise SizeError(f"({wi} - {span}) not divisible by stride {l.s}", l.name)
        return (wi - span) // l.s + 1
    if l.kind == "upconv":
        return 2 * wi
    if l.kind == "mergecrop":
        if wb < wi:
            raise SizeError(f"mergecrop input B ({wb}) smaller than A ({wi})", l.name)
        return wi
    return wi


# --- parsing --------------------------------------------------------------

def _parse_kv(tokens, lineno, errors):
    kv = {}
    for tok in tokens:
        if "=" not in tok:
            errors.append((lineno, f"expected key=value, got {tok!r}"))
            continue
        key, val = tok.split("=", 1)
        if key in _INT_KEYS:
            try:
                kv[key] = int(val)
            except ValueError:
                errors.append((lineno, f"{key} must be an integer, got {val!r}"))
        else:
            kv[key] = val
    return kv


def _check_init(init, lineno, errors):
    if init == "he":
        return
    if init.startswith("gaussian:"):
        try:
            if float(init.split(":", 1)[1]) > 0:
                return
        except ValueError:
            pass
    errors.append((lineno, f"init must be 'he' or 'gaussian:<sigma>' with sigma > 0, got {init!r}"))


def _validate_layer(l: LayerSpec, lineno, errors):
    arity = {"mergecrop": 2}.get(l.kind, 1)
    if len(l.inputs) != arity:
        errors.append((lineno, f"{l.kind} layer {l.name!r} needs {arity} input blob(s), got {len(l.inputs)}"))
    if not l.output:
        errors.append((lineno, f"layer {l.name!r} has no out= blob"))
    if l.p != 0:
        errors.append((lineno, f"layer {l.name!r}: padding is always p=0, got p={l.p}"))
    if l.k < 1 or l.d < 1 or l.s < 1:
        errors.append((lineno, f"layer {l.name!r}: k, s, d must be >= 1"))
    if l.kind in PARAM_KINDS:
        if l.f_out is None or l.f_out < 1:
            errors.append((lineno, f"layer {l.name!r} needs fout >= 1"))
        if l.s != 1:
            errors.append((lineno, f"layer {l.name!r}: convolutions use s=1, got s={l.s}"))
    elif l.f_out is not None and l.kind != "upconv":
        errors.append((lineno, f"layer {l.name!r}: fout is not allowed on {l.kind} layers"))
    if l.kind == "pool_max" and l.s not in (1, l.k):
        errors.append((lineno, f"pool {l.name!r}: s must be 1 or k, got k={l.k} s={l.s}"))
    if l.kind in ELEMENTWISE + ("mergecrop",) and (l.k != 1 or l.d != 1 or l.s != 1):
        errors.append((lineno, f"layer {l.name!r}: {l.kind} takes no geometry"))
    if l.kind == "upconv" and (l.k != 2 or l.s != 2 or l.d != 1):
        errors.append((lineno, f"upconv {l.name!r}: only k=2 s=2 nearest-neighbour upsampling"))
    if l.kind == "ip" and l.d != 1:
        errors.append((lineno, f"inner product {l.name!r} must have d=1"))
    _check_init(l.init, lineno, errors)


def parse_netspec(text: str) -> NetSpec:
    """Parse the config format; raises :class:`SpecError` listing every problem."""
    errors = []
    layers = []
    input_w = input_f = None
    input_line = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "input":
            kv = _parse_kv(tokens[1:], lineno, errors)
            if input_line is not None:
                errors.append((lineno, f"second input directive (first on line {input_line})"))
                continue
            input_line = lineno
            input_w, input_f = kv.get("w"), kv.get("f")
            if not input_w or not input_f or input_w < 1 or input_f < 1:
                errors.append((lineno, "input needs w >= 1 and f >= 1"))
            name = kv.get("name", "data")
            layers.insert(0, LayerSpec(name=name, kind="data", output=kv.get("out", name), line=lineno))
        elif head == "layer":
            if len(tokens) < 3:
                errors.append((lineno, "layer directive needs a name and a kind"))
                continue
            name, kind = tokens[1], tokens[2]
            if kind not in KINDS or kind == "data":
                errors.append((lineno, f"unknown layer kind {kind!r}"))
                continue
            kv = _parse_kv(tokens[3:], lineno, errors)
            defaults = {"k": 2, "s": 2} if kind == "upconv" else {}
            unknown = set(kv) - {"k", "s", "d", "p", "fout", "in", "out", "init"}
            if unknown:
                errors.append((lineno, f"unknown keys {sorted(unknown)}"))
            spec = LayerSpec(
                name=name, kind=kind,
                k=kv.get("k", defaults.get("k", 1)),
                s=kv.get("s", defaults.get("s", 1)),
                d=kv.get("d", 1), p=kv.get("p", 0),
                f_out=kv.get("fout"),
                inputs=tuple(b for b in kv.get("in", "").split(",") if b),
                output=kv.get("out", ""),
                init=kv.get("init", "gaussian:0.01"),
                line=lineno,
            )
            _validate_layer(spec, lineno, errors)
            layers.append(spec)
        else:
            errors.append((lineno, f"unknown directive {head!r}"))
    if input_line is None:
        errors.append((None, "no data layer (missing 'input w=<int> f=<int>' directive)"))
    else:
        _check_graph(layers, errors)
    if errors:
        raise SpecError(sorted(errors, key=lambda e: (e[0] or 0)))
    return NetSpec(tuple(layers), input_w, input_f)


def _check_graph(layers, errors):
    produced = {}
    names = {}
    for l in layers:
        if l.name in names:
            errors.append((l.line, f"duplicate layer name {l.name!r} (first on line {names[l.name]})"))
        names.setdefault(l.name, l.line)
        for b in l.inputs:
            if b not in produced:
                later = [m for m in layers if m.output == b]
                if later:
                    errors.append((l.line, f"blob {b!r} consumed before it is produced on line "
                                           f"{later[0].line} (cycle or order error)"))
                else:
                    errors.append((l.line, f"dangling blob reference {b!r}"))
        if l.output in produced:
            errors.append((l.line, f"blob {l.output!r} produced twice: lines "
                                   f"{produced[l.output].line} and {l.line}"))
        else:
            produced[l.output] = l


def format_netspec(spec: NetSpec) -> str:
    data = spec.data_layer
    lines = [f"input w={spec.input_w} f={spec.input_f}"
             + (f" name={data.name}" if data.name != "data" else "")
             + (f" out={data.output}" if data.output != data.name else "")]
    for l in spec.layers[1:]:
        parts = [f"layer {l.name} {l.kind}"]
        if l.kind in ("conv_sk", "ip", "pool_max", "upconv"):
            parts.append(f"k={l.k} s={l.s} d={l.d}")
        if l.f_out is not None:
            parts.append(f"fout={l.f_out}")
        parts.append(f"in={','.join(l.inputs)} out={l.output}")
        if l.has_params:
            parts.append(f"init={l.init}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def load_netspec(path) -> NetSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_netspec(fh.read())


# --- weights ----------------------------------------------------------------

def init_weights(net: NetSpec, seed=0, dtype=np.float32):
    """Gaussian weights per each layer's ``init`` field, zero biases.

    Layers draw from one generator in declaration order, so a seed fixes
    every value.
    """
    rng = np.random.default_rng(seed)
    chans = net.channels()
    params = {}
    for l in net.layers:
        if not l.has_params:
            continue
        f_in = chans[l.inputs[0]]
        sigma = l.init_sigma(f_in)
        w = rng.normal(0.0, sigma, size=(l.f_out, f_in * l.k * l.k))
        params[l.name] = L.LayerState(w.astype(dtype), np.zeros(l.f_out, dtype=dtype))
    return params


# --- execution --------------------------------------------------------------

class Net:
    """One execution context: a spec, its parameters and the blob table.

    ``forward`` keeps every blob until the next call so ``backward`` can
    reuse inputs and pooling argmax caches.
    """

    def __init__(self, spec: NetSpec, params=None, seed=0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_weights(spec, seed, dtype)
        self.buffer = SharedBuffer()
        self.blobs = {}
        self._argmax = {}
        self._geom = {}

    def _conv_geom(self, l, x):
        if l.kind == "ip" and (x.shape[1] != l.k or x.shape[2] != l.k):
            raise SizeError(f"inner product expects a {l.k}x{l.k} input, got {x.shape[1]}x{x.shape[2]}",
                            l.name)
        return ConvGeometry.make(l.k, x.shape[1], x.shape[2], d=l.d, s=l.s, layer=l.name)

    def forward(self, x, upto=None, timings=None):
        """Run every layer on the ``(f, h, w)`` input; returns the blob table.

        When ``timings`` is a dict, each layer's wall time is added to it.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.shape[0] != self.spec.input_f:
            raise SizeError(f"input has {x.shape[0]} channels, net expects {self.spec.input_f}",
                            self.spec.data_layer.name)
        blobs = {self.spec.data_blob: x}
        self._argmax.clear()
        self._geom.clear()
        for l in self.spec.layers[1:]:
            t0 = time.perf_counter()
            inp = blobs[l.inputs[0]]
            if l.kind in PARAM_KINDS:
                g = self._conv_geom(l, inp)
                self._geom[l.name] = g
                out = L.conv_sk_forward(inp, self.params[l.name], g, self.buffer, layer=l.name)
            elif l.kind == "pool_max":
                out, arg = L.maxpool_sk_forward(inp, l.k, l.s, l.d, layer=l.name)
                self._argmax[l.name] = arg
            elif l.kind == "relu":
                out = L.relu(inp)
            elif l.kind == "upconv":
                out = L.upconv_forward(inp)
            elif l.kind == "mergecrop":
                out = L.mergecrop_forward(inp, blobs[l.inputs[1]], layer=l.name)
            elif l.kind == "softmax_loss":
                out = L.softmax(inp)
            else:  # pragma: no cover - parse rejects unknown kinds
                raise SizeError(f"cannot execute kind {l.kind}", l.name)
            blobs[l.output] = out
            if timings is not None:
                timings[l.name] = timings.get(l.name, 0.0) + time.perf_counter() - t0
            if upto is not None and l.output == upto:
                break
        self.blobs = blobs
        return blobs

    def backward(self, grads, timings=None):
        """Back-propagate ``{blob: grad}`` seeds; accumulates parameter diffs.

        Returns the gradient table for every blob reached.  MergeCrop passes
        gradient to its first input only.
        """
        diff = {b: np.asarray(g, dtype=self.dtype) for b, g in grads.items()}
        for l in reversed(self.spec.layers[1:]):
            g = diff.get(l.output)
            if g is None:
                continue
            t0 = time.perf_counter()
            inp = self.blobs[l.inputs[0]]
            if g.shape != self.blobs[l.output].shape:
                raise SizeError(f"gradient shape {g.shape} != blob shape {self.blobs[l.output].shape}",
                                l.name)
            if l.kind in PARAM_KINDS:
                need = l.inputs[0] != self.spec.data_blob
                gi = L.conv_sk_backward(inp, g, self.params[l.name], self._geom[l.name],
                                        self.buffer, layer=l.name, need_input_grad=need)
            elif l.kind == "pool_max":
                gi = L.maxpool_sk_backward(g, self._argmax[l.name], inp.shape)
            elif l.kind == "relu":
                gi = L.relu_backward(g, inp)
            elif l.kind == "upconv":
                gi = L.upconv_backward(g)
            elif l.kind == "mergecrop":
                gi = L.mergecrop_backward(g, inp.shape[0])
            elif l.kind == "softmax_loss":
                gi = L.softmax_backward(self.blobs[l.output], g)
            if gi is not None:
                _accumulate(diff, l.inputs[0], gi)
            if timings is not None:
                timings[l.name] = timings.get(l.name, 0.0) + time.perf_counter() - t0
        return diff

    def zero_diffs(self):
        for st in self.params.values():
            st.zero_diffs()

    def predict(self, x):
        """Class probabilities ``(classes, h, w)`` for one input tile."""
        blobs = self.forward(x)
        scores = blobs[self.spec.score_blob]
        out = blobs[self.spec.output_blob]
        return out if out is not scores else L.softmax(scores)


def _accumulate(diff, blob, g):
    if blob in diff:
        diff[blob] = diff[blob] + g
    else:
        diff[blob] = g


def forward(net: Net, x):
    return net.forward(x)


def backward(net: Net, loss_grads):
    return net.backward(loss_grads)


BUILTIN_NETS = ("sw", "sk", "u", "usk", "toy_sw", "toy_sk", "toy_u", "toy_usk")


def builtin_net(name) -> NetSpec:
    """One of the bundled configs in ``pxseg/nets`` (see :data:`BUILTIN_NETS`)."""
    from importlib import resources
    if name not in BUILTIN_NETS:
        raise KeyError(f"unknown builtin net {name!r}; choose from {BUILTIN_NETS}")
    return parse_netspec(resources.files("pxseg.nets").joinpath(f"{name}.net").read_text("utf-8"))
