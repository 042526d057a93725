"""Binary weights file.

Layout, all integers little-endian u32::

    "PXSG" | version | entry count
    per entry: name length | name (UTF-8) | ndim | dims... | float32 data

Entries are named ``<layer>/W`` and ``<layer>/b``.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import PxsegError, SizeError
from .layers import LayerState

MAGIC = b"PXSG"
VERSION = 1


class WeightsFormatError(PxsegError, OSError):
    pass


def _entries(params):
    for name in params:
        st = params[name]
        yield f"{name}/W", st.weight
        yield f"{name}/b", st.bias


def dumps(params) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, 2 * len(params))]
    for name, arr in _entries(params):
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def loads(buf: bytes, dtype=np.float32):
    if buf[:4] != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightsFormatError("truncated weights file")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
    if pos != len(buf):
        raise WeightsFormatError(f"{len(buf) - pos} trailing bytes after the last entry")
    layers = {}
    for name in arrays:
        layer, _, part = name.rpartition("/")
        if part not in ("W", "b") or not layer:
            raise WeightsFormatError(f"bad entry name {name!r}")
        layers.setdefault(layer, {})[part] = arrays[name]
    params = {}
    for layer, d in layers.items():
        if set(d) != {"W", "b"}:
            raise WeightsFormatError(f"layer {layer!r} lacks weights or biases")
        params[layer] = LayerState(d["W"].astype(dtype), d["b"].astype(dtype))
    return params


def save(path, params):
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path, dtype=np.float32):
    with open(path, "rb") as fh:
        return loads(fh.read(), dtype)


def check_against(params, spec):
    """Raise SizeError unless ``params`` fit every parameter layer of ``spec``."""
    chans = spec.channels()
    for l in spec.layers:
        if not l.has_params:
            continue
        if l.name not in params:
            raise SizeError("no weights in file", l.name)
        want = (l.f_out, chans[l.inputs[0]] * l.k * l.k)
        if params[l.name].weight.shape != want:
            raise SizeError(f"weights are {params[l.name].weight.shape}, net needs {want}", l.name)
