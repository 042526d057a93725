"""Pixelwise classification with strided-kernel, U and USK networks."""
from ._accel import BACKEND
from .errors import ConversionError, NumericError, PxsegError, SizeError, SpecError
from .netgraph import Net, NetSpec, LayerSpec, builtin_net, init_weights, load_netspec, parse_netspec

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConversionError",
    "LayerSpec",
    "Net",
    "NetSpec",
    "NumericError",
    "PxsegError",
    "SizeError",
    "SpecError",
    "builtin_net",
    "init_weights",
    "load_netspec",
    "parse_netspec",
]
