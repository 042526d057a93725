"""8-bit grayscale image files: binary PGM (P5) natively, PNG through Pillow."""
from __future__ import annotations

import os

import numpy as np

from .errors import PxsegError


class ImageFormatError(PxsegError, OSError):
    pass


def _tokens(buf, pos, count):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), pos = _tokens(buf, 2, 3)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PGM header") from None
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: only 8-bit PGM is supported (maxval={maxval})")
    pos += 1  # single whitespace byte before the raster
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise ImageFormatError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, img):
    a = np.asarray(img)
    if a.ndim != 2:
        raise ImageFormatError(f"PGM images are 2-D, got shape {a.shape}")
    if a.dtype != np.uint8:
        if a.min() < 0 or a.max() > 255:
            raise ImageFormatError("pixel values must lie in 0..255")
        a = a.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_png(path):
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - depends on the environment
        raise ImageFormatError("reading PNG needs Pillow (pip install Pillow)") from None
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def read_image(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        return read_png(path)
    return read_pgm(path)


IMAGE_EXTS = (".pgm", ".png")


def list_images(directory):
    """Image files in ``directory`` in alphabetical order."""
    names = sorted(n for n in os.listdir(directory) if os.path.splitext(n)[1].lower() in IMAGE_EXTS)
    return [os.path.join(directory, n) for n in names]
