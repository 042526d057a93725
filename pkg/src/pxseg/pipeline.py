"""Training data preparation, the SGD trainer and tiled whole-image inference.

A training sample is a ``w x w`` label patch plus the raw context around it.
Raw images are mirror padded so that every label pixel, including those on
the image border, sees a full context of ``v`` extra pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers as L
from . import malis as M
from .errors import NumericError, SizeError, SpecError
from .netgraph import Net, NetSpec


@dataclass
class LabeledImage:
    raw: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.raw.shape[-2:] != self.labels.shape:
            raise SizeError(f"{self.name or 'image'}: raw {self.raw.shape} and labels {self.labels.shape} differ")


# --- padding, labels, normalisation ----------------------------------------------

def mirror_pad(image, v):
    """Reflect-pad by ``ceil(v/2)`` on top/left and ``floor(v/2)`` on bottom/right."""
    if v < 0:
        raise SizeError(f"padding must be >= 0, got {v}")
    a, b = -(-v // 2), v // 2
    img = np.asarray(image)
    spec = [(0, 0)] * (img.ndim - 2) + [(a, b), (a, b)]
    return np.pad(img, spec, mode="reflect") if v else img.copy()


def normalize(raw):
    """8-bit intensities to ``[-1, 1]``."""
    return np.asarray(raw, dtype=np.float64) / 127.5 - 1.0


def consolidate_labels(labels, mapping):
    """Apply a label-to-label table; targets must be exactly ``0..L-1``."""
    targets = sorted(set(mapping.values()))
    if targets != list(range(len(targets))):
        raise SpecError(f"label mapping targets must be 0..{len(targets) - 1} without gaps, got {targets}")
    labels = np.asarray(labels)
    missing = sorted(set(np.unique(labels).tolist()) - set(mapping))
    if missing:
        raise SpecError(f"label mapping has no entry for labels {missing}")
    lut = np.zeros(int(max(max(mapping), labels.max())) + 1, dtype=np.int64)
    for src, dst in mapping.items():
        lut[src] = dst
    return lut[labels]


def coverage(n, w):
    """How many ``w``-long windows inside ``[0, n)`` cover each position."""
    if w > n:
        raise SizeError(f"patch size {w} exceeds image size {n}")
    y = np.arange(n)
    return np.minimum(y, n - w) - np.maximum(0, y - w + 1) + 1


def compute_label_stats(images, w, n_labels=None):
    """Label frequencies weighted by how many ``w x w`` patches cover each pixel."""
    labs = [np.asarray(im.labels if isinstance(im, LabeledImage) else im) for im in images]
    n_labels = n_labels or int(max(l.max() for l in labs)) + 1
    c = np.zeros(n_labels)
    for lab in labs:
        wgt = np.outer(coverage(lab.shape[0], w), coverage(lab.shape[1], w))
        c += np.bincount(lab.ravel(), weights=wgt.ravel(), minlength=n_labels)[:n_labels]
    return c / c.sum()


# --- patch prior and masking ---------------------------------------------------------

@dataclass
class SamplerState:
    c: np.ndarray
    r: np.ndarray
    c_hat: np.ndarray
    offsets: np.ndarray
    w: int
    v: int
    seed: int = 0

    @property
    def probs(self):
        return self.r / self.r.sum()


def patch_histograms(images, w, n_labels):
    """``a[j, i]``: fraction of label ``i`` in patch ``j``; offsets are ``(image, y, x)``."""
    hists, offs = [], []
    for idx, im in enumerate(images):
        lab = np.asarray(im.labels if isinstance(im, LabeledImage) else im)
        H, W = lab.shape
        if w > H or w > W:
            raise SizeError(f"patch size {w} exceeds label image {H}x{W}")
        onehot = (lab[None] == np.arange(n_labels)[:, None, None]).astype(np.int64)
        ii = np.pad(onehot.cumsum(1).cumsum(2), ((0, 0), (1, 0), (1, 0)))
        box = ii[:, w:, w:] - ii[:, :-w, w:] - ii[:, w:, :-w] + ii[:, :-w, :-w]
        hists.append(box.reshape(n_labels, -1).T / float(w * w))
        ys, xs = np.mgrid[0:H - w + 1, 0:W - w + 1]
        offs.append(np.stack([np.full(ys.size, idx), ys.ravel(), xs.ravel()], axis=1))
    return np.concatenate(hists), np.concatenate(offs)


def patch_prior(a, c):
    """``r_j = sum_i a_ji / c_i`` (absent labels skipped) and ``c_hat`` normalised to 1."""
    inv = np.where(c > 0, 1.0 / np.where(c > 0, c, 1.0), 0.0)
    r = a @ inv
    c_hat = r @ a
    return r, c_hat / c_hat.sum()


def build_sampler(images, w, v=0, n_labels=None, seed=0, use_prior=True) -> SamplerState:
    labs = [im.labels if isinstance(im, LabeledImage) else im for im in images]
    n_labels = n_labels or int(max(np.max(l) for l in labs)) + 1
    c = compute_label_stats(labs, w, n_labels)
    a, offs = patch_histograms(labs, w, n_labels)
    if use_prior:
        r, c_hat = patch_prior(a, c)
    else:
        r = np.ones(len(a))
        c_hat = r @ a
        c_hat = c_hat / c_hat.sum()
    return SamplerState(c, r, c_hat, offs, w, v, seed)


def patch_prior_sample(state: SamplerState, rng):
    """Draw a patch offset ``(image, y, x)`` with probability ``r_j / sum(r)``."""
    j = rng.choice(len(state.r), p=state.probs)
    return tuple(int(t) for t in state.offsets[j])


def mask_errors(labels, c, rng):
    """Keep a pixel of label ``i`` with probability ``min_j c_j / c_i`` (labels with c=0 ignored)."""
    c = np.asarray(c, dtype=np.float64)
    present = c[c > 0]
    if present.size == 0:
        raise SpecError("label frequencies are all zero")
    keep_p = np.where(c > 0, present.min() / np.where(c > 0, c, 1.0), 1.0)
    labels = np.asarray(labels)
    return rng.random(labels.shape) < keep_p[labels]


# --- augmentation ---------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rot90: bool = False
    mirror: bool = False
    blur: bool = False
    blur_sigma: float = 1.0


def gaussian_kernel5(sigma):
    if sigma < 1e-3:
        k = np.zeros(5)
        k[2] = 1.0
        return k
    x = np.arange(-2, 3, dtype=np.float64)
    k = np.exp(-x * x / (2.0 * sigma * sigma))
    return k / k.sum()


def blur5(img, sigma):
    """Separable 5x5 Gaussian blur with reflected borders."""
    k = gaussian_kernel5(sigma)
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(2, 2), (2, 2)], mode="reflect")
    h, w = img.shape[-2:]
    tmp = sum(k[i] * p[..., i:i + h, :] for i in range(5))
    return sum(k[i] * tmp[..., :, i:i + w] for i in range(5))


def augment(raw, labels, rng, cfg: AugmentConfig):
    """Random rot90, then independent flips, then blur of ``raw`` only.

    Random draws happen only for enabled switches, in that order.
    """
    if cfg.rot90:
        k = int(rng.integers(0, 4))
        raw = np.rot90(raw, k, axes=(-2, -1))
        labels = np.rot90(labels, k)
    if cfg.mirror:
        if rng.random() < 0.5:
            raw, labels = raw[..., :, ::-1], labels[:, ::-1]
        if rng.random() < 0.5:
            raw, labels = raw[..., ::-1, :], labels[::-1, :]
    if cfg.blur:
        raw = blur5(raw, abs(rng.normal(0.0, cfg.blur_sigma)))
    return np.ascontiguousarray(raw), np.ascontiguousarray(labels)


# --- solver ------------------------------------------------------------------------------

LOSS_KINDS = ("softmax", "malis", "softmax_then_malis")


@dataclass(frozen=True)
class SolverConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 100
    loss: str = "softmax"
    switch_iter: int = 0
    mask: bool = False
    patch_prior: bool = False
    rot90: bool = False
    mirror: bool = False
    blur: bool = False
    blur_sigma: float = 1.0
    seed: int = 0
    patch_w: int | None = None
    pad_v: int | None = None

    def __post_init__(self):
        errs = []
        if not self.lr > 0:
            errs.append("lr must be > 0")
        if self.iterations < 1:
            errs.append("iterations must be >= 1")
        if self.loss not in LOSS_KINDS:
            errs.append(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.loss == "softmax_then_malis" and not 0 <= self.switch_iter <= self.iterations:
            errs.append("switch_iter must lie in [0, iterations]")
        if self.momentum < 0 or self.weight_decay < 0 or self.blur_sigma < 0:
            errs.append("momentum, weight_decay and blur_sigma must be >= 0")
        if errs:
            raise SpecError(errs)

    @property
    def augment(self):
        return AugmentConfig(self.rot90, self.mirror, self.blur, self.blur_sigma)

    def loss_at(self, it):
        if self.loss == "softmax_then_malis":
            return "softmax" if it < self.switch_iter else "malis"
        return self.loss


_BOOL = {"1": True, "true": True, "on": True, "yes": True,
         "0": False, "false": False, "off": False, "no": False}


def parse_solver(text) -> SolverConfig:
    """``key = value`` lines, ``#`` comments; unknown keys are errors."""
    types = {f.name: f.type for f in fields(SolverConfig)}
    kv, errors = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append((lineno, f"expected 'key = value', got {line!r}"))
            continue
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in types:
            errors.append((lineno, f"unknown solver key {key!r}"))
            continue
        t = types[key]
        try:
            if t == "bool":
                if val.lower() not in _BOOL:
                    raise ValueError
                kv[key] = _BOOL[val.lower()]
            elif t == "float":
                kv[key] = float(val)
            elif t.startswith("int"):
                kv[key] = None if val.lower() == "auto" else int(val)
            else:
                kv[key] = val
        except ValueError:
            errors.append((lineno, f"bad value for {key}: {val!r}"))
    if errors:
        raise SpecError(errors)
    try:
        return SolverConfig(**kv)
    except SpecError as e:
        raise SpecError([(None, m) for _, m in e.errors]) from None


def load_solver(path) -> SolverConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_solver(fh.read())


class SGD:
    """Momentum SGD: ``v <- mu*v - lr*(diff + wd*w); w <- w + v``; diffs are zeroed."""

    def __init__(self, params):
        self.v = {name: (np.zeros_like(st.weight), np.zeros_like(st.bias)) for name, st in params.items()}

    def step(self, params, lr, momentum, weight_decay):
        for name, st in params.items():
            vw, vb = self.v[name]
            vw *= momentum
            vw -= lr * (st.weight_diff + weight_decay * st.weight)
            vb *= momentum
            vb -= lr * (st.bias_diff + weight_decay * st.bias)
            st.weight += vw
            st.bias += vb
            st.zero_diffs()


def sgd_step(params, cfg: SolverConfig, opt: SGD | None = None):
    opt = opt or SGD(params)
    opt.step(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    return opt


# --- training ---------------------------------------------------------------------------

def net_context(spec: NetSpec, w_out):
    """``(input size, v)`` for an ``w_out`` output patch."""
    w_in = spec.input_size_for(w_out)
    return w_in, w_in - w_out


@dataclass
class TrainResult:
    params: dict
    losses: list = field(default_factory=list)
    kinds: list = field(default_factory=list)

    def log_lines(self):
        return [f"{i}\t{l!r}" for i, l in enumerate(self.losses)]


def _patch_geometry(spec: NetSpec, cfg: SolverConfig):
    w = cfg.patch_w or spec.output_size()
    try:
        w_in, v = net_context(spec, w)
    except SizeError as e:
        raise SpecError(f"patch_w={w}: {e}") from None
    if cfg.pad_v is not None and cfg.pad_v != v:
        raise SpecError(f"pad_v={cfg.pad_v} does not match the network context {v} for patch_w={w}")
    return w, w_in, v


def extract_patch(padded, labels, off, w, v):
    """Raw region with ``ceil(v/2)`` context on every side, and the label patch."""
    _, y, x = off
    h = -(-v // 2)
    return padded[..., y:y + w + 2 * h, x:x + w + 2 * h], labels[y:y + w, x:x + w]


def train(spec: NetSpec, cfg: SolverConfig, dataset, params=None, callback=None,
          dtype=np.float32) -> TrainResult:
    """Run ``cfg.iterations`` SGD steps on patches sampled from ``dataset``.

    ``dataset`` holds :class:`LabeledImage` items with normalised raw data.
    The same seed reproduces the loss log bit for bit.
    """
    if not dataset:
        raise SpecError("training set is empty")
    w, w_in, v = _patch_geometry(spec, cfg)
    n_cls = spec.channels()[spec.score_blob]
    for im in dataset:
        if im.labels.shape[0] < w or im.labels.shape[1] < w:
            raise SpecError(f"{im.name or 'image'} {im.labels.shape} is smaller than patch_w={w} "
                            f"(net input {w_in} = patch {w} + context {v})")
        if im.labels.max() >= n_cls:
            raise SpecError(f"{im.name or 'image'} has label {im.labels.max()} but the net has {n_cls} classes")
    if any(cfg.loss_at(i) == "malis" for i in range(cfg.iterations)) and n_cls != 2:
        raise SpecError("malis loss needs a 2-class network")
    rng = np.random.default_rng(cfg.seed)
    net = Net(spec.with_input_w(w_in), params=params, seed=cfg.seed, dtype=dtype)
    sampler = build_sampler(dataset, w, v, n_cls, cfg.seed, cfg.patch_prior)
    h = -(-v // 2)
    padded = [mirror_pad(im.raw, 2 * h) for im in dataset]
    opt = SGD(net.params)
    result = TrainResult(net.params)
    aug = cfg.augment
    for it in range(cfg.iterations):
        off = patch_prior_sample(sampler, rng)
        raw, lab = extract_patch(padded[off[0]], dataset[off[0]].labels, off, w, v)
        raw, lab = augment(raw, lab, rng, aug)
        if v % 2:
            raw = raw[..., :-1, :-1]
        kind = cfg.loss_at(it)
        blobs = net.forward(raw if raw.ndim == 3 else raw[None])
        if kind == "softmax":
            mask = mask_errors(lab, sampler.c, rng) if cfg.mask else None
            loss, g = L.softmax_loss(blobs[spec.score_blob].astype(np.float64), lab, mask)
            net.backward({spec.score_blob: g})
        else:
            prob = blobs[spec.output_blob].astype(np.float64)
            loss, g = M.malis_prob_grad(prob, lab)
            net.backward({spec.output_blob: g})
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at iteration {it}")
        opt.step(net.params, cfg.lr, cfg.momentum, cfg.weight_decay)
        result.losses.append(float(loss))
        result.kinds.append(kind)
        if callback is not None:
            callback(it, loss)
    for name, st in net.params.items():
        if not (np.isfinite(st.weight).all() and np.isfinite(st.bias).all()):
            raise NumericError(f"non-finite weights in layer {name!r}")
    return result


# --- inference ----------------------------------------------------------------------------

def tile_starts(n, w):
    """Tile origins covering ``[0, n)``; the last one is pulled back to ``n - w``."""
    if n < w:
        raise SizeError(f"image size {n} is smaller than the tile size {w}")
    starts = list(range(0, n - w + 1, w))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def process(spec: NetSpec, params, image, w=None, v=None, dtype=np.float32, threads=1):
    """Label an image tile by tile; returns ``(argmax labels, class probabilities)``.

    ``image`` is a normalised ``(h, w)`` or ``(f, h, w)`` array.  Tiles are
    ``w x w`` output patches; where tiles overlap at the image edge the later
    tile wins.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    w = w or spec.output_size()
    w_in, ctx = net_context(spec, w)
    if v is not None and v != ctx:
        raise SizeError(f"padding v={v} does not match the network context {ctx} for tile {w}")
    H, W = img.shape[1:]
    padded = mirror_pad(img, ctx)
    tiles = [(y, x) for y in tile_starts(H, w) for x in tile_starts(W, w)]
    tspec = spec.with_input_w(w_in)

    def run(chunk):
        net = Net(tspec, params=params, dtype=dtype)
        return [net.predict(padded[:, y:y + w_in, x:x + w_in]) for y, x in chunk]

    if threads > 1 and len(tiles) > 1:
        from concurrent.futures import ThreadPoolExecutor
        chunks = [tiles[i::threads] for i in range(threads)]
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, chunks))
        outs = [None] * len(tiles)
        for i, part in enumerate(parts):
            outs[i::threads] = part
    else:
        outs = run(tiles)
    n_cls = outs[0].shape[0]
    prob = np.zeros((n_cls, H, W), dtype=np.float64)
    for (y, x), p in zip(tiles, outs):
        prob[:, y:y + w, x:x + w] = p
    return prob.argmax(axis=0), prob


# --- synthetic data -----------------------------------------------------------------------------

def synthetic_cells(size, n_cells, rng, noise=12.0):
    """Random Voronoi cells separated by 1-px membranes.

    Returns ``(raw uint8, labels)`` with label 1 for cell interior and 0 for
    membrane.
    """
    seeds = rng.uniform(0, size, size=(n_cells, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    cell = d.argmin(axis=2)
    edge = np.zeros((size, size), dtype=bool)
    edge[:, :-1] |= cell[:, :-1] != cell[:, 1:]
    edge[:-1, :] |= cell[:-1, :] != cell[1:, :]
    labels = (~edge).astype(np.int64)
    raw = np.where(edge, 70.0, 180.0) + rng.normal(0.0, noise, size=(size, size))
    raw = blur5(raw, 0.7)
    return np.clip(np.rint(raw), 0, 255).astype(np.uint8), labels


def synthetic_dataset(n_images, size, n_cells, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        raw, lab = synthetic_cells(size, n_cells, rng)
        out.append(LabeledImage(normalize(raw), lab, f"synth{i:03d}"))
    return out


def merge_count(prob_fg, truth_labels, threshold=0.5):
    """Number of extra true components absorbed into a shared predicted component."""
    pred = M.connected_components(np.asarray(prob_fg) > threshold).labels
    truth = M.connected_components(truth_labels).labels
    merges = 0
    for pc in range(1, pred.max() + 1):
        hit = np.unique(truth[(pred == pc) & (truth > 0)])
        merges += max(0, hit.size - 1)
    return merges


def pixel_error(pred_labels, truth_labels):
    return float(np.mean(np.asarray(pred_labels) != np.asarray(truth_labels)))
