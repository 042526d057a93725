"""``pxseg`` command line.

Exit codes: 0 success, 1 usage, 2 config/spec error, 3 I/O error, 4 numeric failure.
Reports go to stdout, errors to stderr.  ``--tsv`` switches reports to
``layer<TAB>metric<TAB>value`` lines.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import convert as C
from . import imageio, pipeline, weights
from .errors import ConversionError, NumericError, SizeError, SpecError
from .netgraph import BUILTIN_NETS, builtin_net, format_netspec, load_netspec

EXIT_OK, EXIT_USAGE, EXIT_SPEC, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- output helpers --------------------------------------------------------------

def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def print_table(headers, rows, out=None):
    out = out or sys.stdout
    cells = [[_fmt(v) for v in r] for r in rows]
    widths = [max([len(h)] + [len(r[i]) for r in cells]) for i, h in enumerate(headers)]
    line = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    print(line(headers), file=out)
    print("  ".join("-" * w for w in widths), file=out)
    for r in cells:
        print(line(r), file=out)


def print_tsv(headers, rows, out=None):
    """One ``layer<TAB>metric<TAB>value`` line per cell; the first column is the layer."""
    out = out or sys.stdout
    for r in rows:
        for h, v in zip(headers[1:], r[1:]):
            print(f"{r[0]}\t{h}\t{_fmt(v)}", file=out)


def emit(args, headers, rows):
    (print_tsv if args.tsv else print_table)(headers, rows)


def load_net(ref):
    """A config path, or the name of a bundled net."""
    if os.path.exists(ref):
        return load_netspec(ref)
    if ref in BUILTIN_NETS:
        return builtin_net(ref)
    raise FileNotFoundError(f"network config {ref!r} not found (bundled nets: {', '.join(BUILTIN_NETS)})")


# --- analysis commands ------------------------------------------------------------

def _size_rows(spec, w0=None):
    return [(r.name, r.kind, r.w_in, r.w_out, r.k, r.s, r.d, r.f_in, r.f_out)
            for r in C.propagate_sizes(spec, w0)]


SIZE_HEADERS = ("layer", "kind", "w_in", "w_out", "k", "s", "d", "f_in", "f_out")


def cmd_convert(args):
    spec = load_net(args.net)
    if args.fix_sizes:
        spec = C.correct_sw(spec)
    sk = C.sw_to_sk(spec, out_w=args.out_size)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(format_netspec(sk))
    emit(args, SIZE_HEADERS, _size_rows(sk))
    return EXIT_OK


def cmd_sizes(args):
    spec = load_net(args.net)
    emit(args, SIZE_HEADERS, _size_rows(spec, args.w0))
    return EXIT_OK


def cmd_params(args):
    spec = load_net(args.net)
    pc = C.count_params(spec)
    rows = [(n, pc.weights[n], pc.biases[n]) for n in pc.weights]
    rows.append(("total", pc.total, pc.total_biases))
    emit(args, ("layer", "weights", "biases"), rows)
    return EXIT_OK


def cmd_flops(args):
    spec = load_net(args.net)
    rows = [(r.name, r.out_size, r.flop, r.flop / 1e9) for r in C.cost_report(spec, args.w0).rows if r.flop]
    total = sum(r[2] for r in rows)
    rows.append(("total", None, total, total / 1e9))
    emit(args, ("layer", "w_out", "flop", "gflop"), rows)
    return EXIT_OK


def cmd_mem(args):
    spec = load_net(args.net)
    prof = C.DeviceProfile(mem_bytes=int(args.mem_gib * C.GIB), queues=args.queues)
    m = C.buffer_and_memory(spec, args.w0, prof, args.n)
    rows = [(n, e, e * m.bytes_per_elem) for n, e in m.per_layer_buffer.items()]
    emit(args, ("layer", "buffer_elems", "buffer_bytes"), rows)
    summary = [
        ("net", "m_buffer_elems", m.buffer_elems),
        ("net", "m_buffer_bytes", m.buffer_bytes),
        ("net", "m_buffer_layer", m.buffer_layer),
        ("net", "m_total_lower_bound_bytes", m.total_lower_bound_bytes),
        ("net", "peak_processing_bytes", m.processing_bytes),
        ("net", "peak_training_bytes", m.training_bytes),
        ("net", "max_output_size", C.max_output_size(spec, prof.mem_bytes)),
    ]
    print()
    for layer, metric, value in summary:
        print(f"{layer}\t{metric}\t{_fmt(value)}" if args.tsv else f"{metric:28s} {_fmt(value)}")
    return EXIT_OK


# --- training and inference ----------------------------------------------------------

def _parse_label_map(text):
    if not text:
        return None
    mapping = {}
    for part in text.split(","):
        try:
            src, dst = part.split(":")
            mapping[int(src)] = int(dst)
        except ValueError:
            raise SpecError(f"bad label map entry {part!r}, expected src:dst") from None
    return mapping


def load_dataset(raw_dir, label_dir, mapping=None):
    raws, labs = imageio.list_images(raw_dir), imageio.list_images(label_dir)
    if not raws:
        raise FileNotFoundError(f"no images in {raw_dir}")
    if len(raws) != len(labs):
        raise SpecError(f"{len(raws)} raw images but {len(labs)} label images")
    out = []
    for rp, lp in zip(raws, labs):
        lab = imageio.read_image(lp).astype(np.int64)
        if mapping:
            lab = pipeline.consolidate_labels(lab, mapping)
        out.append(pipeline.LabeledImage(pipeline.normalize(imageio.read_image(rp)), lab,
                                         os.path.basename(rp)))
    return out


def cmd_train(args):
    spec = load_net(args.net)
    cfg = pipeline.load_solver(args.solver)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    data = load_dataset(args.raw_dir, args.label_dir, _parse_label_map(args.label_map))
    init = weights.load(args.init) if args.init else None
    res = pipeline.train(spec, cfg, data, params=init)
    weights.save(args.out, res.params)
    log = args.log or args.out + ".log"
    with open(log, "a", encoding="utf-8") as fh:
        for line in res.log_lines():
            fh.write(line + "\n")
    print(f"trained {cfg.iterations} iterations; first loss {res.losses[0]:.6g}, "
          f"last loss {res.losses[-1]:.6g}; weights -> {args.out}, log -> {log}")
    return EXIT_OK


def cmd_process(args):
    spec = load_net(args.net)
    params = weights.load(args.weights)
    weights.check_against(params, spec)
    raw = imageio.read_image(args.input)
    labels, prob = pipeline.process(spec, params, pipeline.normalize(raw), w=args.tile,
                                    threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    imageio.write_pgm(os.path.join(args.out, f"{stem}_labels.pgm"), labels.astype(np.uint8))
    if args.prob:
        for c in range(prob.shape[0]):
            imageio.write_pgm(os.path.join(args.out, f"{stem}_prob{c}.pgm"),
                              np.rint(prob[c] * 255).astype(np.uint8))
    print(f"{args.input}: {raw.shape[1]}x{raw.shape[0]} -> {args.out}")
    return EXIT_OK


def cmd_bench(args):
    from . import bench
    spec = load_net(args.net)
    prof = C.DeviceProfile(peak_gflops=args.peak_gflops)
    rep = bench.bench(spec, args.w0, args.trials, args.seed, prof, backward=args.backward)
    headers = ["layer", "kind", "w_out", "flop", "buffer_bytes", "params", "fwd_s", "efficiency"]
    if args.backward:
        headers.append("bwd_s")
    rows = []
    for r in rep.rows:
        row = [r.name, r.kind, r.out_size, r.flop, r.buffer_elems * 4, r.params, r.fwd_s, r.efficiency]
        if args.backward:
            row.append(r.bwd_s)
        rows.append(row)
    emit(args, headers, rows)
    summary = [("total_flop", rep.total_flop), ("m_buffer_bytes", rep.buffer_bytes),
               ("peak_processing_bytes", rep.processing_bytes), ("peak_training_bytes", rep.training_bytes),
               ("output_pixels", rep.out_size ** 2), ("fwd_total_s", rep.fwd_total_s),
               ("throughput_px_per_s", rep.throughput)]
    if args.backward:
        summary.append(("bwd_total_s", rep.bwd_total_s))
    if args.sw_net:
        sw = load_net(args.sw_net)
        sw_t = bench.sw_emulation(sw, rep.out_size, args.seed, max_pixels=args.sw_pixels)
        summary += [("sw_emulated_s", sw_t), ("sw_throughput_px_per_s", rep.out_size ** 2 / sw_t),
                    ("speedup", sw_t / rep.fwd_total_s)]
    print()
    for metric, value in summary:
        print(f"net\t{metric}\t{_fmt(value)}" if args.tsv else f"{metric:24s} {_fmt(value)}")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest
    ok = run_selftest(seed=args.seed, quick=args.quick)
    return EXIT_OK if ok else EXIT_NUMERIC


# --- parser -------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="pxseg", description="Strided-kernel pixel classification toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    def net_arg(sp, w0=True):
        sp.add_argument("--net", required=True, help="network config path or bundled net name")
        if w0:
            sp.add_argument("--w0", type=int, default=None, help="input size (default: the config's)")
        sp.add_argument("--tsv", action="store_true", help="print layer<TAB>metric<TAB>value lines")

    sp = add("convert", cmd_convert, "Convert a sliding-window net into a strided-kernel net.")
    net_arg(sp, w0=False)
    sp.add_argument("--out", required=True, help="where to write the converted config")
    sp.add_argument("--fix-sizes", action="store_true", help="back-derive a pool-consistent input size first")
    sp.add_argument("--out-size", type=int, default=1, help="output patch size of the converted net")

    sp = add("sizes", cmd_sizes, "Print per-layer feature map sizes.")
    net_arg(sp)
    sp = add("params", cmd_params, "Print per-layer free parameter counts.")
    net_arg(sp, w0=False)
    sp = add("flops", cmd_flops, "Print per-layer FLOP estimates.")
    net_arg(sp)
    sp = add("mem", cmd_mem, "Print convolution buffer and memory estimates.")
    net_arg(sp)
    sp.add_argument("--n", type=int, default=1, help="minibatch size for the lower bound")
    sp.add_argument("--queues", type=int, default=1, help="parallel queues q")
    sp.add_argument("--mem-gib", type=float, default=4.0, help="buffer cap for the max output size")

    sp = add("train", cmd_train, "Train a network on a raw/label image folder pair.")
    sp.add_argument("--net", required=True, help="network config path or bundled net name")
    sp.add_argument("--solver", required=True, help="solver config (key = value lines)")
    sp.add_argument("--raw-dir", required=True, help="folder of raw images (matched alphabetically)")
    sp.add_argument("--label-dir", required=True, help="folder of label images")
    sp.add_argument("--out", required=True, help="weights file to write")
    sp.add_argument("--log", help="loss log to append to (default: <out>.log)")
    sp.add_argument("--init", help="weights file to start from")
    sp.add_argument("--label-map", help="label consolidation, e.g. 0:0,6:1,8:1")
    sp.add_argument("--seed", type=int, default=None, help="override the solver seed")

    sp = add("process", cmd_process, "Label an image with a trained network.")
    sp.add_argument("--net", required=True, help="network config path or bundled net name")
    sp.add_argument("--weights", required=True, help="weights file")
    sp.add_argument("--in", dest="input", required=True, help="input PGM or PNG image")
    sp.add_argument("--out", required=True, help="output folder")
    sp.add_argument("--prob", action="store_true", help="also write per-class probability images")
    sp.add_argument("--tile", type=int, default=None, help="output tile size (default: the config's)")
    sp.add_argument("--threads", type=int, default=1, help="tiles processed in parallel")

    sp = add("bench", cmd_bench, "Time every layer on random data.")
    net_arg(sp)
    sp.add_argument("--trials", type=int, default=3, help="timed runs; the median is reported")
    sp.add_argument("--peak-gflops", type=float, default=1.0, help="device peak for the efficiency column")
    sp.add_argument("--backward", action="store_true", help="also time the backward pass")
    sp.add_argument("--sw-net", help="SW net to emulate per pixel over the same output area")
    sp.add_argument("--sw-pixels", type=int, default=None, help="time only this many SW forwards and extrapolate")
    sp.add_argument("--seed", type=int, default=0, help="random data seed")

    sp = add("selftest", cmd_selftest, "Run the bundled invariant checks.")
    sp.add_argument("--quick", action="store_true", help="fewer random instances")
    sp.add_argument("--seed", type=int, default=0, help="random instance seed")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, ConversionError, SizeError) as e:
        print(f"pxseg {args.command}: error: {e}", file=sys.stderr)
        return EXIT_SPEC
    except NumericError as e:
        print(f"pxseg {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"pxseg {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
