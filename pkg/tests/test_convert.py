import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import tables
from pxseg import convert as C
from pxseg.errors import ConversionError, SizeError
from pxseg.netgraph import LayerSpec, NetSpec, builtin_net, format_netspec, parse_netspec

GIB = 1 << 30


def geometry(table):
    return [(r[0][0], r[3], r[4], r[5], r[6]) for r in table if r[0][0] != "data"]


def spec_geometry(spec):
    chans = spec.channels()
    names = {n for r in tables.SK for n in r[0][:1]}
    return [(l.name, chans[l.output], l.k, l.s, l.d) for l in spec.layers if l.name in names and l.kind != "data"]


# --- correct_sw / sw_to_sk --------------------------------------------------------

def test_correct_sw_gives_102():
    fixed = C.correct_sw(builtin_net("sw"))
    assert fixed.input_w == 102
    sizes = fixed.sizes()
    assert sizes == {n: w for n, w in tables.expected_sizes(tables.SW_CORRECTED).items()}


def test_correct_sw_fixpoint():
    fixed = C.correct_sw(builtin_net("sw"))
    assert C.correct_sw(fixed) == fixed
    toy = builtin_net("toy_sw")
    assert C.correct_sw(toy) == toy


def test_correct_sw_single_pool():
    spec = parse_netspec("input w=3 f=1\nlayer p pool_max k=2 s=2 in=data out=p\n")
    assert C.correct_sw(spec, out_w=5).input_w == 10


def test_sw_to_sk_matches_reference_table():
    sk = C.sw_to_sk(C.correct_sw(builtin_net("sw")), out_w=128)
    assert spec_geometry(sk) == geometry(tables.SK)
    assert sk.input_w == 229
    assert sk.sizes() == tables.expected_sizes(tables.SK)
    ip1 = sk.layer("ip1")
    assert (ip1.kind, ip1.k, ip1.d) == ("conv_sk", 10, 8)


def test_conversion_equals_bundled_sk_net():
    sk = C.sw_to_sk(C.correct_sw(builtin_net("sw")), out_w=128)
    bundled = builtin_net("sk")
    strip = lambda s: [(l.name, l.kind, l.k, l.s, l.d, l.f_out, l.inputs, l.output) for l in s.layers]
    assert strip(sk) == strip(bundled)


def test_conversion_preserves_channels():
    sw = C.correct_sw(builtin_net("sw"))
    sk = C.sw_to_sk(sw)
    assert sw.channels() == sk.channels()
    for a, b in zip(C.propagate_sizes(sw), C.propagate_sizes(sk)):
        assert (a.name, a.f_in, a.f_out) == (b.name, b.f_in, b.f_out)


def test_identity_net_converts_unchanged():
    spec = parse_netspec("input w=5 f=2\nlayer r relu in=data out=r\n")
    assert C.sw_to_sk(spec) == spec


def test_error_pool_not_dividing():
    with pytest.raises(ConversionError, match="w mod k"):
        C.sw_to_sk(builtin_net("sw"))


def test_error_non_elementwise_k():
    layers = (LayerSpec("data", "data", output="data"),
              LayerSpec("odd", "relu", k=3, inputs=("data",), output="odd"))
    with pytest.raises(ConversionError, match="not element-wise"):
        C.sw_to_sk(NetSpec(layers, 6, 1))


def test_error_missing_inner_product():
    spec = parse_netspec("input w=8 f=1\n"
                         "layer c1 conv_sk k=3 fout=2 in=data out=c1\n"
                         "layer p pool_max k=2 s=2 in=c1 out=p\n"
                         "layer c2 conv_sk k=2 fout=2 in=p out=c2\n")
    spec = C.correct_sw(spec, out_w=1)
    with pytest.raises(ConversionError, match="possibly lacks at least one inner product layer"):
        C.sw_to_sk(spec)


@pytest.mark.parametrize("name", ["u", "usk", "sk"])
def test_non_sw_nets_rejected(name):
    with pytest.raises(ConversionError, match="not an SW net"):
        C.sw_to_sk(builtin_net(name))


def test_ip_kernel_must_span_input():
    spec = parse_netspec("input w=6 f=1\nlayer ip1 ip k=3 fout=2 in=data out=ip1\n")
    with pytest.raises(ConversionError, match="does not span"):
        C.sw_to_sk(spec)


# --- sizes and estimators -----------------------------------------------------------

def test_output_size_rule():
    sk = builtin_net("sk")
    assert sk.output_size(229) == 128
    assert sk.output_size(102) == 1
    for w0 in (102, 150, 229, 300):
        assert sk.output_size(w0) == w0 - 102 + 1


def test_usk_subnet_sizes():
    sizes = builtin_net("usk").sizes()
    assert sizes["pool1"] == 344 and sizes["ip1"] == 258


def test_u_sizes_match_table():
    assert builtin_net("u").sizes() == tables.expected_sizes(tables.U)


def expected_params(table):
    return {r[0][0]: r[2] * r[3] * r[4] ** 2 for r in tables.param_rows(table)}


@pytest.mark.parametrize("name,table,total", [
    ("sk", tables.SK, 20_567_952), ("usk", tables.USK, 5_510_976), ("u", tables.U, 28_936_000)])
def test_param_counts(name, table, total):
    pc = C.count_params(builtin_net(name))
    assert pc.weights == expected_params(table)
    assert pc.total == total


def test_param_anchors():
    assert C.count_params(builtin_net("sk")).weights["ip1"] == 19_660_800
    assert C.count_params(builtin_net("usk")).weights["ip1"] == 4_194_304
    one = parse_netspec("input w=3 f=1\nlayer c conv_sk k=1 fout=1 in=data out=c\n")
    pc = C.count_params(one)
    assert pc.total == 1 and pc.total_biases == 1
    assert 20.5e6 <= C.count_params(builtin_net("sk")).total < 20.6e6


def test_flops():
    f = C.flop_estimate(builtin_net("sk"))
    assert f["ip1"] == 644_228_317_184
    assert f["conv1"] == 699_388_656
    assert round(f["ip1"] / 1e9, 2) == 644.23 and round(f["conv1"] / 1e9, 2) == 0.70
    one = parse_netspec("input w=7 f=1\nlayer c conv_sk k=1 fout=3 in=data out=c\n")
    assert C.flop_estimate(one) == {"c": 3 * 49}


@given(st.integers(102, 400))
def test_estimators_scale_with_input(w0):
    sk = builtin_net("sk")
    assert C.count_params(sk.with_input_w(w0)).weights == C.count_params(sk).weights
    base = C.flop_estimate(sk, 229)
    f = C.flop_estimate(sk, w0)
    wo = w0 - 101
    for name in ("ip1", "ip2", "ip3"):
        assert f[name] * 128 ** 2 == base[name] * wo ** 2


def test_buffer_and_memory_sk():
    m = C.buffer_and_memory(builtin_net("sk"))
    assert m.buffer_layer == "ip1"
    assert m.buffer_elems == 314_572_800 and m.buffer_bytes == 1_258_291_200
    assert m.processing_bytes > m.buffer_bytes and m.training_bytes > m.processing_bytes


def test_buffer_lower_bound_formula():
    spec = builtin_net("toy_sk")
    rows = {r.name: r for r in C.propagate_sizes(spec)}
    m1 = C.buffer_and_memory(spec, n=3, profile=C.DeviceProfile(queues=1))
    m2 = C.buffer_and_memory(spec, n=3, profile=C.DeviceProfile(queues=2))
    assert m2.total_lower_bound_elems - m1.total_lower_bound_elems == m1.buffer_elems
    # brute-force max over consecutive (input, output) blob pairs
    prod = spec.producers()
    pair = max(sum(rows[prod[b].name].f_out * rows[prod[b].name].w_out ** 2 for b in l.inputs)
               + rows[l.name].f_out * rows[l.name].w_out ** 2 for l in spec.layers[1:])
    assert m1.total_lower_bound_elems == m1.buffer_elems + 3 * pair


def test_no_conv_layers_no_buffer():
    m = C.buffer_and_memory(parse_netspec("input w=4 f=1\nlayer r relu in=data out=r\n"))
    assert m.buffer_elems == 0 and m.buffer_layer is None


def test_max_output_size():
    assert C.max_output_size_closed_form(192, 10, 4 * GIB) == 236
    assert math.isclose(math.sqrt(4 * GIB / 4 / 19200), 236.5, abs_tol=0.1)
    assert C.max_output_size(builtin_net("sk"), 4 * GIB) == 236


def test_device_profile_validation():
    with pytest.raises(ValueError):
        C.DeviceProfile(peak_gflops=0)
    with pytest.raises(ValueError):
        C.DeviceProfile(queues=0)
    with pytest.raises(ValueError):
        C.DeviceProfile(mem_bytes=-1)


def test_cost_report_totals():
    rep = C.cost_report(builtin_net("sk"), profile=C.DeviceProfile(peak_gflops=2.0))
    assert rep.total_flop == sum(C.flop_estimate(builtin_net("sk")).values())
    assert rep.total_params == C.count_params(builtin_net("sk")).total
    assert rep.total_time is None
    rep.set_times({"ip1": 2.0, "conv1": 0.5})
    ip1 = next(r for r in rep.rows if r.name == "ip1")
    assert ip1.efficiency == pytest.approx(644_228_317_184 / (2.0 * 2e9))
    assert rep.total_time == 2.5


# --- SW / SK equivalence -------------------------------------------------------------

TOY = """input w=1 f=2
layer conv1 conv_sk k=3 fout=3 in=data out=conv1
layer relu1 relu in=conv1 out=relu1
layer pool1 pool_max k=2 s=2 in=relu1 out=pool1
layer conv2 conv_sk k=2 fout=4 in=pool1 out=conv2
layer relu2 relu in=conv2 out=relu2
layer ip1 ip k=2 fout=2 in=relu2 out=ip1
"""


def toy_pair():
    sw = C.correct_sw(parse_netspec(TOY), out_w=1)
    return sw, C.sw_to_sk(sw, out_w=5)


def test_toy_equivalence():
    sw, sk = toy_pair()
    assert sw.input_w == 8
    rep = C.sk_sw_equivalence_check(sw, sk, sw.input_w + 4, trials=2, seed=3)
    assert rep.out_size == 5 and rep.pixels == 50
    assert rep.passed(1e-5)


def test_single_pixel_equivalence_f64():
    sw, sk = toy_pair()
    rep = C.sk_sw_equivalence_check(sw, sk, sw.input_w, trials=5, dtype=np.float64)
    assert rep.out_size == 1 and rep.max_abs_dev <= 1e-12


def test_tampered_d_is_caught():
    sw, sk = toy_pair()
    text = format_netspec(sk).replace("layer pool1 pool_max k=2 s=1 d=1", "layer pool1 pool_max k=2 s=1 d=2")
    bad = parse_netspec(text)
    assert bad != sk
    w0 = bad.input_size_for(5)
    rep = C.sk_sw_equivalence_check(sw, bad, w0, seed=1)
    assert rep.max_abs_dev > 1e-3


def test_unrelated_nets_rejected():
    sw, _ = toy_pair()
    with pytest.raises(ConversionError, match="not conversion-related"):
        C.sk_sw_equivalence_check(sw, builtin_net("toy_sk"))
    _, sk = toy_pair()
    with pytest.raises(SizeError):
        C.sk_sw_equivalence_check(sw, sk, sw.input_w - 1)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0, 1, 5]))
def test_random_sw_nets_convert_exactly(seed, e):
    rng = np.random.default_rng(seed)
    sw = C.random_sw_net(rng)
    sk = C.sw_to_sk(sw)
    assert sk.output_size(sw.input_w + e) == e + 1
    rep = C.sk_sw_equivalence_check(sw, sk, sw.input_w + e, seed=seed, dtype=np.float64)
    assert rep.max_abs_dev <= 1e-10
    rep32 = C.sk_sw_equivalence_check(sw, sk, sw.input_w + e, seed=seed)
    assert rep32.max_abs_dev < 1e-5
