import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from pxseg import layers as L
from pxseg import malis as M
from pxseg.oracles import malis_bruteforce, numeric_grad, rel_error


def binary_images(max_side=6):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side), st.integers(0, 2 ** 32 - 1)).map(
        lambda t: np.random.default_rng(t[2]).random((t[0], t[1])) > 0.45)


def run(pred_img, lab):
    comp = M.connected_components(lab)
    return M.malis_gradient(M.affinity_forward(pred_img), M.affinity_forward(lab.astype(float)), comp), comp


# --- affinity layer -----------------------------------------------------------------

def test_affinity_constant():
    g = M.affinity_forward(np.full((3, 4), 0.7))
    assert np.all(g.a_x[:, :-1] == 0.7) and np.all(g.a_y[:-1] == 0.7)
    assert not g.m_x.any() and not g.m_y.any()


def test_affinity_pair():
    g = M.affinity_forward(np.array([[0.3, 0.8]]))
    assert g.a_x[0, 0] == 0.3 and g.m_x[0, 0] == 0
    g = M.affinity_forward(np.array([[0.8, 0.3]]))
    assert g.a_x[0, 0] == 0.3 and g.m_x[0, 0] == 1
    # a single row has no vertical edges; unused edges hold 1
    assert np.all(g.a_y == 1) and g.a_x[0, 1] == 1


def test_affinity_of_labels(rng):
    lab = (rng.random((6, 7)) > 0.5).astype(float)
    g = M.affinity_forward(lab)
    for y in range(6):
        for x in range(6):
            assert g.a_x[y, x] == (1.0 if lab[y, x] and lab[y, x + 1] else 0.0)
    for y in range(5):
        for x in range(7):
            assert g.a_y[y, x] == (1.0 if lab[y, x] and lab[y + 1, x] else 0.0)


def test_affinity_backward_examples(rng):
    g = M.affinity_forward(np.array([[0.3, 0.8]]))
    dp, dm = M.affinity_backward(np.array([[0.25, 0.0]]), np.zeros((1, 2)), g)
    assert np.array_equal(dp, [[0.25, 0]]) and np.array_equal(dm, [[-0.25, 0]])
    g = M.affinity_forward(rng.random((4, 5)))
    dp, dm = M.affinity_backward(np.zeros((4, 5)), np.zeros((4, 5)), g)
    assert not dp.any() and not dm.any()


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_affinity_backward_is_chain_rule(h, w, seed):
    r = np.random.default_rng(seed)
    img = r.random((h, w))
    dx, dy = r.normal(size=(h, w)), r.normal(size=(h, w))
    dx[:, -1] = 0
    dy[-1] = 0
    g = M.affinity_forward(img)
    dp, dm = M.affinity_backward(dx, dy, g)
    assert np.array_equal(dp, -dm)
    f = lambda: float((M.affinity_forward(img).a_x * dx).sum() + (M.affinity_forward(img).a_y * dy).sum())
    assert rel_error(dp, numeric_grad(f, img, 1e-7)) < 1e-6


# --- connected components -----------------------------------------------------------

def test_components_examples():
    assert M.connected_components(np.zeros((3, 3))).count == 0
    two = np.array([[1, 1, 0, 1], [1, 1, 0, 1]])
    cm = M.connected_components(two)
    assert cm.count == 2 and np.array_equal(cm.labels, [[1, 1, 0, 2], [1, 1, 0, 2]])
    diag = np.array([[1, 0], [0, 1]])
    assert np.array_equal(M.connected_components(diag).labels, [[1, 0], [0, 2]])


def test_components_raster_order():
    img = np.array([[0, 0, 1], [1, 0, 1], [1, 1, 1]])
    assert M.connected_components(img).count == 1
    img = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]])
    assert np.array_equal(M.connected_components(img).labels, [[0, 1, 0], [2, 0, 0], [0, 0, 3]])


@given(binary_images(12))
def test_components_match_scipy(fg):
    cm = M.connected_components(fg)
    ref, n = ndimage.label(fg)
    assert cm.count == n
    # same partition (scipy also numbers in raster order of the first pixel)
    assert np.array_equal(cm.labels, ref)


# --- malis gradient -------------------------------------------------------------------

def test_perfect_prediction_zero_gradient(rng):
    lab = rng.random((6, 6)) > 0.4
    res, _ = run(lab.astype(float), lab)
    assert not res.d_x.any() and not res.d_y.any() and res.loss == 0.0


def test_single_pair_closed_form():
    a = 0.3
    res, _ = run(np.array([[a, 1.0]]), np.array([[1, 1]]))
    assert res.total_pos == 1 and res.total_neg == 0
    assert res.d_x[0, 0] == pytest.approx(-2 * (1 - a))
    assert res.loss == pytest.approx((1 - a) ** 2)


def test_cross_pair_bottleneck():
    lab = np.array([[1, 0, 1]])
    pred = np.array([[0.9, 0.6, 0.8]])  # edges: min(0.9, 0.6)=0.6, min(0.6, 0.8)=0.6
    g = M.affinity_forward(pred)
    truth = M.affinity_forward(lab.astype(float))
    comp = M.connected_components(lab)
    res = M.malis_gradient(g, truth, comp)
    # A- = max(pred, truth) = pred here; the tie is processed lower id first,
    # so the later edge closes both pairs that reach pixel 2
    assert res.neg_pairs_x[0].tolist()[:2] == [1, 2]
    g.a_x[0, 0], g.a_x[0, 1] = 0.7, 0.4
    res = M.malis_gradient(g, truth, comp)
    assert res.neg_pairs_x[0, 1] == 2 and res.neg_pairs_x[0, 0] == 1
    # the 1-3 pair goes through the weaker edge only
    assert res.d_x[0, 1] == pytest.approx(2 * 2 * 0.4 / 3)


@settings(max_examples=60)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 2 ** 32 - 1))
def test_matches_bruteforce(h, w, seed):
    r = np.random.default_rng(seed)
    p = r.random((h, w))
    lab = r.random((h, w)) > 0.45
    res, comp = run(p, lab)
    pred, truth = M.affinity_forward(p), M.affinity_forward(lab.astype(float))
    pos, neg, grad, loss = malis_bruteforce(pred.a_x, pred.a_y, truth.a_x, truth.a_y, comp.labels)
    ids, _, _ = M.edge_list((h, w))
    assert M.edge_values(res.pos_pairs_x, res.pos_pairs_y, ids).tolist() == [pos[e] for e in ids]
    assert M.edge_values(res.neg_pairs_x, res.neg_pairs_y, ids).tolist() == [neg[e] for e in ids]
    got = M.edge_values(res.d_x, res.d_y, ids)
    assert np.abs(got - [grad[e] for e in ids]).max() <= 1e-12
    assert res.loss == pytest.approx(loss, abs=1e-12)


@given(binary_images(7), st.integers(0, 2 ** 32 - 1))
def test_pair_accounting(lab, seed):
    p = np.random.default_rng(seed).random(lab.shape)
    res, comp = run(p, lab)
    sizes = np.bincount(comp.labels.ravel(), minlength=comp.count + 1)
    n = lab.size
    same = int(sum(s * (s - 1) // 2 for s in sizes[1:]))
    bg = int(sizes[0] * (sizes[0] - 1) // 2)
    assert res.total_pos == same
    assert res.total_neg == n * (n - 1) // 2 - same - bg


@given(binary_images(6), st.integers(0, 2 ** 32 - 1))
def test_constraint_maps(lab, seed):
    p = np.random.default_rng(seed).random(lab.shape)
    pred, truth = M.affinity_forward(p), M.affinity_forward(lab.astype(float))
    a_pos = np.minimum(pred.a_x, truth.a_x)
    a_neg = np.maximum(pred.a_x, truth.a_x)
    assert np.all(a_pos <= pred.a_x) and np.all(pred.a_x <= a_neg)
    assert np.all(a_pos[truth.a_x == 0] == 0) and np.all(a_neg[truth.a_x == 1] == 1)
    res, _ = run(p, lab)
    # edges forced to 1 in A- carry no negative flow gradient; edges at 0 in A+ stay fixed too
    full = truth.a_x[:, :-1] == 1
    assert np.all(res.d_x[:, :-1][full] <= 0)


@given(binary_images(6), st.integers(0, 2 ** 32 - 1), st.randoms())
def test_relabel_invariance(lab, seed, rnd):
    p = np.random.default_rng(seed).random(lab.shape)
    comp = M.connected_components(lab)
    perm = list(range(1, comp.count + 1))
    rnd.shuffle(perm)
    mapping = np.array([0] + perm)
    relabelled = M.ComponentMap(mapping[comp.labels], comp.count)
    pred, truth = M.affinity_forward(p), M.affinity_forward(lab.astype(float))
    a = M.malis_gradient(pred, truth, comp)
    b = M.malis_gradient(pred, truth, relabelled)
    assert np.array_equal(a.d_x, b.d_x) and np.array_equal(a.d_y, b.d_y)


def test_empty_foreground():
    res, _ = run(np.random.default_rng(0).random((4, 4)), np.zeros((4, 4), bool))
    assert res.total_pos == 0 and res.total_neg == 0
    assert not res.d_x.any()


def test_end_to_end_fd_through_softmax(rng):
    lab = np.array([[1, 1, 0, 1], [1, 0, 0, 1], [0, 0, 1, 1], [1, 0, 1, 1]])
    s = rng.normal(size=(2, 4, 4))
    prob = L.softmax(s)
    loss, gp = M.malis_prob_grad(prob, lab)
    assert loss == pytest.approx(M.malis_total_loss(prob, lab), rel=1e-12)
    analytic = L.softmax_backward(prob, gp)
    numeric = numeric_grad(lambda: M.malis_total_loss(L.softmax(s), lab), s, 1e-6)
    assert rel_error(analytic, numeric) < 1e-6


def test_label_shape_mismatch():
    from pxseg.errors import SizeError
    with pytest.raises(SizeError):
        M.malis_loss(np.zeros((3, 3)), np.zeros((3, 4)))
