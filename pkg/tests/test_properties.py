"""Hypothesis suites for split, segment and graph-construction invariants."""

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from gatpos import autodiff as ad
from gatpos.graph import Dataset, generate_splits, homophily_beta, symmetrize

edge_lists = st.integers(2, 12).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=40))
)


@given(edge_lists)
def test_symmetrize_invariants(case):
    n, pairs = case
    g = symmetrize(pairs, n)
    arcs = g.edge_set()
    assert all((u, v) in arcs for v, u in arcs)
    assert all(v != u for v, u in arcs)
    assert arcs == {(v, u) for v, u in pairs if v != u} | {(u, v) for v, u in pairs if v != u}
    assert g.num_arcs == len(arcs) == int(g.degrees.sum())
    assert symmetrize(sorted(arcs), n).edge_set() == arcs


@given(st.lists(st.integers(5, 30), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_split_disjoint_and_proportional(class_sizes, seed):
    labels = np.repeat(np.arange(len(class_sizes)), class_sizes)
    n = len(labels)
    ds = Dataset(symmetrize([], n), np.zeros((n, 1)), labels, len(class_sizes))
    s = generate_splits(ds, seed)
    parts = [set(s.train_idx.tolist()), set(s.val_idx.tolist()), set(s.test_idx.tolist())]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert set.union(*parts) == set(range(n))
    for c, size in enumerate(class_sizes):
        assert (labels[s.train_idx] == c).sum() == int(np.floor(0.6 * size + 0.5))
        assert (labels[s.val_idx] == c).sum() == int(np.floor(0.2 * size + 0.5))


@given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_segment_softmax_normalized(sizes, seed, scale):
    rng = np.random.default_rng(seed)
    seg = ad.SegmentIndex.from_sizes(sizes)
    scores = ad.Tape().constant(scale * rng.standard_normal((seg.num_elements, 1)))
    alpha = ad.segment_softmax(scores, seg).data
    assert (alpha >= 0).all()
    np.testing.assert_allclose(seg.segment_sum(alpha), 1.0, atol=1e-12)
    shifted = ad.segment_softmax(ad.Tape().constant(scores.data + 50.0), seg).data
    np.testing.assert_allclose(shifted, alpha, atol=1e-12)


@given(edge_lists, st.integers(0, 2**31))
def test_homophily_in_unit_interval(case, seed):
    n, pairs = case
    g = symmetrize(pairs, n)
    if g.num_arcs == 0:
        return
    labels = np.random.default_rng(seed).integers(0, 3, n)
    beta = homophily_beta(Dataset(g, np.zeros((n, 1)), labels, 3))
    assert 0.0 <= beta <= 1.0
