import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path
from hypothesis import given
from hypothesis import strategies as st

from gatpos.autodiff import Tape
from gatpos.exceptions import ConfigError, ShapeError
from gatpos.graph import Dataset, symmetrize
from gatpos.layers import (
    AttentionHeadParams,
    GatLayerConfig,
    ModelHyperparams,
    attention_scores,
    build_model,
    gat_layer_forward,
    gcn_coefficients,
    gcn_layer_forward,
)
from gatpos.verify import adjacency, dense_gat_layer_oracle, oracle_layer_errors, random_dataset, random_graph


def layer(h, p, W, a, cfg, graph, U=None, res=None):
    tape = Tape()
    params = {"W": tape.constant(W), "a": tape.constant(a)}
    if U is not None:
        params["U"] = tape.constant(U)
    if res is not None:
        params["res"] = tape.constant(res)
    pv = None if p is None else tape.constant(p)
    return gat_layer_forward(tape.constant(h), pv, params, cfg, graph).data


def test_attention_hand_example():
    # two nodes, h = [1, 2], W = 1, a = [1, 1]: node 0 scores e00 = 2, e01 = 3
    g = symmetrize([(0, 1)], 2)
    cfg = GatLayerConfig(1, 1, 1, "output", positional=False)
    out = layer(np.array([[1.0], [2.0]]), None, np.eye(1), np.ones((2, 1)), cfg, g)
    e = np.e
    assert out[0, 0] == pytest.approx((1 + 2 * e) / (1 + e))
    # node 1: e10 = lrelu(2 + 1) = 3, e11 = 4
    assert out[1, 0] == pytest.approx((e ** 3 * 1 + e ** 4 * 2) / (e ** 3 + e ** 4))


def test_negative_scores_use_leaky_slope():
    g = symmetrize([(0, 1)], 2)
    tape = Tape()
    h = tape.constant(np.array([[-1.0], [-2.0]]))
    coef, _ = attention_scores(h, None, AttentionHeadParams(np.eye(1), np.ones((2, 1))), g)
    # node 0: e00 = 0.2 * -2, e01 = 0.2 * -3
    s = np.array([-0.4, -0.6])
    np.testing.assert_allclose(coef.data[:2, 0], np.exp(s) / np.exp(s).sum())


@pytest.mark.parametrize("seed", range(50))
def test_layers_match_dense_oracles(seed):
    errs = oracle_layer_errors(np.random.default_rng(seed))
    assert max(errs.values()) < 1e-8, errs


def test_gcn_coefficients_path():
    g = symmetrize([(0, 1), (1, 2)], 3)
    coef = gcn_coefficients(g)[:, 0]
    # segments: 0:{0,1}, 1:{0,1,2}, 2:{1,2}; d+1 = [2, 3, 2]
    np.testing.assert_allclose(coef, [1 / 2, 1 / np.sqrt(6), 1 / np.sqrt(6), 1 / 3, 1 / np.sqrt(6),
                                      1 / np.sqrt(6), 1 / 2])


def test_gcn_relu_activation():
    g = symmetrize([(0, 1)], 2)
    tape = Tape()
    out = gcn_layer_forward(tape.constant(np.array([[1.0], [-3.0]])), tape.constant(np.eye(1)), g).data
    np.testing.assert_allclose(out, [[0.0], [0.0]])
    with pytest.raises(ConfigError):
        gcn_layer_forward(tape.constant(np.ones((2, 1))), tape.constant(np.eye(1)), g, activation="tanh")


def test_zero_positional_projection_reduces_to_plain_gat():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 8)
    n = g.num_nodes
    h, p = rng.standard_normal((n, 3)), rng.standard_normal((n, 4))
    W, a = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    with_pos = layer(h, p, W, a, GatLayerConfig(3, 2, 2, "hidden", True), g, U=np.zeros((4, 4)))
    plain = layer(h, None, W, a, GatLayerConfig(3, 2, 2, "hidden", False), g)
    np.testing.assert_allclose(with_pos, plain, atol=1e-14)


def test_positions_change_attention_not_values():
    # with uniform features every head aggregates identical rows, whatever the attention
    rng = np.random.default_rng(0)
    g = random_graph(rng, 8)
    n = g.num_nodes
    h = np.ones((n, 3))
    W, a, U = rng.standard_normal((3, 2)), rng.standard_normal((4, 1)), rng.standard_normal((4, 2))
    cfg = GatLayerConfig(3, 2, 1, "output", True)
    out1 = layer(h, rng.standard_normal((n, 4)), W, a, cfg, g, U=U)
    out2 = layer(h, rng.standard_normal((n, 4)), W, a, cfg, g, U=U)
    np.testing.assert_allclose(out1, out2, atol=1e-12)
    np.testing.assert_allclose(out1, np.tile(h[0] @ W, (n, 1)), atol=1e-12)


def test_output_mode_averages_heads():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 7)
    n = g.num_nodes
    h, p = rng.standard_normal((n, 3)), rng.standard_normal((n, 4))
    W, a, U = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((4, 4))
    both = layer(h, p, W, a, GatLayerConfig(3, 2, 2, "output", True), g, U=U)
    single = [layer(h, p, W[:, 2 * k:2 * k + 2], a[:, k:k + 1], GatLayerConfig(3, 2, 1, "output", True), g,
                    U=U[:, 2 * k:2 * k + 2]) for k in range(2)]
    np.testing.assert_allclose(both, (single[0] + single[1]) / 2, atol=1e-14)


def test_residual_identity_and_projection():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 6)
    n = g.num_nodes
    h = rng.standard_normal((n, 4))
    W, a = rng.standard_normal((4, 4)), rng.standard_normal((4, 2))
    plain = layer(h, None, W, a, GatLayerConfig(4, 2, 2, "hidden", False, residual=False), g)
    same = layer(h, None, W, a, GatLayerConfig(4, 2, 2, "hidden", False, residual=True), g)
    np.testing.assert_allclose(same, plain + h, atol=1e-14)
    W3 = rng.standard_normal((4, 6))
    a3 = rng.standard_normal((4, 3))
    res = rng.standard_normal((4, 6))
    plain3 = layer(h, None, W3, a3, GatLayerConfig(4, 2, 3, "hidden", False, residual=False), g)
    proj = layer(h, None, W3, a3, GatLayerConfig(4, 2, 3, "hidden", False, residual=True), g, res=res)
    np.testing.assert_allclose(proj, plain3 + h @ res, atol=1e-14)


def test_layer_shape_checks():
    g = symmetrize([(0, 1)], 2)
    with pytest.raises(ShapeError):
        layer(np.ones((2, 3)), None, np.ones((2, 2)), np.ones((4, 1)), GatLayerConfig(3, 2, 1, "hidden", False), g)
    with pytest.raises(ShapeError):
        layer(np.ones((2, 3)), None, np.ones((3, 2)), np.ones((4, 1)), GatLayerConfig(3, 2, 1, "hidden", True), g)


def forward_logits(model, ds, params=None, features=None, graph=None):
    tape = Tape()
    params = model.params if params is None else params
    leaves = {k: tape.constant(v) for k, v in params.items()}
    x = ds.features if features is None else features
    return model.forward(leaves, tape.constant(x), graph or ds.graph).logits.data


SMALL = ModelHyperparams(hidden_units=2, hidden_heads=2, positional_dim=4, dropout=0.0)


@pytest.mark.parametrize("kind", ["gcn", "gat", "gat-pos", "gat-pos-transformer"])
@given(seed=st.integers(0, 2**31))
def test_permutation_equivariance(kind, seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 8)
    model = build_model(kind, ds, SMALL, rng)
    perm = rng.permutation(ds.num_nodes)
    inv = np.argsort(perm)
    params = dict(model.params)
    if "pos.p0" in params:
        params["pos.p0"] = params["pos.p0"][inv]
    out = forward_logits(model, ds, params, ds.features[inv], ds.graph.permute(perm))
    np.testing.assert_allclose(out, forward_logits(model, ds)[inv], atol=1e-10)


def hop_distances(graph, source):
    adj = sp.csr_matrix(adjacency(graph).astype(float))
    return shortest_path(adj, unweighted=True, indices=source)


@pytest.mark.parametrize("kind", ["gcn", "gat", "gat-pos", "gat-pos-transformer"])
def test_two_layer_locality(kind):
    # a path graph: node 0 only sees nodes within two hops
    n = 7
    g = symmetrize([(i, i + 1) for i in range(n - 1)], n)
    rng = np.random.default_rng(5)
    ds = Dataset(g, rng.standard_normal((n, 3)), rng.integers(0, 3, n), 3)
    model = build_model(kind, ds, SMALL, rng)
    base = forward_logits(model, ds)
    far = hop_distances(g, 0) > 2
    x = ds.features.copy()
    x[far] += 10 * rng.standard_normal((int(far.sum()), 3))
    params = dict(model.params)
    if "pos.p0" in params:
        params["pos.p0"] = params["pos.p0"].copy()
        params["pos.p0"][far] += 10.0
    moved = forward_logits(model, ds, params, x)
    np.testing.assert_allclose(moved[0], base[0], atol=1e-12)
    assert not np.allclose(moved[far], base[far])


def test_build_model_parameters():
    rng = np.random.default_rng(0)
    ds = random_dataset(rng, 6, num_features=5, num_classes=3)
    hp = ModelHyperparams(hidden_units=4, hidden_heads=3, positional_dim=8)
    m = build_model("gat-pos", ds, hp, rng)
    shapes = {k: v.shape for k, v in m.params.items()}
    n = ds.num_nodes
    assert shapes == {
        "pos.p0": (n, 8), "pos.W1": (8, 8), "pos.W2": (8, 8),
        "layer1.W": (5, 12), "layer1.U": (8, 12), "layer1.a": (8, 3), "layer1.res": (5, 12),
        "layer2.W": (12, 3), "layer2.U": (8, 3), "layer2.a": (6, 1),
    }
    assert "pos.p0" not in m.weight_names and "pos.W1" in m.weight_names
    assert sorted(m.positional_names) == ["pos.W1", "pos.W2", "pos.p0"]
    gat = build_model("gat", ds, hp, rng)
    assert not any(k.startswith("pos.") or k.endswith(".U") for k in gat.params)
    tr = build_model("gat-pos-transformer", ds, hp, rng)
    assert tr.params["layer1.inject"].shape == (8, 5) and tr.params["layer2.inject"].shape == (8, 12)
    assert "layer1.U" not in tr.params
    gcn = build_model("gcn", ds, hp, rng)
    assert {k: v.shape for k, v in gcn.params.items()} == {"layer1.W": (5, 64), "layer2.W": (64, 3)}


def test_unknown_kind():
    with pytest.raises(ConfigError):
        build_model("mlp", random_dataset(np.random.default_rng(0)))


def test_per_dataset_widths():
    assert (ModelHyperparams.for_dataset("Chameleon").hidden_units, ModelHyperparams.for_dataset("chameleon").hidden_heads) == (32, 16)
    assert (ModelHyperparams.for_dataset("squirrel").hidden_units, ModelHyperparams.for_dataset("squirrel").hidden_heads) == (8, 16)
    assert (ModelHyperparams.for_dataset("cora").hidden_units, ModelHyperparams.for_dataset("cora").hidden_heads) == (8, 8)
    assert ModelHyperparams.for_dataset("actor", hidden_units=4).hidden_units == 4


def test_sparse_and_dense_features_agree():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 8)
    n = g.num_nodes
    x = rng.standard_normal((n, 6)) * (rng.random((n, 6)) < 0.2)
    ds = Dataset(g, x, rng.integers(0, 2, n), 2)
    model = build_model("gat-pos", ds, SMALL, rng)
    tape = Tape()
    leaves = {k: tape.constant(v) for k, v in model.params.items()}
    sparse_out = model.forward(leaves, sp.csr_matrix(x), g).logits.data
    np.testing.assert_allclose(sparse_out, forward_logits(model, ds), atol=1e-12)


def test_dense_oracle_masks_non_neighbors():
    rng = np.random.default_rng(9)
    g = random_graph(rng, 8)
    adj = adjacency(g)
    n = g.num_nodes
    h = rng.standard_normal((n, 2))
    out = dense_gat_layer_oracle(h, None, np.eye(2), None, rng.standard_normal((4, 1)), adj, 1, "output")
    # every output row is a convex combination of its closed neighborhood's rows
    for v in range(n):
        nb = np.flatnonzero(adj[v] | (np.arange(n) == v))
        assert np.all(out[v] <= h[nb].max(axis=0) + 1e-12) and np.all(out[v] >= h[nb].min(axis=0) - 1e-12)
