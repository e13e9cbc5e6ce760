"""Self-checks: gradient checks, attention invariants and dense loop oracles.

``run_suite`` returns one :class:`CheckResult` per check. It backs the
``gatpos verify`` command and the acceptance tests. The dense oracles here
are written with explicit Python loops over nodes and heads, independently
of the segment-based implementation they are compared against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

from . import autodiff as ad
from .autodiff import SegmentIndex, Tape, gradient_check
from .graph import Dataset, build_negative_distribution, generate_splits, symmetrize
from .layers import (
    AttentionHeadParams,
    GatLayerConfig,
    ModelHyperparams,
    attention_scores,
    build_model,
    gat_layer_forward,
    gcn_layer_forward,
)
from .objectives import draw_arc_negatives, l2_penalty, supervised_loss, unsupervised_loss

ORACLE_TOL = 1e-8


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f"  {self.detail}" if self.detail else "")


# --------------------------------------------------------------------------
# random instances


def random_graph(rng: np.random.Generator, max_nodes: int = 10, min_nodes: int = 3, edge_prob: float = 0.4):
    """A symmetric graph with at least one edge."""
    n = int(rng.integers(min_nodes, max_nodes + 1))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < edge_prob]
    if not pairs:
        pairs = [(0, 1)]
    return symmetrize(pairs, n)


def random_dataset(rng, max_nodes=10, num_features=3, num_classes=3) -> Dataset:
    graph = random_graph(rng, max_nodes)
    n = graph.num_nodes
    features = rng.standard_normal((n, num_features))
    labels = rng.integers(0, num_classes, size=n)
    return Dataset(graph, features, labels, num_classes, name="random")


def _away_from_zero(rng, shape, low=0.1):
    """Entries with magnitude in ``[low, 1]`` so kinks stay out of reach of the FD step."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


# --------------------------------------------------------------------------
# per-operation gradient checks


def _sq(x):
    return ad.mul(x, x)


def _op_cases(rng):
    """``name -> (params, build_fn)`` covering every differentiable op."""
    g = random_graph(rng, 6)
    offsets, centers, members = g.attention_segments
    seg = SegmentIndex(offsets)
    E = len(members)
    n = g.num_nodes
    A = rng.standard_normal((4, 3))
    B = rng.standard_normal((3, 5))
    C = rng.standard_normal((4, 3))
    cases = {
        "matmul": ({"a": A, "b": B}, lambda t, v: ad.total(_sq(ad.matmul(v["a"], v["b"])))),
        "add": ({"a": A, "c": C}, lambda t, v: ad.total(ad.mul(ad.add(v["a"], v["c"]), v["a"]))),
        "mul": ({"a": A, "c": C}, lambda t, v: ad.total(ad.mul(ad.mul(v["a"], v["c"]), v["c"]))),
        "scale": ({"a": A}, lambda t, v: ad.total(ad.mul(ad.scale(v["a"], -2.5), v["a"]))),
        "row_sum": ({"a": A}, lambda t, v: ad.total(ad.mul(ad.row_sum(v["a"]), ad.row_sum(v["a"])))),
        "concat_cols": ({"a": A, "c": C}, lambda t, v: ad.total(_sq(ad.matmul(ad.concat_cols([v["a"], v["c"]]),
                                                                              t.constant(rng_fixed(6, 2)))))),
        "slice_cols": ({"a": A}, lambda t, v: ad.total(_sq(ad.slice_cols(v["a"], 1, 3)))),
        "slice_rows": ({"a": A}, lambda t, v: ad.total(_sq(ad.slice_rows(v["a"], 1, 3)))),
        "gather_rows": ({"x": rng.standard_normal((n, 2))},
                        lambda t, v: ad.total(_sq(ad.gather_rows(v["x"], members)))),
        "segment_weighted_sum": (
            {"x": rng.standard_normal((E, 2)), "w": rng.standard_normal((E, 1))},
            lambda t, v: ad.total(_sq(ad.segment_weighted_sum(v["x"], v["w"], seg))),
        ),
        "neighbor_aggregate": (
            {"x": rng.standard_normal((n, 3)), "w": rng.standard_normal((E, 1))},
            lambda t, v: ad.total(_sq(ad.neighbor_aggregate(v["x"], v["w"], seg, members))),
        ),
        "pair_dots": ({"x": rng.standard_normal((n, 3))},
                      lambda t, v: ad.total(ad.sigmoid(ad.pair_dots(v["x"], centers, members)))),
        "segment_softmax": (
            {"s": rng.standard_normal((E, 1))},
            lambda t, v: ad.total(ad.mul(ad.segment_softmax(v["s"], seg), t.constant(rng_fixed(E, 1)))),
        ),
        "leaky_relu": ({"a": _away_from_zero(rng, (4, 3))}, lambda t, v: ad.total(_sq(ad.leaky_relu(v["a"])))),
        "relu": ({"a": _away_from_zero(rng, (4, 3))}, lambda t, v: ad.total(_sq(ad.relu(v["a"])))),
        "elu": ({"a": _away_from_zero(rng, (4, 3))}, lambda t, v: ad.total(_sq(ad.elu(v["a"])))),
        "sigmoid": ({"a": A}, lambda t, v: ad.total(_sq(ad.sigmoid(v["a"])))),
        "softplus": ({"a": 3 * A}, lambda t, v: ad.total(_sq(ad.softplus(v["a"])))),
        "log": ({"a": rng.uniform(0.5, 2.0, (4, 3))}, lambda t, v: ad.total(_sq(ad.log(v["a"])))),
        "cross_entropy": (
            {"z": rng.standard_normal((n, 3))},
            lambda t, v: ad.cross_entropy_rows(v["z"], np.arange(n) % 3, np.arange(0, n, 2)),
        ),
        "sparse_matmul": (
            {"b": rng.standard_normal((4, 3))},
            lambda t, v: ad.total(_sq(ad.sparse_matmul(_fixed_sparse(), v["b"]))),
        ),
    }
    return cases


def rng_fixed(*shape):
    """A constant array that does not depend on the check's random stream."""
    return np.random.default_rng(12345).standard_normal(shape)


def _fixed_sparse():
    return sp.csr_matrix(np.array([[1.0, 0, 2, 0], [0, 0, 0, -1], [3, 0.5, 0, 0]]))


def check_op_gradients(rng, tol=1e-4, step=1e-4) -> list[CheckResult]:
    out = []
    for name, (params, build) in _op_cases(rng).items():
        report = gradient_check(build, params, step=step, tol=tol, label=name)
        out.append(CheckResult(f"grad/{name}", report.passed, f"max_rel_err={report.max_error:.2e}"))
    return out


# --------------------------------------------------------------------------
# full-model gradient checks


def model_instance(kind: str, rng, max_nodes=10):
    """A tiny two-layer model with dropout off, plus everything its loss needs."""
    ds = random_dataset(rng, max_nodes)
    hp = ModelHyperparams(hidden_units=2, hidden_heads=2, output_heads=2, positional_dim=4,
                          dropout=0.0, residual=True, gcn_hidden=4)
    model = build_model(kind, ds, hp, rng)
    # larger weights spread pre-activations out, making a kink inside the FD step less likely
    for k in model.params:
        model.params[k] *= 2.0
    train_idx = np.arange(0, ds.num_nodes, 2)
    negatives = None
    dist = None
    if model.has_positional:
        dist = build_negative_distribution(ds.graph)
        negatives = draw_arc_negatives(ds.graph, dist, 1, rng)
    return ds, model, train_idx, dist, negatives


def model_loss_fn(ds, model, train_idx, dist, negatives, lam=1.0, weight_decay=5e-4):
    """``build_fn`` for :func:`gradient_check`: supervised + lam * unsupervised + L2."""

    def build(tape: Tape, leaves):
        out = model.forward(leaves, tape.constant(ds.features), ds.graph, None, False)
        loss = supervised_loss(out.logits, ds.labels, train_idx)
        if out.positional is not None:
            lu = unsupervised_loss(out.positional, ds.graph, dist, negatives=negatives)
            loss = ad.add(loss, ad.scale(lu, lam))
        l2 = l2_penalty([leaves[k] for k in model.weight_names])
        return ad.add(loss, ad.scale(l2, weight_decay))

    return build


def check_model_gradients(rng, tol=1e-4, step=1e-4, instances=2) -> list[CheckResult]:
    out = []
    for kind in ("gat-pos", "gat-pos-transformer", "gat", "gcn"):
        worst, ok = 0.0, True
        for _ in range(instances):
            ds, model, train_idx, dist, negatives = model_instance(kind, rng)
            report = gradient_check(model_loss_fn(ds, model, train_idx, dist, negatives), model.params,
                                    step=step, tol=tol, label=kind)
            worst = max(worst, report.max_error)
            ok &= report.passed
        out.append(CheckResult(f"grad/model/{kind}", ok, f"max_rel_err={worst:.2e} instances={instances}"))
    return out


# --------------------------------------------------------------------------
# dense oracles


def dense_attention_oracle(h, p, W, U, a, adj, slope=0.2):
    """Attention coefficients of one head as an ``[N, N]`` matrix (zero off ``N(v) ∪ {v}``)."""
    n = h.shape[0]
    z = h @ W if U is None else h @ W + p @ U
    width = W.shape[1]
    alpha = np.zeros((n, n))
    for v in range(n):
        nbrs = [u for u in range(n) if adj[v, u] or u == v]
        e = []
        for u in nbrs:
            s = float(a[:width, 0] @ z[v] + a[width:, 0] @ z[u])
            e.append(s if s >= 0 else slope * s)
        e = np.exp(np.array(e) - max(e))
        for u, w in zip(nbrs, e / e.sum()):
            alpha[v, u] = w
    return alpha


def dense_gat_layer_oracle(h, p, W, U, a, adj, num_heads, mode, residual=None, slope=0.2):
    """Loop form of a multi-head attention layer (stacked-head parameter layout)."""
    n = h.shape[0]
    fo = W.shape[1] // num_heads
    heads = []
    for k in range(num_heads):
        cols = slice(k * fo, (k + 1) * fo)
        Wk = W[:, cols]
        Uk = None if U is None else U[:, cols]
        alpha = dense_attention_oracle(h, p, Wk, Uk, a[:, k:k + 1], adj, slope)
        wh = h @ Wk
        out = np.zeros((n, fo))
        for v in range(n):
            for u in range(n):
                out[v] += alpha[v, u] * wh[u]
        heads.append(out)
    if mode == "output":
        return sum(heads) / num_heads
    out = np.concatenate([np.where(x > 0, x, np.expm1(np.minimum(x, 0))) for x in heads], axis=1)
    if residual is not None:
        out = out + (h if residual is True else h @ residual)
    return out


def dense_gcn_oracle(h, W, adj):
    n = h.shape[0]
    deg = adj.sum(axis=1)
    hw = h @ W
    out = np.zeros((n, W.shape[1]))
    for v in range(n):
        for u in range(n):
            if adj[v, u] or u == v:
                out[v] += hw[u] / np.sqrt((deg[v] + 1) * (deg[u] + 1))
    return out


def adjacency(graph) -> np.ndarray:
    adj = np.zeros((graph.num_nodes, graph.num_nodes), dtype=bool)
    adj[graph.arc_sources, graph.neighbor_targets] = True
    return adj


def oracle_layer_errors(rng, max_nodes=8) -> dict[str, float]:
    """Max abs difference between sparse layers and dense oracles on one random graph."""
    g = random_graph(rng, max_nodes, min_nodes=2)
    n, D, Fp, fo, K = g.num_nodes, 3, 4, 2, 3
    h = rng.standard_normal((n, D))
    p = rng.standard_normal((n, Fp))
    adj = adjacency(g)
    errs = {}
    for mode, positional, residual in (("hidden", True, True), ("hidden", False, False), ("output", True, False)):
        cfg = GatLayerConfig(D, fo, K, mode, positional, residual)
        W = rng.standard_normal((D, K * fo))
        U = rng.standard_normal((Fp, K * fo)) if positional else None
        a = rng.standard_normal((2 * fo, K))
        res = rng.standard_normal((D, cfg.output_width)) if residual else None
        tape = Tape()
        params = {"W": tape.constant(W), "a": tape.constant(a)}
        if U is not None:
            params["U"] = tape.constant(U)
        if res is not None:
            params["res"] = tape.constant(res)
        got = gat_layer_forward(tape.constant(h), tape.constant(p), params, cfg, g).data
        want = dense_gat_layer_oracle(h, p, W, U, a, adj, K, mode, res)
        errs[f"{mode}/{'pos' if positional else 'plain'}{'/res' if residual else ''}"] = float(np.abs(got - want).max())
    W = rng.standard_normal((D, 4))
    tape = Tape()
    got = gcn_layer_forward(tape.constant(h), tape.constant(W), g, activation="identity").data
    errs["gcn"] = float(np.abs(got - dense_gcn_oracle(h, W, adj)).max())
    return errs


def check_oracles(rng, graphs=10) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for _ in range(graphs):
        for k, e in oracle_layer_errors(rng).items():
            worst[k] = max(worst.get(k, 0.0), e)
    return [CheckResult(f"oracle/{k}", e < ORACLE_TOL, f"max_abs_err={e:.1e} graphs={graphs}") for k, e in worst.items()]


def exact_expected_unsupervised(p, graph, dist, num_negatives=1) -> float:
    """Expectation of the unsupervised loss over negative draws, by enumeration."""
    probs = dist.probabilities
    total = 0.0
    for v, u in zip(graph.arc_sources, graph.neighbor_targets):
        total += np.logaddexp(0.0, -p[v] @ p[u])
        total += num_negatives * sum(probs[w] * np.logaddexp(0.0, p[v] @ p[w]) for w in range(graph.num_nodes))
    return float(total)


def monte_carlo_unsupervised(p, graph, dist, draws, rng, num_negatives=1) -> float:
    vals = []
    for _ in range(draws):
        tape = Tape()
        vals.append(unsupervised_loss(tape.constant(p), graph, dist, num_negatives, rng).item())
    return float(np.mean(vals))


def check_unsupervised_mc(rng, draws=20000) -> CheckResult:
    g = symmetrize([(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)], 5)
    p = rng.standard_normal((5, 4))
    dist = build_negative_distribution(g)
    exact = exact_expected_unsupervised(p, g, dist)
    mc = monte_carlo_unsupervised(p, g, dist, draws, rng)
    rel = abs(mc - exact) / abs(exact)
    return CheckResult("oracle/unsupervised_mc", rel < 0.01, f"rel_diff={rel:.2e} draws={draws}")


# --------------------------------------------------------------------------
# invariants


def check_softmax_invariants(rng, graphs=10) -> list[CheckResult]:
    norm_err, mask_err, stable = 0.0, 0.0, True
    for _ in range(graphs):
        g = random_graph(rng, 10)
        offsets, centers, members = g.attention_segments
        seg = SegmentIndex(offsets)
        tape = Tape()
        coef = ad.segment_softmax(tape.constant(rng.standard_normal((len(members), 1)) * 5), seg).data[:, 0]
        norm_err = max(norm_err, float(np.abs(seg.segment_sum(coef[:, None])[:, 0] - 1.0).max()))
        big = ad.segment_softmax(tape.constant(np.full((len(members), 1), 1e4)), seg).data
        stable &= bool(np.isfinite(big).all())

        # masking: moving a node outside N(v) ∪ {v} must not change v's coefficients
        n, D, fo = g.num_nodes, 3, 2
        h, p = rng.standard_normal((n, D)), rng.standard_normal((n, 4))
        W, U, a = rng.standard_normal((D, fo)), rng.standard_normal((4, fo)), rng.standard_normal((2 * fo, 1))
        adj = adjacency(g)
        base = dense_attention_oracle(h, p, W, U, a, adj)
        for v in range(n):
            outside = [u for u in range(n) if u != v and not adj[v, u]]
            if not outside:
                continue
            h2, p2 = h.copy(), p.copy()
            h2[outside] += rng.standard_normal((len(outside), D)) * 3
            p2[outside] += rng.standard_normal((len(outside), 4)) * 3
            moved = dense_attention_oracle(h2, p2, W, U, a, adj)
            mask_err = max(mask_err, float(np.abs(moved[v] - base[v]).max()), float(np.abs(base[v, outside]).max()))
            tape = Tape()
            got, _ = attention_scores(tape.constant(h2), tape.constant(p2), AttentionHeadParams(W, a, U), g)
            lo, hi = offsets[v], offsets[v + 1]
            mask_err = max(mask_err, float(np.abs(got.data[lo:hi, 0] - base[v, members[lo:hi]]).max()))
    return [
        CheckResult("invariant/softmax_normalization", norm_err < 1e-12, f"max_err={norm_err:.1e}"),
        CheckResult("invariant/softmax_stability", stable, "scores of 1e4"),
        CheckResult("invariant/attention_masking", mask_err < ORACLE_TOL, f"max_err={mask_err:.1e}"),
    ]


def check_permutation_equivariance(rng, graphs=5) -> CheckResult:
    worst = 0.0
    for _ in range(graphs):
        ds = random_dataset(rng, 8)
        hp = ModelHyperparams(hidden_units=2, hidden_heads=2, positional_dim=4, dropout=0.0)
        model = build_model("gat-pos", ds, hp, rng)
        perm = rng.permutation(ds.num_nodes)
        inv = np.argsort(perm)  # node perm[v] of the relabeled graph is old node v
        tape = Tape()
        leaves = {k: tape.constant(v) for k, v in model.params.items()}
        base = model.forward(leaves, tape.constant(ds.features), ds.graph).logits.data
        permuted = dict(leaves)
        permuted["pos.p0"] = tape.constant(model.params["pos.p0"][inv])
        out = model.forward(permuted, tape.constant(ds.features[inv]), ds.graph.permute(perm)).logits.data
        worst = max(worst, float(np.abs(out - base[inv]).max()))
    return CheckResult("invariant/permutation_equivariance", worst < ORACLE_TOL, f"max_err={worst:.1e}")


def check_locality(rng, graphs=5) -> list[CheckResult]:
    """Two layers see two hops: moving far-away nodes leaves a node's logits unchanged."""
    out = []
    for kind in ("gcn", "gat", "gat-pos", "gat-pos-transformer"):
        worst, moved_nodes = 0.0, 0
        for _ in range(graphs):
            n = int(rng.integers(6, 11))
            ds = Dataset(random_graph(rng, n, n, edge_prob=0.25), rng.standard_normal((n, 3)),
                         rng.integers(0, 3, n), 3, name="random")
            hp = ModelHyperparams(hidden_units=2, hidden_heads=2, positional_dim=4, dropout=0.0, gcn_hidden=4)
            model = build_model(kind, ds, hp, rng)
            far = shortest_path(sp.csr_matrix(adjacency(ds.graph).astype(float)), unweighted=True, indices=0) > 2
            tape = Tape()
            leaves = {k: tape.constant(v) for k, v in model.params.items()}
            base = model.forward(leaves, tape.constant(ds.features), ds.graph).logits.data
            moved_nodes += int(far.sum())
            x = ds.features.copy()
            x[far] += 10.0
            moved = dict(leaves)
            if "pos.p0" in moved:
                p0 = model.params["pos.p0"].copy()
                p0[far] -= 10.0
                moved["pos.p0"] = tape.constant(p0)
            shifted = model.forward(moved, tape.constant(x), ds.graph).logits.data
            worst = max(worst, float(np.abs(shifted[0] - base[0]).max()))
        passed = worst == 0.0 and moved_nodes > 0
        out.append(CheckResult(f"invariant/locality/{kind}", passed, f"max_err={worst:.1e} moved={moved_nodes}"))
    return out


def check_split_proportions(rng, trials=20) -> CheckResult:
    bad = 0
    for _ in range(trials):
        sizes = rng.integers(5, 40, size=rng.integers(1, 5))
        labels = rng.permutation(np.repeat(np.arange(len(sizes)), sizes))
        n = len(labels)
        ds = Dataset(symmetrize([], n), np.zeros((n, 1)), labels, len(sizes))
        s = generate_splits(ds, int(rng.integers(2**32)))
        parts = np.concatenate([s.train_idx, s.val_idx, s.test_idx])
        ok = np.array_equal(np.sort(parts), np.arange(n))
        for c, size in enumerate(sizes):
            ok &= (labels[s.train_idx] == c).sum() == np.floor(0.6 * size + 0.5)
            ok &= (labels[s.val_idx] == c).sum() == np.floor(0.2 * size + 0.5)
        bad += not ok
    return CheckResult("invariant/split_partition", bad == 0, f"bad={bad}/{trials}")


# --------------------------------------------------------------------------


def run_suite(tol: float = 1e-4, seed: int = 0, step: float = 1e-4) -> list[CheckResult]:
    """Run every check. ``tol`` applies to the gradient checks."""
    rng = np.random.default_rng(seed)
    results = []
    results += check_op_gradients(rng, tol, step)
    results += check_model_gradients(rng, tol, step)
    results += check_softmax_invariants(rng)
    results.append(check_permutation_equivariance(rng))
    results += check_locality(rng)
    results.append(check_split_proportions(rng))
    results += check_oracles(rng)
    results.append(check_unsupervised_mc(rng))
    return results


def main_report(tol=1e-4, seed=0, out=print) -> bool:
    start = time.perf_counter()
    results = run_suite(tol, seed)
    for r in results:
        out(r.line())
    failed = sum(not r.passed for r in results)
    out(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    return failed == 0
