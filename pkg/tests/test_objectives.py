import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ortho_group

from gatpos.autodiff import Tape
from gatpos.exceptions import ContractError, ShapeError
from gatpos.graph import build_negative_distribution, symmetrize
from gatpos.objectives import (
    Adam,
    AdamState,
    adam_step,
    draw_arc_negatives,
    l2_penalty,
    supervised_loss,
    unsupervised_loss,
)
from gatpos.verify import exact_expected_unsupervised


def softplus(x):
    return np.log1p(np.exp(x))


def test_unsupervised_hand_value():
    g = symmetrize([(0, 1)], 2)
    p = np.eye(2)
    negatives = np.array([[0], [1]])  # arc (0,1) draws node 0, arc (1,0) draws node 1
    lu = unsupervised_loss(Tape().constant(p), g, None, negatives=negatives)
    assert lu.item() == pytest.approx(2 * np.log(2) + 2 * softplus(1.0))


def test_unsupervised_multiple_negatives():
    g = symmetrize([(0, 1)], 3)
    p = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 2.0]])
    neg = np.array([[2, 2], [0, 2]])
    lu = unsupervised_loss(Tape().constant(p), g, None, negatives=neg).item()
    want = 2 * softplus(-0.5) + softplus(0.0) + softplus(0.0) + softplus(0.5) + softplus(1.0)
    assert lu == pytest.approx(want)


def enumerate_expected(p, graph, probs):
    """Exact expectation with Q = 1 by summing over every joint draw of the arc negatives."""
    arcs = list(zip(graph.arc_sources, graph.neighbor_targets))
    n = len(probs)
    total = 0.0
    support = np.flatnonzero(probs)
    for draw in itertools.product(support, repeat=len(arcs)):
        weight = np.prod([probs[w] for w in draw])
        value = sum(softplus(-p[v] @ p[u]) + softplus(p[v] @ p[w]) for (v, u), w in zip(arcs, draw))
        total += weight * value
    return total


def test_expectation_oracles_agree():
    g = symmetrize([(0, 1), (1, 2)], 3)
    p = np.random.default_rng(0).standard_normal((3, 2))
    dist = build_negative_distribution(g)
    assert exact_expected_unsupervised(p, g, dist) == pytest.approx(enumerate_expected(p, g, dist.probabilities))


def test_monte_carlo_matches_enumeration_on_five_nodes():
    g = symmetrize([(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)], 5)
    rng = np.random.default_rng(1)
    p = rng.standard_normal((5, 4))
    dist = build_negative_distribution(g)
    exact = exact_expected_unsupervised(p, g, dist)
    draws = [unsupervised_loss(Tape().constant(p), g, dist, 1, rng).item() for _ in range(20000)]
    assert abs(np.mean(draws) - exact) / exact < 0.01


@given(st.integers(0, 2**31))
def test_orthogonal_invariance(seed):
    rng = np.random.default_rng(seed)
    g = symmetrize([(0, 1), (1, 2), (2, 3), (0, 3), (1, 4)], 5)
    dist = build_negative_distribution(g)
    neg = draw_arc_negatives(g, dist, 2, rng)
    p = rng.standard_normal((5, 4))
    Q = ortho_group.rvs(4, random_state=seed % (2**32))
    a = unsupervised_loss(Tape().constant(p), g, dist, negatives=neg).item()
    b = unsupervised_loss(Tape().constant(p @ Q), g, dist, negatives=neg).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_unsupervised_needs_edges():
    g = symmetrize([], 3)
    with pytest.raises(ContractError):
        unsupervised_loss(Tape().constant(np.ones((3, 2))), g, None, negatives=np.zeros((0, 1)))


def test_negatives_shape_and_validation():
    g = symmetrize([(0, 1), (1, 2)], 3)
    dist = build_negative_distribution(g)
    assert draw_arc_negatives(g, dist, 3, np.random.default_rng(0)).shape == (4, 3)
    with pytest.raises(ContractError):
        draw_arc_negatives(g, dist, 0, np.random.default_rng(0))


def test_supervised_loss():
    tape = Tape()
    z = tape.variable(np.zeros((5, 4)))
    assert supervised_loss(z, np.zeros(5, dtype=int), [0, 2]).item() == pytest.approx(2 * np.log(4))
    with pytest.raises(ContractError):
        supervised_loss(z, np.zeros(5, dtype=int), [])


def test_l2_penalty():
    tape = Tape()
    w = [tape.variable([[1.0, 2.0]]), tape.variable([[3.0]])]
    assert l2_penalty(w).item() == pytest.approx(0.5 * (1 + 4 + 9))
    with pytest.raises(ContractError):
        l2_penalty([])


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        # bias correction makes the first update lr * g / (|g| + eps)
        params = {"w": np.array([[1.0, -2.0, 0.5]])}
        Adam(lr=0.1).step(params, {"w": np.array([[3.0, -0.01, 0.0]])})
        np.testing.assert_allclose(params["w"], [[0.9, -1.9, 0.5]], atol=1e-6)

    def test_constant_gradient_steps_are_lr(self):
        params = {"w": np.zeros((1, 1))}
        opt = Adam(lr=0.01)
        for _ in range(5):
            opt.step(params, {"w": np.array([[2.0]])})
        assert params["w"][0, 0] == pytest.approx(-0.05, rel=1e-6)

    def test_hand_two_steps(self):
        # g1 = 1, g2 = -1: m2 = 0.9*0.1 - 0.1 = -0.01, v2 = 0.999*0.001 + 0.001
        state = AdamState(lr=1.0, eps=0.0)
        params = {"w": np.zeros((1, 1))}
        adam_step(state, params, {"w": np.ones((1, 1))})
        adam_step(state, params, {"w": -np.ones((1, 1))})
        m_hat = -0.01 / (1 - 0.9 ** 2)
        v_hat = (0.999 * 0.001 + 0.001) / (1 - 0.999 ** 2)
        assert params["w"][0, 0] == pytest.approx(-1.0 - m_hat / np.sqrt(v_hat))

    def test_updates_in_place(self):
        w = np.ones((2, 2))
        params = {"w": w}
        Adam().step(params, {"w": np.ones((2, 2))})
        assert params["w"] is w and (w < 1).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Adam().step({"w": np.ones((2, 2))}, {"w": np.ones((2, 1))})

    def test_minimizes_quadratic(self):
        params = {"w": np.array([[5.0, -3.0]])}
        opt = Adam(lr=0.1)
        for _ in range(500):
            opt.step(params, {"w": 2 * (params["w"] - 1.0)})
        np.testing.assert_allclose(params["w"], [[1.0, 1.0]], atol=1e-2)
