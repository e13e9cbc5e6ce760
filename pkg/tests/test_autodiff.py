import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from gatpos import autodiff as ad
from gatpos.autodiff import SegmentIndex, Tape, backward, gradient_check
from gatpos.exceptions import ConfigError, ContractError, DomainError, GraphRangeError, SegmentationError, ShapeError
from gatpos.verify import check_op_gradients


def test_every_op_passes_gradient_check():
    results = check_op_gradients(np.random.default_rng(7))
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed


@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(1, 5))
def test_random_composition_gradients(seed, m, n):
    rng = np.random.default_rng(seed)
    params = {"x": rng.standard_normal((m, n)), "w": rng.standard_normal((n, 3))}

    def build(tape, v):
        h = ad.elu(ad.matmul(v["x"], v["w"]))
        return ad.total(ad.softplus(ad.mul(h, ad.sigmoid(h))))

    assert gradient_check(build, params).passed


def test_accumulates_reused_values():
    tape = Tape()
    x = tape.variable([[3.0, -2.0]])
    loss = ad.total(ad.mul(x, x))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [[6.0, -4.0]])


def test_unreachable_leaf_gets_zero():
    tape = Tape()
    x, y = tape.variable([[1.0]]), tape.variable([[2.0, 3.0]])
    grads = backward(tape, ad.scale(x, 2.0))
    np.testing.assert_array_equal(grads[y], np.zeros((1, 2)))


def test_constants_get_no_gradient():
    tape = Tape()
    c, x = tape.constant([[2.0]]), tape.variable([[5.0]])
    grads = backward(tape, ad.mul(c, x))
    assert c not in grads and grads[x][0, 0] == 2.0


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.variable(np.ones((2, 2)))
    with pytest.raises(ContractError):
        backward(tape, x)


def test_backward_requires_same_tape():
    a, b = Tape(), Tape()
    x = a.variable([[1.0]])
    with pytest.raises(ContractError):
        backward(b, ad.total(x))


def test_mixed_tapes_rejected():
    x, y = Tape().variable([[1.0]]), Tape().variable([[1.0]])
    with pytest.raises(ContractError):
        ad.add(x, y)


def test_shape_errors():
    tape = Tape()
    with pytest.raises(ShapeError):
        ad.matmul(tape.variable(np.ones((2, 3))), tape.variable(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(tape.variable(np.ones((2, 3))), tape.variable(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ad.Value(np.ones(3), tape)


def test_leaky_relu_kink_convention():
    tape = Tape()
    x = tape.variable([[0.0, -1.0, 2.0]])
    y = ad.leaky_relu(x, 0.2)
    np.testing.assert_allclose(y.data, [[0.0, -0.2, 2.0]])
    backward(tape, ad.total(y))
    np.testing.assert_allclose(x.grad, [[1.0, 0.2, 1.0]])


def test_relu_and_elu_values():
    tape = Tape()
    x = tape.constant([[-1.0, 0.0, 2.0]])
    np.testing.assert_allclose(ad.relu(x).data, [[0.0, 0.0, 2.0]])
    np.testing.assert_allclose(ad.elu(x).data, [[np.expm1(-1.0), 0.0, 2.0]])


def test_softplus_and_cross_entropy_stable():
    tape = Tape()
    z = tape.variable([[1000.0, -1000.0], [-1000.0, 1000.0]])
    assert np.isfinite(ad.softplus(z).data).all()
    loss = ad.cross_entropy_rows(z, [1, 1], [0, 1])
    assert loss.item() == pytest.approx(2000.0)
    backward(tape, loss)
    assert np.isfinite(z.grad).all()


def test_cross_entropy_uniform():
    tape = Tape()
    loss = ad.cross_entropy_rows(tape.variable(np.zeros((4, 3))), [0, 1, 2, 0], [0, 2, 3])
    assert loss.item() == pytest.approx(3 * np.log(3))


def test_log_domain():
    with pytest.raises(DomainError):
        ad.log(Tape().variable([[1.0, 0.0]]))


class TestDropout:
    def test_identity_when_not_training(self):
        x = Tape().variable(np.ones((3, 3)))
        assert ad.dropout(x, 0.5, None, training=False) is x

    def test_inverted_scaling(self):
        x = Tape().variable(np.ones((200, 200)))
        y = ad.dropout(x, 0.5, np.random.default_rng(0), training=True).data
        assert set(np.unique(y)) <= {0.0, 2.0}
        assert y.mean() == pytest.approx(1.0, abs=0.02)

    def test_invalid_probability(self):
        with pytest.raises(ConfigError):
            ad.dropout(Tape().variable([[1.0]]), 1.0, np.random.default_rng(0), True)

    def test_sparse_dropout_keeps_pattern(self):
        x = sp.random(30, 30, density=0.2, random_state=0, format="csr")
        y = ad.sparse_dropout(x, 0.5, np.random.default_rng(0), True)
        assert set(zip(*y.nonzero())) <= set(zip(*x.nonzero()))
        assert ad.sparse_dropout(x, 0.5, None, False) is x


class TestSegments:
    def test_sum_with_empty_segment(self):
        seg = SegmentIndex.from_sizes([2, 0, 1])
        np.testing.assert_allclose(seg.segment_sum(np.array([[1.0], [2.0], [5.0]])), [[3.0], [0.0], [5.0]])

    def test_bad_offsets(self):
        with pytest.raises(SegmentationError):
            SegmentIndex(np.array([1, 2]))
        with pytest.raises(SegmentationError):
            SegmentIndex(np.array([0, 3, 2]))

    def test_softmax_normalizes(self):
        seg = SegmentIndex.from_sizes([3, 1, 2])
        s = Tape().constant(np.array([[1.0], [2.0], [3.0], [-5.0], [0.0], [0.0]]))
        y = ad.segment_softmax(s, seg).data[:, 0]
        np.testing.assert_allclose(y[:3], np.exp([1, 2, 3]) / np.exp([1, 2, 3]).sum())
        np.testing.assert_allclose(y[3:], [1.0, 0.5, 0.5])

    def test_softmax_large_scores(self):
        seg = SegmentIndex.from_sizes([2])
        y = ad.segment_softmax(Tape().constant([[1e5], [1e5 - 1]]), seg).data
        np.testing.assert_allclose(y[:, 0], [1 / (1 + np.exp(-1)), np.exp(-1) / (1 + np.exp(-1))])

    def test_softmax_empty_segment_rejected(self):
        seg = SegmentIndex.from_sizes([1, 0])
        with pytest.raises(SegmentationError):
            ad.segment_softmax(Tape().constant([[1.0]]), seg)

    def test_gather_range(self):
        with pytest.raises(GraphRangeError):
            ad.gather_rows(Tape().variable(np.ones((2, 1))), [0, 2])

    def test_neighbor_aggregate_matches_unfused(self):
        rng = np.random.default_rng(0)
        seg = SegmentIndex.from_sizes([2, 3, 1])
        idx = np.array([0, 1, 0, 1, 2, 2])
        tape = Tape()
        x, w = tape.variable(rng.standard_normal((3, 4))), tape.variable(rng.standard_normal((6, 1)))
        fused = ad.neighbor_aggregate(x, w, seg, idx)
        plain = ad.segment_weighted_sum(ad.gather_rows(x, idx), w, seg)
        np.testing.assert_allclose(fused.data, plain.data, atol=1e-14)


def test_injected_fault_is_detected():
    params = {"a": np.array([[0.5, -0.7]])}
    ad.FAULTS.add("leaky_relu_sign")
    try:
        report = gradient_check(lambda t, v: ad.total(ad.mul(ad.leaky_relu(v["a"]), ad.leaky_relu(v["a"]))), params)
    finally:
        ad.FAULTS.discard("leaky_relu_sign")
    assert not report.passed


def test_gradient_check_tolerance_plumbing():
    params = {"a": np.array([[0.3, 1.2]])}
    report = gradient_check(lambda t, v: ad.total(ad.sigmoid(v["a"])), params, tol=1e-14)
    assert not report.passed and "FAIL" in str(report)
