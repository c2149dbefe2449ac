import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphnorm import autodiff as ad
from graphnorm.autodiff import (NonFiniteError, Segments, ShapeError, Tape, TapeError, Tensor,
                                constant, finite_diff_gradient, forward_op, parameter)


class TestForwardOps:
    def test_identity_matmul(self):
        X = constant(np.arange(12.0).reshape(3, 4))
        out = forward_op("matmul", constant(np.eye(3)), X)
        np.testing.assert_array_equal(out.values, X.values)

    def test_relu_sign_split(self):
        out = forward_op("relu", constant([[-1.0, 2.0]]))
        np.testing.assert_array_equal(out.values, [[0.0, 2.0]])

    def test_segment_mean_hand_value(self):
        # (0 + 2) / 2 = 1 and 4 / 1 = 4
        out = forward_op("segment_mean", constant([[0.0], [2.0], [4.0]]), Segments([0, 0, 1]))
        np.testing.assert_array_equal(out.values, [[1.0], [4.0]])

    def test_leaky_relu_slope(self):
        out = forward_op("leaky_relu", constant([[-1.0, 3.0]]), slope=0.2)
        np.testing.assert_allclose(out.values, [[-0.2, 3.0]], rtol=0, atol=1e-15)

    def test_clip_min(self):
        out = forward_op("clip_min", constant([[-2.0, 0.5]]))
        np.testing.assert_array_equal(out.values, [[0.0, 0.5]])

    def test_row_var_is_biased(self):
        out = forward_op("row_var", constant([[1.0, 3.0]]))
        assert out.item() == 1.0

    def test_concat_and_gather_scatter(self):
        a = constant([[1.0], [2.0], [3.0]])
        b = constant([[4.0], [5.0], [6.0]])
        np.testing.assert_array_equal(forward_op("concat_cols", a, b).values,
                                      [[1, 4], [2, 5], [3, 6]])
        np.testing.assert_array_equal(ad.gather_rows(a, [2, 0, 2]).values, [[3], [1], [3]])
        np.testing.assert_array_equal(ad.scatter_add_rows(a, [1, 1, 0], 3).values, [[3], [3], [0]])

    def test_broadcast_add(self):
        out = constant(np.zeros((2, 3))) + constant([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(out.values, [[1, 2, 3], [1, 2, 3]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            ad.add(constant(np.ones((2, 3))), constant(np.ones((3, 2))))

    def test_non_finite_result(self):
        with pytest.raises(NonFiniteError):
            ad.log(constant([[0.0]]))
        with pytest.raises(NonFiniteError):
            ad.div(constant([[1.0]]), constant([[0.0]]))

    def test_unknown_segment_id(self):
        with pytest.raises(ValueError, match="segment id"):
            Segments([0, 3], num_segments=2)
        with pytest.raises(ValueError, match="sorted"):
            Segments([1, 0])
        with pytest.raises(ShapeError):
            ad.segment_sum(constant(np.ones((3, 1))), Segments([0, 1]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            forward_op("conv2d", constant([[1.0]]))

    def test_values_read_only(self):
        t = constant([[1.0]])
        with pytest.raises(ValueError):
            t.values[0, 0] = 2.0

    def test_row_sum_is_sequential(self):
        # 1e16 + 1 + 1 added left to right loses both ones; pairwise would not
        x = np.array([[1e16, 1.0, 1.0, -1e16]])
        total = 0.0
        for v in x[0]:
            total += v
        assert ad.row_sum(constant(x)).item() == total

    def test_segment_sum_is_sequential(self):
        x = np.array([[1e16], [1.0], [1.0], [-1e16], [3.0]])
        total = 0.0
        for v in x[:4, 0]:
            total += v
        out = ad.segment_sum(constant(x), Segments([0, 0, 0, 0, 1]))
        assert out.values[0, 0] == total
        assert out.values[1, 0] == 3.0


class TestBackward:
    def test_sum_gives_ones(self):
        x = parameter(np.random.default_rng(0).normal(size=(3, 4)))
        with Tape() as tape:
            tape.backward(ad.total_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares(self):
        x = parameter([[3.0]])
        with Tape() as tape:
            tape.backward(ad.total_sum(x * x))
        np.testing.assert_array_equal(x.grad, [[6.0]])

    def test_relu_subgradient(self):
        x = parameter([[-1.0, 2.0]])
        with Tape() as tape:
            tape.backward(ad.total_sum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])

    def test_sqrt_at_zero_is_zero(self):
        x = parameter([[0.0, 4.0]])
        with Tape() as tape:
            tape.backward(ad.total_sum(ad.sqrt(x)))
        np.testing.assert_array_equal(x.grad, [[0.0, 0.25]])

    def test_loss_must_be_scalar(self):
        x = parameter(np.ones((2, 2)))
        with Tape() as tape:
            y = x * x
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_consumed_tape(self):
        x = parameter([[1.0]])
        with Tape() as tape:
            loss = ad.total_sum(x * x)
            tape.backward(loss)
            with pytest.raises(TapeError):
                tape.backward(loss)
            tape.reset()

    def test_retain_accumulates(self):
        x = parameter([[2.0]])
        with Tape() as tape:
            loss = ad.total_sum(x * x)
            tape.backward(loss, retain=True)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[8.0]])

    def test_inference_tape_refuses_backward(self):
        tape = Tape(recording=False)
        with pytest.raises(TapeError):
            tape.backward(constant([[1.0]]))

    def test_no_grad_records_nothing(self):
        x = parameter([[1.0]])
        with Tape() as tape:
            with ad.no_grad():
                ad.total_sum(x * x)
        assert tape.records == []

    def test_records_in_creation_order(self):
        x = parameter([[1.0, 2.0]])
        with Tape() as tape:
            y = ad.relu(x)
            z = ad.total_sum(ad.square(y))
        assert [r.kind for r in tape.records] == ["relu", "square", "sum"]
        assert tape.records[-1].output is z

    def test_shared_input_accumulates(self):
        x = parameter([[1.5]])
        with Tape() as tape:
            y = x * 2.0
            tape.backward(ad.total_sum(y * y + y))
        # d/dx (4x^2 + 2x) = 8x + 2
        np.testing.assert_allclose(x.grad, [[14.0]], rtol=0, atol=1e-14)

    def test_broadcast_gradient(self):
        x = parameter(np.ones((3, 2)))
        b = parameter([[1.0, 2.0]])
        with Tape() as tape:
            tape.backward(ad.total_sum(x * b))
        np.testing.assert_array_equal(b.grad, [[3.0, 3.0]])


class TestFiniteDiff:
    def test_linear_exact(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
        est = finite_diff_gradient(ad.total_sum, x, h=1e-6)
        np.testing.assert_allclose(est.grad.values, np.ones((2, 3)), rtol=0, atol=1e-9)

    def test_square(self):
        est = finite_diff_gradient(lambda t: ad.total_sum(t * t), Tensor([[3.0]]), h=1e-6)
        np.testing.assert_allclose(est.grad.values, [[6.0]], rtol=0, atol=1e-6)

    def test_kink_flagged(self):
        est = finite_diff_gradient(lambda t: ad.total_sum(ad.relu(t)), Tensor([[0.0, 1.0]]),
                                   kinks=(0.0,))
        np.testing.assert_array_equal(est.skipped, [[True, False]])
        assert est.grad.values[0, 0] == 0.0

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            finite_diff_gradient(lambda t: float("nan"), Tensor([[1.0]]))

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(ad.total_sum, Tensor([[1.0]]), h=0.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-10, 10)))
def test_tape_matches_finite_differences(x):
    R = np.linspace(-1, 1, x.size).reshape(x.shape)

    def fn(t):
        return ad.total_sum(ad.sigmoid(t) * constant(R) + ad.square(t) * 0.1)

    p = parameter(x)
    with Tape() as tape:
        tape.backward(fn(p))
    est = finite_diff_gradient(fn, Tensor(x))
    np.testing.assert_allclose(p.grad, est.grad.values, rtol=0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=12))
def test_segment_sum_matches_loop(ids):
    ids = sorted(ids)
    rng = np.random.default_rng(len(ids))
    x = rng.normal(size=(len(ids), 2))
    out = ad.segment_sum(constant(x), Segments(ids, 5)).values
    expected = np.zeros((5, 2))
    for row, s in zip(x, ids):
        expected[s] += row
    np.testing.assert_array_equal(out, expected)
