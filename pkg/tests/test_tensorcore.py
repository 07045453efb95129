import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gandetect import tensorcore as tc
from gandetect.tensorcore import (ContractError, DegenerateInputError, NonFiniteError, Parameter, RngStream,
                                  Tensor)

import gradcases

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# --- conv2d ----------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 5, 6))
    out = tc.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_on_constant_input():
    out = tc.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=float)
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_conv_same_padding_keeps_size(k):
    out = tc.conv2d(Tensor(np.zeros((2, 9, 11))), Tensor(np.zeros((3, 2, k, k))), padding=(k - 1) // 2)
    assert out.shape == (3, 9, 11)


def test_conv_output_size_formula():
    out = tc.conv2d(Tensor(np.zeros((1, 10, 7))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, (10 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv_batched_matches_unbatched():
    g = np.random.default_rng(1)
    x, k = g.normal(size=(3, 2, 6, 6)), g.normal(size=(4, 2, 3, 3))
    batched = tc.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], tc.conv2d(Tensor(x[i]), Tensor(k), stride=2, padding=1).data)


def test_conv_errors_name_the_dimension():
    with pytest.raises(ContractError, match="channel"):
        tc.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ContractError, match="height"):
        tc.conv2d(Tensor(np.zeros((1, 2, 9))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ContractError, match="stride"):
        tc.conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), finite, finite)
def test_conv_is_linear_in_input(seed, a, b):
    g = np.random.default_rng(seed)
    x, y, k = g.normal(size=(2, 5, 5)), g.normal(size=(2, 5, 5)), g.normal(size=(3, 2, 3, 3))
    conv = lambda v: tc.conv2d(Tensor(v), Tensor(k), padding=1).data
    np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), atol=1e-9)


# --- pointwise and pooling ----------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(tc.relu(Tensor(-np.ones(4))).data, np.zeros(4))


def test_relu_subgradient():
    x = Parameter(np.array([-1.0, 2.0]))
    tc.backward(tc.tsum(tc.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_gradient_at_zero_is_zero():
    x = Parameter(np.array([0.0]))
    tc.backward(tc.tsum(tc.relu(x)))
    assert x.grad[0] == 0.0


@pytest.mark.parametrize("h,w", [(1, 1), (3, 7), (16, 16)])
def test_gap_constant(h, w):
    out = tc.global_average_pool(Tensor(np.full((2, h, w), 0.3)))
    assert out.shape == (2,)
    np.testing.assert_allclose(out.data, 0.3, rtol=0, atol=1e-15)


def test_gap_mean_example():
    assert tc.global_average_pool(Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))).data[0] == 1.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gap_invariant_to_spatial_permutation(seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=(3, 4, 5))
    perm = g.permutation(20)
    xp = x.reshape(3, 20)[:, perm].reshape(3, 4, 5)
    np.testing.assert_allclose(tc.global_average_pool(Tensor(xp)).data, tc.global_average_pool(Tensor(x)).data,
                               atol=1e-14)


def test_affine_examples():
    x = np.array([2.0, 3.0])
    np.testing.assert_array_equal(tc.affine(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x)
    assert tc.affine(Tensor(x), Tensor([[1.0, 1.0]]), Tensor([0.0])).data.tolist() == [5.0]
    np.testing.assert_array_equal(tc.affine(Tensor(x), Tensor(np.zeros((3, 2))), Tensor([1.0, 2, 3])).data,
                                  [1, 2, 3])


def test_l2_normalize_examples():
    np.testing.assert_allclose(tc.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(tc.l2_normalize(Tensor(u)).data, u)
    with pytest.raises(DegenerateInputError):
        tc.l2_normalize(Tensor([0.0, 0.0]))


def test_cosine_examples():
    assert tc.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert tc.cosine_similarity(Tensor([1.0, 2.0]), Tensor([2.0, 4.0])).item() == pytest.approx(1.0, abs=1e-15)
    assert tc.cosine_similarity(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item() == pytest.approx(0.70711, abs=1e-5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-5, 5)), arrays(np.float64, 4, elements=st.floats(-5, 5)),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant_and_bounded(u, v, a, b):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    c = tc.cosine_similarity(Tensor(u), Tensor(v)).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert tc.cosine_similarity(Tensor(a * u), Tensor(b * v)).item() == pytest.approx(c, abs=1e-12)


# --- reflect padding ---------------------------------------------------------

def test_pad_reflect_matches_numpy():
    x = np.arange(12.0).reshape(1, 3, 4)
    np.testing.assert_array_equal(tc.pad2d(Tensor(x), 2).data, np.pad(x, ((0, 0), (2, 2), (2, 2)), mode="reflect"))


def test_pad_reflect_too_small():
    with pytest.raises(ContractError):
        tc.pad2d(Tensor(np.zeros((1, 2, 2))), 2)


# --- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Parameter(np.zeros((2, 3, 4)))
    tc.backward(tc.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_rejects_non_scalar():
    x = Parameter(np.zeros(3))
    with pytest.raises(ContractError):
        tc.backward(tc.mul(x, 2.0))


def test_gradients_accumulate_over_reused_nodes():
    x = Parameter(np.array([1.5, -2.0]))
    y = tc.mul(x, x)
    tc.backward(tc.tsum(tc.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_cosine_gradient_against_constant():
    g = np.random.default_rng(3)
    c = Tensor(g.normal(size=6))
    assert tc.finite_difference_check(lambda u: tc.cosine_similarity(u, c), g.normal(size=6)) < 1e-4


def test_non_finite_outputs_raise():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        tc.mul(Tensor([1e300]), Tensor([1e300]))


# --- finite_difference_check ----------------------------------------------------

def test_fd_quadratic_is_exact():
    x = np.random.default_rng(4).normal(size=7)
    assert tc.finite_difference_check(lambda v: tc.tsum(tc.mul(v, v)), x, eps=1e-4) < 1e-6


def test_fd_constant_function_zero_error():
    assert tc.finite_difference_check(lambda v: tc.mul(tc.tsum(v), 0.0), np.ones(3)) == 0.0


def test_fd_detects_a_wrong_gradient():
    def broken(x):
        out = tc.mul(x, 2.0)
        out._backward = lambda g: tc._accum(x, g * 3.0)
        return tc.tsum(out)

    assert tc.finite_difference_check(broken, np.ones(3)) > 0.1


@pytest.mark.parametrize("case", gradcases.CASES, ids=lambda c: c.__name__[5:])
def test_gradients_match_finite_differences(case):
    g = np.random.default_rng(zlib.crc32(case.__name__.encode()))
    for _ in range(5):
        f, x = case(g)
        assert tc.finite_difference_check(f, x, eps=1e-5) < 1e-4


# --- RngStream --------------------------------------------------------------

def test_rng_child_streams_are_reproducible_and_distinct():
    r = RngStream(42)
    a = r.child("x").generator().random(5)
    np.testing.assert_array_equal(a, RngStream(42).child("x").generator().random(5))
    assert not np.array_equal(a, r.child("y").generator().random(5))
    assert not np.array_equal(a, RngStream(43).child("x").generator().random(5))


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(ContractError):
        RngStream(-1)
    with pytest.raises(ContractError):
        RngStream(2**64)


def test_parameter_grad_starts_at_zero():
    p = Parameter(np.ones((2, 2)))
    np.testing.assert_array_equal(p.grad, np.zeros((2, 2)))
    assert p.trainable
    assert math.isclose(float(p.value.sum()), 4.0)
