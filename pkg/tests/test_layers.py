import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedmixstyle import layers as L
from fedmixstyle.errors import InvalidArgument

from oracles import central_difference, direct_conv2d, per_class_means, two_pass_moments

finite = st.floats(-10, 10, allow_nan=False, width=32)


# conv2d

def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 5)).astype(np.float32)
    y = L.conv2d(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(y, x)


def test_conv_all_ones_on_constant():
    x = np.full((1, 1, 6, 6), 0.7, np.float32)
    y = L.conv2d(x, np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
    assert y.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(y, 9 * 0.7, rtol=1e-6)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_loops(stride, padding):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    got = L.conv2d(x, w, b, stride, padding)
    want = direct_conv2d(x, w, b, stride, padding)
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-5


def test_conv_output_size_formula():
    x = np.zeros((1, 2, 16, 16), np.float32)
    y = L.conv2d(x, np.zeros((3, 2, 3, 3), np.float32), np.zeros(3, np.float32), 2, 1)
    assert y.shape == (1, 3, (16 + 2 - 3) // 2 + 1, 8)


def test_conv_shape_mismatch():
    with pytest.raises(InvalidArgument):
        L.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(InvalidArgument):
        L.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros(2))


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
def test_conv_backward_matches_finite_differences(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=L.conv2d(x, w, b, stride, padding).shape)

    def f():
        return float((L.conv2d(x, w, b, stride, padding) * g).sum())

    dx, dw, db = L.conv2d_backward(x, w, g, stride, padding)
    np.testing.assert_allclose(dx, central_difference(f, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, central_difference(f, w), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, central_difference(f, b), rtol=1e-6, atol=1e-8)


# batch_moments

def test_moments_constant():
    m, v = L.batch_moments(np.full((3, 2, 4, 4), 1.25, np.float32))
    np.testing.assert_array_equal(m, [1.25, 1.25])
    np.testing.assert_array_equal(v, [0, 0])


def test_moments_symmetric_pm_one():
    x = np.ones((2, 1, 2, 2), np.float32)
    x[0] = -1
    m, v = L.batch_moments(x)
    assert m[0] == 0 and v[0] == 1


def test_moments_match_two_pass_oracle():
    x = (np.random.default_rng(0).normal(size=(6, 3, 5, 5)) * 3 + 2).astype(np.float32)
    m, v = L.batch_moments(x)
    om, ov = two_pass_moments(x)
    assert np.all(np.abs(m - om) / np.abs(om) < 1e-5)
    assert np.all(np.abs(v - ov) / ov < 1e-5)


def test_moments_empty():
    with pytest.raises(InvalidArgument):
        L.batch_moments(np.zeros((0, 2, 3, 3)))


# bn_forward

@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (2, 3, 2, 2), elements=finite))
def test_bn_identity(x):
    c = 3
    y = L.bn_forward(x, np.zeros(c, np.float32), np.ones(c, np.float32), np.ones(c, np.float32),
                     np.zeros(c, np.float32), 0.0)
    np.testing.assert_array_equal(y, x)


def test_bn_zero_gamma_gives_beta():
    x = np.random.default_rng(0).normal(size=(2, 2, 3, 3)).astype(np.float32)
    beta = np.array([0.5, -2], np.float32)
    y = L.bn_forward(x, np.zeros(2, np.float32), np.ones(2, np.float32), np.zeros(2, np.float32), beta, 1e-5)
    np.testing.assert_array_equal(y[:, 0], 0.5)
    np.testing.assert_array_equal(y[:, 1], -2)


def test_bn_hand_arithmetic():
    x = np.full((1, 1, 1, 1), 2.0)
    one = np.ones(1)
    y = L.bn_forward(x, one, 3 * one, 2 * one, one, 1.0)
    assert y.item() == 2.0


def test_bn_negative_variance():
    with pytest.raises(InvalidArgument):
        L.bn_forward(np.zeros((1, 1, 1, 1)), np.zeros(1), -np.ones(1), np.ones(1), np.zeros(1), 1e-5)


# nearest-centroid head

def test_logits_prototype_match():
    protos = np.array([[1.0, 2.0], [0.0, 0.0], [-3, 1]], np.float32)
    logits = L.nearest_centroid_logits(protos[2:3].copy(), protos, 1.0)
    assert np.argmax(logits[0]) == 2 and logits[0, 2] == 0


def test_logits_equidistant():
    logits = L.nearest_centroid_logits(np.zeros((1, 2)), np.array([[1.0, 0], [0, -1.0]]), 0.5)
    assert logits[0, 0] == logits[0, 1]


def test_logits_hand_arithmetic():
    logits = L.nearest_centroid_logits(np.zeros((1, 2)), np.array([[1.0, 0], [0, 2.0]]), 1.0)
    np.testing.assert_array_equal(logits, [[-1, -4]])


def test_logits_errors():
    with pytest.raises(InvalidArgument):
        L.nearest_centroid_logits(np.zeros((1, 2)), np.zeros((2, 3)), 1.0)
    with pytest.raises(InvalidArgument):
        L.nearest_centroid_logits(np.zeros((1, 2)), np.zeros((2, 2)), 0.0)


def test_logit_head_backward():
    rng = np.random.default_rng(5)
    f, p = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    g = rng.normal(size=(4, 5))

    def loss():
        return float((L.nearest_centroid_logits(f, p, 0.7) * g).sum())

    df, dp = L.nearest_centroid_backward(f, p, 0.7, g)
    np.testing.assert_allclose(df, central_difference(loss, f), rtol=1e-6)
    np.testing.assert_allclose(dp, central_difference(loss, p), rtol=1e-6)


# cross-entropy

@pytest.mark.parametrize("n_classes", [2, 5, 10])
def test_ce_uniform(n_classes):
    loss, _ = L.cross_entropy(np.zeros((3, n_classes)), [0, 1, 1])
    assert math.isclose(loss, math.log(n_classes), rel_tol=1e-12)


def test_ce_saturation():
    logits = np.zeros((1, 4), np.float32)
    logits[0, 2] = 20
    loss, _ = L.cross_entropy(logits, [2])
    assert loss < 1e-3


def test_ce_gradient_finite_differences():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(6, 4)) * 3
    labels = rng.integers(0, 4, 6)
    _, grad = L.cross_entropy(logits, labels)
    num = central_difference(lambda: L.cross_entropy(logits, labels)[0], logits, h=1e-5)
    assert np.max(np.abs(grad - num) / np.maximum(np.abs(num), 1e-12)) < 1e-4


def test_ce_label_out_of_range():
    with pytest.raises(InvalidArgument):
        L.cross_entropy(np.zeros((2, 3)), [0, 3])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_ce_shift_invariance(logits, shift):
    labels = [0, 3, 1]
    l1, g1 = L.cross_entropy(logits, labels)
    l2, g2 = L.cross_entropy(logits + shift, labels)
    assert math.isclose(l1, l2, rel_tol=1e-9, abs_tol=1e-9)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


# prototypes

def test_prototypes_singletons():
    f = np.array([[1, 2], [3, 4], [5, 6]], np.float32)
    np.testing.assert_array_equal(L.init_prototypes(f, [0, 1, 2], 3), f)


def test_prototypes_hand():
    p = L.init_prototypes(np.array([[0.0, 0], [2, 2]]), [0, 0], 1)
    np.testing.assert_array_equal(p, [[1, 1]])


def test_prototypes_match_accumulation_oracle():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(40, 6))
    labels = rng.integers(0, 4, 40)
    labels[:4] = np.arange(4)
    np.testing.assert_array_equal(L.init_prototypes(f, labels, 4), per_class_means(f, labels, 4))


def test_prototypes_empty_class():
    with pytest.raises(InvalidArgument):
        L.init_prototypes(np.zeros((2, 3)), [0, 0], 2)
