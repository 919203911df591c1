import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from dogseg.oracles import (
    FiniteDiffSpec,
    bce_reference,
    conv2d_reference,
    convlstm_step_reference,
    finite_diff_gradient,
    masked_average_pool_reference,
    relative_error,
)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 7), st.integers(2, 7), st.sampled_from([1, 3]))
def test_conv_reference_agrees_with_scipy(seed, h, w, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(h, w))
    kern = rng.normal(size=(k, k))
    np.testing.assert_allclose(conv2d_reference(x, kern, "zeros"),
                               ndimage.correlate(x, kern, mode="constant"), atol=1e-12)
    np.testing.assert_allclose(conv2d_reference(x, kern, "reflect"),
                               ndimage.correlate(x, kern, mode="mirror"), atol=1e-12)


def test_conv_reference_multichannel_bias():
    x = np.ones((2, 3, 3))
    k = np.ones((1, 2, 3, 3))
    out = conv2d_reference(x, k, bias=[0.5])
    assert out[0, 1, 1] == 18.5
    assert out[0, 0, 0] == 8.5


def test_conv_reference_rejects_bad_shapes():
    with pytest.raises(ValueError):
        conv2d_reference(np.ones((2, 3, 3)), np.ones((1, 1, 3, 3)))
    with pytest.raises(ValueError):
        conv2d_reference(np.ones((3, 3)), np.ones((2, 2)))


def test_map_reference():
    f = np.arange(8.0).reshape(2, 2, 2)
    assert np.allclose(masked_average_pool_reference(f, [[1, 0], [0, 1]]), [1.5, 5.5])
    with pytest.raises(ValueError):
        masked_average_pool_reference(f, np.zeros((2, 2)))


def test_bce_reference_half():
    assert bce_reference([0.5, 0.5], [0, 1]) == pytest.approx(np.log(2), abs=1e-15)


def test_convlstm_reference_zero_weights():
    z = {g: np.zeros((1, 1, 3, 3)) for g in "ifoc"}
    b = {g: np.zeros(1) for g in "ifoc"}
    wc = {g: np.zeros(1) for g in "ifo"}
    h, c = convlstm_step_reference(np.ones((1, 2, 2)), np.zeros((1, 2, 2)), np.full((1, 2, 2), 2.0), z, z, wc, b)
    assert np.allclose(c, 1.0) and np.allclose(h, 0.5 * np.tanh(1.0))


def test_finite_differences_on_quadratic():
    a = np.array([[2.0, 1.0], [1.0, 3.0]])
    x0 = np.array([0.3, -0.7])
    g = finite_diff_gradient(lambda x: 0.5 * x @ a @ x, x0)
    assert relative_error(g, a @ x0) < 1e-9
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore", divide="ignore"):
        finite_diff_gradient(lambda x: np.log(x[0]), np.array([0.0]))
    with pytest.raises(ValueError):
        FiniteDiffSpec(epsilon=0)


def test_relative_error():
    assert relative_error([1, 0], [1, 0]) == 0.0
    assert relative_error([0, 0], [0, 0]) == 0.0
    assert relative_error([1, 0], [0, 1]) == pytest.approx(np.sqrt(2))
