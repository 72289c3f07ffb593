import numpy as np
import pytest
from hypothesis import given, strategies as st

from condensenet.harness import best_scale_grid
from condensenet.quant import ActQuantizer, QuantError, binarize_weights, dequantize_weights, quantize_act

HW = ActQuantizer("hwgq2", delta=0.5)


def test_symmetric_filter():
    codes, scales = binarize_weights(np.array([[0.5, -0.5]]))
    assert codes.tolist() == [[True, False]]
    assert scales.tolist() == [0.5]
    assert dequantize_weights(codes, scales).tolist() == [[0.5, -0.5]]


def test_all_positive_filter():
    codes, scales = binarize_weights(np.array([[1.0, 1.0, 1.0]]))
    assert codes.all() and scales.tolist() == [1.0]


def test_sign_of_zero_is_plus_one():
    codes, _ = binarize_weights(np.array([[0.0, -1.0]]))
    assert codes.tolist() == [[True, False]]


def test_zero_filter_rejected():
    with pytest.raises(QuantError, match="full32"):
        binarize_weights(np.array([[1.0, 2.0], [0.0, 0.0]]))
    with pytest.raises(QuantError):
        binarize_weights(np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_mean_abs_scale_beats_grid_search(seed):
    w = np.random.default_rng(seed).normal(size=(4, 3, 3, 3))
    _, scales = binarize_weights(w)
    for c in range(4):
        s = float(scales[c])
        err = float(np.sum((w[c] - s * np.where(w[c] >= 0, 1, -1)) ** 2))
        grid = np.linspace(0.0, 3.0, 3001)
        _, grid_err = best_scale_grid(w[c], grid)
        assert err <= grid_err + 1e-6


@pytest.mark.parametrize("x,code", [(-1.0, 0), (0.0, 0), (10.0, 3), (0.74, 1), (0.76, 2), (0.25, 1), (0.2, 0)])
def test_hwgq_examples(x, code):
    assert quantize_act(x, HW) == code


def test_hwgq_idempotent_on_levels():
    for delta in (0.25, 0.5, 1.0):
        q = ActQuantizer("hwgq2", delta=delta)
        levels = q.dequantize(np.arange(4))
        assert quantize_act(levels, q).tolist() == [0, 1, 2, 3]


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=50), st.sampled_from([0.25, 0.5, 1.0]))
def test_hwgq_monotone_half_wave_saturating(xs, delta):
    q = ActQuantizer("hwgq2", delta=delta)
    x = np.sort(np.array(xs))
    codes = quantize_act(x, q).astype(int)
    assert (np.diff(codes) >= 0).all()
    assert (codes[x <= 0] == 0).all()
    assert codes.max() <= 3


def test_non_finite_rejected():
    for bad in (np.nan, np.inf):
        with pytest.raises(QuantError):
            quantize_act(np.array([1.0, bad]), HW)


def test_leaky_zero_slope_is_relu():
    x = np.linspace(-3, 3, 61).astype(np.float32)
    assert np.array_equal(quantize_act(x, ActQuantizer("leaky", slope=0.0)), quantize_act(x, ActQuantizer("relu")))


def test_pass_through_modes_keep_float32():
    x = np.array([-1.5, 2.0], dtype=np.float32)
    assert quantize_act(x, ActQuantizer("identity")).tolist() == [-1.5, 2.0]
    out = quantize_act(x, ActQuantizer("leaky", slope=0.1))
    assert out.dtype == np.float32 and out.tolist() == [np.float32(-0.15), 2.0]


def test_unknown_mode():
    with pytest.raises(QuantError):
        ActQuantizer("tanh")
