import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsra import hpan, qarith
from bsra.hpan import ConfigError, FeatureMap, LayerWeights, Model, ModelConfig, param_count
from oracles import conv_loops, conv_shift_add, reference_forward, transpose_scatter, transpose_zero_insertion


def rand_act(rng, shape, lim=255 << 8):
    return rng.integers(-lim, lim + 1, size=shape)


def rand_taps(rng, shape):
    return rng.integers(qarith.WEIGHT.raw_min, qarith.WEIGHT.raw_max + 1, size=shape)


def test_param_counts():
    assert param_count(ModelConfig()) == 25_920 == 800 + 2 * 11_264 + 2_592
    assert param_count(ModelConfig(num_cpab=1)) == 800 + 11_264 + 2_592
    assert param_count(ModelConfig(num_cpab=0)) == 800 + 2_592
    assert Model.zeros().param_count() == 25_920


def test_conv_constant_example():
    x = FeatureMap.from_real(np.ones((1, 3, 3)))
    w = LayerWeights("k", "conv", np.full((1, 1, 3, 3), 256))
    out = hpan.conv2d(x, w).to_real()[0]
    assert out[1, 1] == 9.0 and out[0, 0] == 4.0 and out[0, 1] == 6.0


def test_conv_clamps_large_sums():
    x = FeatureMap.from_real(np.full((4, 5, 5), 100.0))
    w = LayerWeights("k", "conv", np.full((2, 4, 1, 1), 256))
    c = qarith.SatCounter()
    out = hpan.conv2d(x, w, c).to_real()
    assert np.all(out == 255.0) and c.count == out.size


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loop_oracle(rng, k):
    x = rand_act(rng, (3, 7, 6))
    taps = rand_taps(rng, (2, 3, k, k))
    got = hpan.conv2d(FeatureMap(x), LayerWeights("k", "conv", taps)).data
    np.testing.assert_array_equal(got, qarith.clamp255(conv_loops(x, taps)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 20), st.integers(1, 20),
       st.sampled_from([1, 3, 5]), st.integers(0, 2 ** 31))
def test_conv_matches_shift_add_oracle(cin, cout, h, w, k, seed):
    rng = np.random.default_rng(seed)
    x = rand_act(rng, (cin, h, w))
    taps = rand_taps(rng, (cout, cin, k, k))
    got = hpan.conv2d(FeatureMap(x), LayerWeights("k", "conv", taps)).data
    np.testing.assert_array_equal(got, qarith.clamp255(conv_shift_add(x, taps)))
    assert np.abs(got).max() <= 255 << 8


def test_attention_zero_mask_weights_halve():
    rng = np.random.default_rng(3)
    x = rand_act(rng, (4, 6, 6))
    out = hpan.pixel_attention(FeatureMap(x), LayerWeights("m", "conv", np.zeros((4, 4, 1, 1))))
    np.testing.assert_array_equal(out.data, (x + 1) >> 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_attention_contracts(seed):
    rng = np.random.default_rng(seed)
    x = rand_act(rng, (8, 5, 7))
    out = hpan.pixel_attention(FeatureMap(x), LayerWeights("m", "conv", rand_taps(rng, (8, 8, 1, 1))))
    assert np.all(np.abs(out.data) <= np.abs(x))


def test_transpose_oracles_agree(rng):
    x = rand_act(rng, (3, 4, 5))
    taps = rand_taps(rng, (1, 3, 9, 9))
    np.testing.assert_array_equal(transpose_zero_insertion(x, taps), transpose_scatter(x, taps))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_transpose_matches_zero_insertion(cin, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rand_act(rng, (cin, h, w))
    taps = rand_taps(rng, (1, cin, 9, 9))
    got = hpan.transpose_conv2d(FeatureMap(x), LayerWeights("t", "transpose_conv", taps))
    assert got.data.shape == (1, 2 * h, 2 * w)
    np.testing.assert_array_equal(got.data, qarith.clamp255(transpose_zero_insertion(x, taps)))


def test_transpose_single_tap_places_pixel():
    x = np.zeros((1, 3, 3), np.int64)
    x[0, 1, 1] = 10 << 8
    taps = np.zeros((1, 1, 9, 9), np.int64)
    taps[0, 0, 4, 4] = 256
    out = hpan.transpose_conv2d(FeatureMap(x), LayerWeights("t", "transpose_conv", taps)).data[0]
    assert out[2, 2] == 10 << 8 and np.count_nonzero(out) == 1


@settings(max_examples=6, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2 ** 31))
def test_forward_shape_range_and_oracle(h, w, seed):
    rng = np.random.default_rng(seed)
    model = Model.random(rng)
    x = rng.integers(0, 256, size=(h, w)) << 8
    out = hpan.forward(FeatureMap(x[None]), model)
    assert out.data.shape == (1, 2 * h, 2 * w)
    assert np.abs(out.data).max() <= 255 << 8
    np.testing.assert_array_equal(out.data, reference_forward(x[None], model))


def test_forward_deterministic(model, rng):
    x = FeatureMap.from_pixels(rng.integers(0, 256, (12, 10)))
    a = hpan.forward(x, model)
    b = hpan.forward(x, model)
    np.testing.assert_array_equal(a.data, b.data)


def test_config_errors(model):
    with pytest.raises(ConfigError):
        hpan.forward(FeatureMap(np.zeros((2, 4, 4))), model)
    with pytest.raises(ConfigError):
        hpan.conv2d(FeatureMap(np.zeros((3, 4, 4))), LayerWeights("k", "conv", np.zeros((1, 2, 3, 3))))
    with pytest.raises(ConfigError):
        Model(ModelConfig(), {})
    with pytest.raises(ConfigError):
        FeatureMap(np.zeros((1, 0, 4)))


def test_pixels_round_trip(rng):
    px = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    np.testing.assert_array_equal(FeatureMap.from_pixels(px).to_pixels(), px)
