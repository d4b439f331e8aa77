import numpy as np
import pytest

from hullsight import ops
from hullsight.ops import ConvSpec, ShapeError

from gradcheck import check_primitive
from oracles import naive_conv2d, naive_deform, naive_depthwise


def test_conv_counts_overlaps():
    x = np.ones((1, 1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    out = ops.conv2d(x, w, None, ConvSpec(1, 1, padding=1, bias=False))
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == 4


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 1, 6, 7))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(x, w, None, ConvSpec(1, 1)), x)


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(ops.conv2d(x, w, b, ConvSpec(3, 4)), naive_conv2d(x, w, b), atol=1e-6)


def test_conv_strided_matches_naive():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 7, 9))
    w = rng.normal(size=(3, 2, 3, 3))
    got = ops.conv2d(x, w, None, ConvSpec(2, 3, stride=2, padding=1, bias=False))
    np.testing.assert_allclose(got, naive_conv2d(x, w, None, stride=2, pad=1), atol=1e-9)


def test_conv_output_extent_law():
    spec = ConvSpec(1, 1, (3, 3), stride=2, padding=0)
    assert spec.output_hw(7, 8) == (3, 3)


def test_conv_errors():
    with pytest.raises(ShapeError):
        ops.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), None, ConvSpec(3, 1))
    with pytest.raises(ShapeError):
        ops.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)), None, ConvSpec(1, 1, (5, 5), padding=0))


def test_depthwise_single_channel_equals_conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 1, 6, 6))
    w = rng.normal(size=(1, 1, 3, 3))
    np.testing.assert_allclose(ops.depthwise_conv2d(x, w, None, ConvSpec(1, 1)),
                               ops.conv2d(x, w, None, ConvSpec(1, 1)), atol=1e-12)


def test_depthwise_identity_kernels():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 4, 5, 5))
    w = np.zeros((4, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.depthwise_conv2d(x, w, None, ConvSpec(4, 4)), x)


def test_depthwise_matches_naive():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(ops.depthwise_conv2d(x, w, b, ConvSpec(3, 3)),
                               naive_depthwise(x, w, b), atol=1e-6)


def test_depthwise_channel_isolation():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    base = ops.depthwise_conv2d(x, w, None, ConvSpec(3, 3))
    y = x.copy()
    y[:, [0, 2]] += rng.normal(size=(1, 2, 6, 6))
    np.testing.assert_array_equal(ops.depthwise_conv2d(y, w, None, ConvSpec(3, 3))[:, 1], base[:, 1])


@pytest.mark.parametrize("seed", range(20))
def test_deform_zero_offsets_is_conv(seed):
    rng = np.random.default_rng(100 + seed)
    c, o = rng.integers(1, 4, size=2)
    h, w = rng.integers(3, 9, size=2)
    x = rng.normal(size=(2, c, h, w))
    wt = rng.normal(size=(o, c, 3, 3))
    b = rng.normal(size=o)
    spec = ConvSpec(int(c), int(o))
    off = np.zeros((2, 18, h, w))
    np.testing.assert_allclose(ops.deform_conv2d(x, wt, off, b, spec), ops.conv2d(x, wt, b, spec), atol=1e-6)


def test_deform_integer_shift_equals_shifted_conv():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 8, 8))
    w = rng.normal(size=(3, 2, 3, 3))
    off = np.zeros((1, 18, 8, 8))
    off[:, 0::2] = 1.0
    got = ops.deform_conv2d(x, w, off, None, ConvSpec(2, 3, bias=False))
    shifted = np.zeros_like(x)
    shifted[:, :, :-1] = x[:, :, 1:]
    ref = ops.conv2d(shifted, w, None, ConvSpec(2, 3, bias=False))
    np.testing.assert_allclose(got[:, :, 1:-2, 1:-1], ref[:, :, 1:-2, 1:-1], atol=1e-12)


def test_deform_matches_direct_formula_at_fractional_offsets():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    off = rng.uniform(-1.7, 1.7, size=(2, 18, 5, 6))
    np.testing.assert_allclose(ops.deform_conv2d(x, w, off, b, ConvSpec(2, 3)),
                               naive_deform(x, w, off, b), atol=1e-10)


def test_deform_rejects_bad_offset_channels():
    with pytest.raises(ShapeError):
        ops.deform_conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros((1, 9, 4, 4)),
                          None, ConvSpec(1, 1))


def test_deform_offset_gradient_fractional():
    rng = np.random.default_rng(9)
    # keep offsets away from integer sampling positions, where bilinear is kinked
    off = rng.uniform(0.1, 0.4, size=(1, 18, 4, 4)) * rng.choice([-1, 1], size=(1, 18, 4, 4))
    err = check_primitive(lambda g, r: g.deform_conv2d(r["x"], r["w"], r["o"], None, ConvSpec(2, 2, bias=False)),
                          {"x": (1, 2, 4, 4), "w": (2, 2, 3, 3)}, rng, values={"o": off})
    assert err <= 1e-3


def test_pixel_shuffle_shape_and_index_law():
    x = np.arange(16.0).reshape(1, 4, 2, 2)
    y = ops.pixel_shuffle(x, 2)
    assert y.shape == (1, 1, 4, 4)
    for h in range(2):
        for w in range(2):
            for dy in range(2):
                for dx in range(2):
                    assert y[0, 0, h * 2 + dy, w * 2 + dx] == x[0, dy * 2 + dx, h, w]


def test_pixel_unshuffle_shape():
    assert ops.pixel_unshuffle(np.zeros((1, 1, 4, 4)), 2).shape == (1, 4, 2, 2)


def test_shuffle_r1_identity():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
    np.testing.assert_array_equal(ops.pixel_shuffle(x, 1), x)
    np.testing.assert_array_equal(ops.pixel_unshuffle(x, 1), x)


@pytest.mark.parametrize("seed", range(5))
def test_shuffle_round_trip_bit_exact(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 8, 3, 5))
    np.testing.assert_array_equal(ops.pixel_unshuffle(ops.pixel_shuffle(x, 2), 2), x)
    y = rng.normal(size=(2, 3, 6, 4))
    np.testing.assert_array_equal(ops.pixel_shuffle(ops.pixel_unshuffle(y, 2), 2), y)


def test_shuffle_errors():
    with pytest.raises(ShapeError):
        ops.pixel_shuffle(np.zeros((1, 3, 2, 2)), 2)
    with pytest.raises(ShapeError):
        ops.pixel_unshuffle(np.zeros((1, 1, 3, 4)), 2)


def test_relu_concat_add():
    np.testing.assert_array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    a, b = np.zeros((1, 2, 3, 3)), np.ones((1, 3, 3, 3))
    cat = ops.concat([a, b])
    assert cat.shape == (1, 5, 3, 3)
    np.testing.assert_array_equal(cat[:, 2:], b)
    x = np.random.default_rng(1).normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(ops.add(x, np.zeros_like(x)), x)
    with pytest.raises(ShapeError):
        ops.concat([a, np.zeros((1, 1, 2, 3))])
    with pytest.raises(ShapeError):
        ops.add(a, b)


def test_box_downscale():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(ops.box_downscale(x, 2)[0, 0], [[2.5, 4.5], [10.5, 12.5]])
