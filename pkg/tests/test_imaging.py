import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsra import imaging
from bsra.imaging import ImageFormatError


def test_netpbm_round_trip(rng):
    for shape in ((5, 7), (4, 3, 3), (1, 1)):
        img = rng.integers(0, 256, shape).astype(np.uint8)
        np.testing.assert_array_equal(imaging.decode_netpbm(imaging.encode_netpbm(img)), img)


def test_netpbm_comments():
    buf = b"P5\n# made by hand\n3 # width\n2\n255\n" + bytes(range(6))
    np.testing.assert_array_equal(imaging.decode_netpbm(buf), [[0, 1, 2], [3, 4, 5]])


@pytest.mark.parametrize("buf, msg", [
    (b"P5\n2 2\n65535\n" + bytes(8), "max value"),
    (b"P2\n2 2\n255\n0 0 0 0", "unsupported"),
    (b"P5\n2 2\n255\n" + bytes(3), "raster"),
    (b"P5\n2", "truncated"),
])
def test_netpbm_errors(buf, msg):
    with pytest.raises(ImageFormatError, match=msg):
        imaging.decode_netpbm(buf)


def test_read_png_via_pillow(tmp_path, rng):
    from PIL import Image
    img = rng.integers(0, 256, (6, 5, 3)).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "a.png")
    np.testing.assert_array_equal(imaging.read_image(tmp_path / "a.png"), img)


def test_y_examples():
    assert imaging.rgb_to_y(0, 0, 0) == 16
    assert imaging.rgb_to_y(255, 255, 255) == 235
    assert imaging.rgb_to_y(128, 128, 128) == 126


def test_ycbcr_round_trip(rng):
    img = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    back = imaging.ycbcr_to_rgb(imaging.rgb_to_ycbcr(img))
    assert np.abs(back.astype(int) - img).max() <= 1


def test_cubic_kernel_values():
    np.testing.assert_allclose(imaging.cubic([0, 0.5, 1, 1.5, 2, 3]), [1, 0.5625, 0, -0.0625, 0, 0])
    xs = np.linspace(-0.999, 0.999, 41)
    sums = sum(imaging.cubic(xs + k) for k in range(-3, 4))
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


@given(st.integers(0, 255), st.integers(2, 20), st.integers(2, 20))
def test_constant_image_is_preserved(v, h, w):
    img = np.full((2 * h, 2 * w), v, np.uint8)
    assert np.all(imaging.bicubic_resize(img, 2) == v)
    assert np.all(imaging.bicubic_resize(img, 0.5) == v)


def test_upscale_impulse_matches_kernel_oracle():
    n, i0, j0 = 12, 5, 6
    img = np.zeros((n, n))
    img[i0, j0] = 255.0
    out = imaging.resize_float(img, 2)
    for y in range(3, 2 * n - 3):
        for x in range(3, 2 * n - 3):
            uy, ux = (y + 1) / 2 + 0.25, (x + 1) / 2 + 0.25
            expect = 255.0 * imaging.cubic(uy - (i0 + 1)) * imaging.cubic(ux - (j0 + 1))
            assert math.isclose(out[y, x], expect, abs_tol=1e-9)


def test_downscale_interior_close_to_pillow(rng):
    from PIL import Image
    base = rng.integers(0, 256, (8, 8)).astype(np.uint8)
    img = np.kron(base, np.ones((8, 8))).astype(np.uint8)
    ours = imaging.bicubic_resize(img, 0.5).astype(int)
    pil = np.asarray(Image.fromarray(img).resize((32, 32), Image.BICUBIC)).astype(int)
    assert np.abs(ours[4:-4, 4:-4] - pil[4:-4, 4:-4]).max() <= 4


def test_bicubic_bad_scale():
    with pytest.raises(ValueError):
        imaging.bicubic_resize(np.zeros((4, 4), np.uint8), 3)


def test_psnr_examples():
    a = np.zeros((10, 10))
    assert imaging.psnr(a, a) == math.inf
    assert imaging.psnr(a, np.full((10, 10), 255)) == 0.0
    b = a.copy()
    b[0, 0] = 255
    assert imaging.psnr(a, b, shave=1) == math.inf
    assert math.isclose(imaging.psnr(a, b), 20.0)
    with pytest.raises(ValueError):
        imaging.psnr(a, a[:5])
    with pytest.raises(ValueError):
        imaging.psnr(a, a, shave=5)


@settings(max_examples=20)
@given(st.integers(0, 2 ** 31))
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 256, (2, 9, 9))
    assert imaging.psnr(a, b, 2) == imaging.psnr(b, a, 2)


def test_degrade_protocol(rng):
    hr, lr = imaging.degrade(rng.integers(0, 256, (21, 17)).astype(np.uint8))
    assert hr.shape == (20, 16) and lr.shape == (10, 8)
