"""Image I/O, colour conversion, bicubic resampling and PSNR."""
from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


# -- netpbm -------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    pos = 0
    fields = []
    while len(fields) < 4:
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError("truncated netpbm header")
        fields.append(m.group(2))
        pos = m.end()
    magic, w, h, maxval = fields
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported netpbm type {magic!r} (need P5 or P6)")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise ImageFormatError(f"bad netpbm header: {e}") from None
    if maxval != 255:
        raise ImageFormatError(f"max value must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad dimensions {w}x{h}")
    # exactly one whitespace byte separates the header from the raster
    return magic, w, h, maxval, pos + 1


def decode_netpbm(buf: bytes) -> np.ndarray:
    """P5 -> (H, W) uint8, P6 -> (H, W, 3) uint8."""
    magic, w, h, _, start = _header(buf)
    planes = 3 if magic == b"P6" else 1
    n = w * h * planes
    raster = buf[start:start + n]
    if len(raster) != n:
        raise ImageFormatError(f"raster has {len(raster)} bytes, expected {n}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if planes == 3 else arr.reshape(h, w)


def encode_netpbm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 samples, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode array of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_image(path) -> np.ndarray:
    """Read P5/P6; other formats go through Pillow when it is installed."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return decode_netpbm(data)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise ImageFormatError(f"{path}: not a P5/P6 file") from None
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8)


def write_image(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_netpbm(img))


IMAGE_SUFFIXES = {".pgm", ".ppm", ".pnm", ".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}


# -- colour ---------------------------------------------------------------------

_RGB2YCC = np.array([
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
]) / 255.0
_YCC_OFFSET = np.array([16.0, 128.0, 128.0])


def _round_u8(x, lo: int = 0, hi: int = 255) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x, np.float64) + 0.5), lo, hi).astype(np.uint8)


def rgb_to_y(r, g, b) -> np.ndarray:
    """ITU-R BT.601 studio-range luma, rounded and clipped to [16, 235]."""
    r, g, b = (np.asarray(p, np.float64) for p in (r, g, b))
    if not (r.shape == g.shape == b.shape):
        raise ValueError(f"plane shapes differ: {r.shape}, {g.shape}, {b.shape}")
    y = 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    return _round_u8(y, 16, 235)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """Float YCbCr (unrounded) of an (H, W, 3) image."""
    return np.asarray(rgb, np.float64) @ _RGB2YCC.T + _YCC_OFFSET


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    rgb = (np.asarray(ycc, np.float64) - _YCC_OFFSET) @ np.linalg.inv(_RGB2YCC).T
    return _round_u8(rgb)


def luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8)
    return rgb_to_y(img[..., 0], img[..., 1], img[..., 2])


# -- bicubic --------------------------------------------------------------------

CUBIC_A = -0.5


def cubic(x, a: float = CUBIC_A):
    """Keys cubic convolution kernel."""
    ax = np.abs(np.asarray(x, np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _contributions(in_len: int, out_len: int, scale: float):
    """Sample weights and (edge-replicated) source indices along one axis.

    Downscaling stretches the kernel by 1/scale, which low-pass filters the
    input the way common reference resizers do.
    """
    if scale < 1:
        width = 4.0 / scale

        def kernel(x):
            return scale * cubic(scale * x)
    else:
        width = 4.0
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = kernel(u[:, None] - idx)
    wts /= wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.int64) - 1
    return wts, idx


def _resize_axis(a: np.ndarray, axis: int, out_len: int, scale: float) -> np.ndarray:
    wts, idx = _contributions(a.shape[axis], out_len, scale)
    moved = np.moveaxis(a, axis, 0)
    out = np.einsum("ot,ot...->o...", wts, moved[idx])
    return np.moveaxis(out, 0, axis)


def resize_float(img, scale: float, out_shape: tuple[int, int] | None = None) -> np.ndarray:
    a = np.asarray(img, np.float64)
    h, w = a.shape[:2]
    oh, ow = out_shape or (int(math.ceil(h * scale)), int(math.ceil(w * scale)))
    a = _resize_axis(a, 0, oh, scale)
    return _resize_axis(a, 1, ow, scale)


def bicubic_resize(img: np.ndarray, scale: float) -> np.ndarray:
    """Bicubic x2 or x1/2 of an 8-bit plane (or HxWx3 image), round-half-up to 8 bits."""
    if scale not in (2, 0.5):
        raise ValueError(f"scale must be 2 or 1/2, got {scale}")
    return _round_u8(resize_float(img, scale))


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


# -- PSNR -----------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """10 log10(255^2 / MSE) with ``shave`` border pixels removed; inf when identical."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if shave < 0 or 2 * shave >= min(h, w):
        raise ValueError(f"shave {shave} too large for {h}x{w}")
    if shave:
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def degrade(hr_y: np.ndarray, scale: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation protocol: mod-crop the HR luma and bicubic-downscale it. Returns (hr, lr)."""
    hr = modcrop(hr_y, scale)
    return hr, bicubic_resize(hr, 1 / scale)
