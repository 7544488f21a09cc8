"""Bit-exact functional model of the pixel-attention SR network.

This is the golden reference the cycle simulator is checked against. It is
written for clarity with whole-tensor numpy ops; it has no notion of PE
arrays, strips or cycles.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qarith
from .qarith import ACC, ACT, WEIGHT, SatCounter


class ConfigError(ValueError):
    pass


@dataclass
class FeatureMap:
    """Channel-major (C, H, W) tile of raw activations in the ACT format."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConfigError(f"feature map must be non-empty (C, H, W), got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_real(cls, x) -> "FeatureMap":
        return cls(qarith.quantize(np.asarray(x, dtype=np.float64), ACT))

    @classmethod
    def from_pixels(cls, plane) -> "FeatureMap":
        """8-bit luma plane (H, W) -> 1-channel map holding the pixel values."""
        plane = np.asarray(plane, dtype=np.int64)
        return cls((plane << ACT.frac_bits)[None])

    def to_real(self) -> np.ndarray:
        return self.data / ACT.scale

    def to_pixels(self) -> np.ndarray:
        """Round-half-up to integers and clip to [0, 255]; expects one channel."""
        return np.clip(qarith.round_shift(self.data[0], ACT.frac_bits), 0, 255).astype(np.uint8)


@dataclass
class LayerWeights:
    name: str
    kind: str  # "conv" | "transpose_conv"
    taps: np.ndarray  # raw WEIGHT values, [out_ch][in_ch][kh][kw]

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.int64)
        if self.kind not in ("conv", "transpose_conv"):
            raise ConfigError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.taps.ndim != 4:
            raise ConfigError(f"{self.name}: taps must be 4-D, got {self.taps.shape}")

    @property
    def out_ch(self) -> int:
        return self.taps.shape[0]

    @property
    def in_ch(self) -> int:
        return self.taps.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.taps.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.taps.shape[3]

    @property
    def stride(self) -> int:
        return 2 if self.kind == "transpose_conv" else 1

    @property
    def tap_count(self) -> int:
        return self.taps.size


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    num_cpab: int = 2
    head_kernel: int = 5
    cpab_pw_kernel: int = 1
    cpab_sp_kernel: int = 3
    tail_kernel: int = 9
    scale: int = 2

    def layer_shapes(self) -> list[tuple[str, str, tuple[int, int, int, int]]]:
        """(name, kind, (out, in, kh, kw)) in execution order."""
        c = self.channels
        shapes = [("head", "conv", (c, 1, self.head_kernel, self.head_kernel))]
        for i in range(self.num_cpab):
            pw, sp = self.cpab_pw_kernel, self.cpab_sp_kernel
            shapes += [
                (f"cpab{i}.pw", "conv", (c, c, pw, pw)),
                (f"cpab{i}.mask", "conv", (c, c, pw, pw)),
                (f"cpab{i}.sp", "conv", (c, c, sp, sp)),
            ]
        shapes.append(("tail", "transpose_conv", (1, c, self.tail_kernel, self.tail_kernel)))
        return shapes

    def input_radius(self) -> int:
        """Receptive-field radius, in input pixels, of the conv stack before the tail."""
        return self.head_kernel // 2 + self.num_cpab * (self.cpab_sp_kernel // 2)

    def tail_pad(self) -> int:
        return (self.tail_kernel - 1) // 2


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, _, shape in config.layer_shapes())


@dataclass
class Model:
    config: ModelConfig
    layers: dict[str, LayerWeights] = field(default_factory=dict)

    def __post_init__(self):
        for name, kind, shape in self.config.layer_shapes():
            lw = self.layers.get(name)
            if lw is None:
                raise ConfigError(f"missing weights for layer {name}")
            if lw.kind != kind or lw.taps.shape != shape:
                raise ConfigError(f"layer {name}: expected {kind} {shape}, got {lw.kind} {lw.taps.shape}")

    @classmethod
    def from_real(cls, config: ModelConfig, weights: dict[str, np.ndarray]) -> "Model":
        layers = {
            name: LayerWeights(name, kind, qarith.quantize(np.asarray(weights[name], dtype=np.float64), WEIGHT))
            for name, kind, _ in config.layer_shapes()
            if name in weights
        }
        return cls(config, layers)

    @classmethod
    def zeros(cls, config: ModelConfig = ModelConfig()) -> "Model":
        return cls(config, {n: LayerWeights(n, k, np.zeros(s, np.int64)) for n, k, s in config.layer_shapes()})

    @classmethod
    def random(cls, rng: np.random.Generator, config: ModelConfig = ModelConfig(), gain: float = 1.0) -> "Model":
        """He-style random taps, quantized; for smoke runs and fuzzing."""
        layers = {}
        for name, kind, shape in config.layer_shapes():
            fan_in = shape[1] * shape[2] * shape[3]
            if kind == "transpose_conv":
                fan_in = max(1, fan_in // 4)
            w = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)
            layers[name] = LayerWeights(name, kind, qarith.quantize(w, WEIGHT))
        return cls(config, layers)

    def param_count(self) -> int:
        return sum(lw.tap_count for lw in self.layers.values())

    def cpab(self, i: int) -> tuple[LayerWeights, LayerWeights, LayerWeights]:
        return self.layers[f"cpab{i}.pw"], self.layers[f"cpab{i}.mask"], self.layers[f"cpab{i}.sp"]


def _correlate(x: np.ndarray, taps: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    """Exact integer cross-correlation; pad = (top, bottom, left, right) zeros."""
    top, bottom, left, right = pad
    _, kh, kw = taps.shape[1:]
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))  # C, H, W, kh, kw
    # int64 einsum is exact; magnitudes stay below 2**38
    return np.einsum("chwij,ocij->ohw", win, taps, optimize=True)


def conv2d(x: FeatureMap, w: LayerWeights, counter: SatCounter | None = None) -> FeatureMap:
    if w.kind != "conv":
        raise ConfigError(f"{w.name}: conv2d needs a conv layer")
    if x.channels != w.in_ch:
        raise ConfigError(f"{w.name}: input has {x.channels} channels, layer expects {w.in_ch}")
    ph, pw = (w.kernel_h - 1) // 2, (w.kernel_w - 1) // 2
    acc = _correlate(x.data, w.taps, (ph, w.kernel_h - 1 - ph, pw, w.kernel_w - 1 - pw))
    acc = qarith.saturate(acc, ACC, counter)
    return FeatureMap(qarith.clamp255(acc, counter))


def attention_mask(x: FeatureMap, w_mask: LayerWeights, counter: SatCounter | None = None) -> np.ndarray:
    """Raw Q0.11 mask: sigmoid_d of the clamped 1x1 conv output."""
    return qarith.sigmoid_d(conv2d(x, w_mask, counter).data)


def apply_mask(x: FeatureMap, mask: np.ndarray) -> FeatureMap:
    if mask.shape != x.data.shape:
        raise ConfigError(f"mask shape {mask.shape} does not match features {x.data.shape}")
    return FeatureMap(qarith.attention_requant(qarith.mul_wa(mask, x.data)))


def pixel_attention(x: FeatureMap, w_mask: LayerWeights, counter: SatCounter | None = None) -> FeatureMap:
    if not (x.channels == w_mask.in_ch == w_mask.out_ch):
        raise ConfigError(f"{w_mask.name}: attention needs {x.channels}->{x.channels} 1x1 weights")
    return apply_mask(x, attention_mask(x, w_mask, counter))


def cpab_forward(x: FeatureMap, w1: LayerWeights, w_mask: LayerWeights, w3: LayerWeights,
                 counter: SatCounter | None = None) -> FeatureMap:
    h = conv2d(x, w1, counter)
    return conv2d(pixel_attention(h, w_mask, counter), w3, counter)


def transpose_phases(k: int, pad: int):
    """Split a stride-2 transposed conv into four ordinary correlations.

    Yields ``(py, px, ky_index, kx_index, (top, bottom, left, right))`` where
    ``ky_index``/``kx_index`` select (and order) the original kernel rows and
    columns forming the phase sub-kernel, and the padding tuple is the zero
    padding the correlation needs so that its output has the input's size.
    """
    def axis(parity):
        # output o = 2m + parity receives input i = m + d with kernel index 2d' form:
        # o = 2i - pad + kidx  ->  kidx = parity + pad - 2d
        ds = [d for d in range(-k, k + 1) if 0 <= parity + pad - 2 * d < k]
        ds.sort()
        kidx = [parity + pad - 2 * d for d in ds]
        return kidx, (-ds[0], ds[-1])

    for py in (0, 1):
        ky, (top, bottom) = axis(py)
        for px in (0, 1):
            kx, (left, right) = axis(px)
            yield py, px, ky, kx, (top, bottom, left, right)


def phase_kernel(taps: np.ndarray, ky, kx) -> np.ndarray:
    """Sub-kernel for one phase, reshaped to [out][in][kh][kw] correlation layout."""
    return taps[:, :, ky][:, :, :, kx]


def transpose_conv2d(x: FeatureMap, w: LayerWeights, counter: SatCounter | None = None) -> FeatureMap:
    """Stride-2 transposed conv, output exactly 2H x 2W.

    Scatter semantics: input (i, j) with tap (ky, kx) lands on output
    (2i + ky - p, 2j + kx - p), p = (k - 1) // 2. Computed as four phase
    correlations interleaved into the output grid.
    """
    if w.kind != "transpose_conv":
        raise ConfigError(f"{w.name}: transpose_conv2d needs a transpose_conv layer")
    if x.channels != w.in_ch:
        raise ConfigError(f"{w.name}: input has {x.channels} channels, layer expects {w.in_ch}")
    if w.kernel_h != w.kernel_w:
        raise ConfigError(f"{w.name}: square kernel required")
    k = w.kernel_h
    acc = np.zeros((w.out_ch, 2 * x.height, 2 * x.width), dtype=np.int64)
    for py, px, ky, kx, pad in transpose_phases(k, (k - 1) // 2):
        acc[:, py::2, px::2] = _correlate(x.data, phase_kernel(w.taps, ky, kx), pad)
    acc = qarith.saturate(acc, ACC, counter)
    return FeatureMap(qarith.clamp255(acc, counter))


def forward(x: FeatureMap, model: Model, counter: SatCounter | None = None) -> FeatureMap:
    if x.channels != 1:
        raise ConfigError(f"forward expects a 1-channel luma tile, got {x.channels} channels")
    f = conv2d(x, model.layers["head"], counter)
    for i in range(model.config.num_cpab):
        f = cpab_forward(f, *model.cpab(i), counter=counter)
    return transpose_conv2d(f, model.layers["tail"], counter)
