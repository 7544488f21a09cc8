"""Fixed-point arithmetic shared by the functional model and the simulator.

All values are carried as raw two's-complement integers (Python ints or
int64 numpy arrays) together with a :class:`QFormat`. Rounding is
round-half-up everywhere and overflow saturates; saturation is silent but
can be counted through a :class:`SatCounter`.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QFormat:
    int_bits: int
    frac_bits: int
    signed: bool = True

    @property
    def width(self) -> int:
        return int(self.signed) + self.int_bits + self.frac_bits

    @property
    def raw_min(self) -> int:
        return -(1 << (self.int_bits + self.frac_bits)) if self.signed else 0

    @property
    def raw_max(self) -> int:
        return (1 << (self.int_bits + self.frac_bits)) - 1

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    def __str__(self) -> str:
        prefix = "Q" if self.signed else "UQ"
        return f"{prefix}{self.int_bits}.{self.frac_bits}"


WEIGHT = QFormat(2, 8)       # 11-bit taps
ACT = QFormat(9, 8)          # 18-bit activations
ACC = QFormat(23, 16)        # 40-bit accumulator
MASK = QFormat(0, 11, signed=False)  # attention mask, shares the 11-bit weight port

# Fraction bits of an attention product (mask x activation).
ATT_FRAC = MASK.frac_bits + ACT.frac_bits

CLAMP_LIMIT = 255


class SatCounter:
    """Thread-safe tally of saturation events."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.count = 0

    def add(self, n: int) -> None:
        if n:
            with self._lock:
                self.count += int(n)

    def reset(self) -> None:
        with self._lock:
            self.count = 0


@dataclass(frozen=True)
class QValue:
    raw: int
    fmt: QFormat

    def __post_init__(self):
        if not self.fmt.raw_min <= self.raw <= self.fmt.raw_max:
            raise ValueError(f"raw {self.raw} does not fit {self.fmt}")

    @classmethod
    def from_real(cls, x: float, fmt: QFormat) -> "QValue":
        return cls(int(quantize(x, fmt)), fmt)

    def __float__(self) -> float:
        return self.raw / self.fmt.scale


def _is_scalar(x) -> bool:
    return np.ndim(x) == 0


def _out(x, like):
    return int(x) if _is_scalar(like) else x


def saturate(raw, fmt: QFormat, counter: SatCounter | None = None):
    arr = np.asarray(raw, dtype=np.int64)
    if counter is not None:
        counter.add(np.count_nonzero((arr < fmt.raw_min) | (arr > fmt.raw_max)))
    return _out(np.clip(arr, fmt.raw_min, fmt.raw_max), raw)


def round_shift(raw, shift: int):
    """Drop ``shift`` fraction bits with round-half-up (add half, floor)."""
    arr = np.asarray(raw, dtype=np.int64)
    if shift <= 0:
        return _out(arr << -shift, raw)
    return _out((arr + (1 << (shift - 1))) >> shift, raw)


def quantize(x, fmt: QFormat, counter: SatCounter | None = None):
    """Real -> raw integer: round-half-up of ``x * 2**frac`` then saturate."""
    v = np.asarray(x, dtype=np.float64) * fmt.scale
    fl = np.floor(v)
    # fl + (frac >= .5) avoids the double-rounding trap of floor(v + 0.5)
    r = fl + (v - fl >= 0.5)
    r = np.clip(r, -2.0**62, 2.0**62).astype(np.int64)
    return saturate(_out(r, x), fmt, counter)


def dequantize(raw, fmt: QFormat):
    if _is_scalar(raw):
        return int(raw) / fmt.scale
    return np.asarray(raw, dtype=np.float64) / fmt.scale


def mul_wa(w, a):
    """Exact PE product of an 11-bit multiplicand and an 18-bit activation.

    Fraction bits of the result are the sum of the operands' fraction bits:
    16 for a weight (lands directly in the accumulator format), 19 for a
    mask value.
    """
    p = np.asarray(w, dtype=np.int64) * np.asarray(a, dtype=np.int64)
    return p if p.ndim else int(p)


def sat_add(a, b, counter: SatCounter | None = None, fmt: QFormat = ACC):
    total = np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)
    return saturate(total if total.ndim else int(total), fmt, counter)


def clamp255(acc, counter: SatCounter | None = None, frac_bits: int = ACC.frac_bits):
    """Clamp an accumulator value to +-255, then requantize to the activation format."""
    arr = np.asarray(acc, dtype=np.int64)
    lim = CLAMP_LIMIT << frac_bits
    hi = arr >= lim
    lo = arr <= -lim
    if counter is not None:
        counter.add(np.count_nonzero(hi | lo))
    out = np.asarray(round_shift(arr, frac_bits - ACT.frac_bits))
    out = np.where(hi, CLAMP_LIMIT << ACT.frac_bits, out)
    out = np.where(lo, -(CLAMP_LIMIT << ACT.frac_bits), out)
    return _out(out, acc)


def attention_requant(product):
    """Mask x activation product (19 fraction bits) -> activation format."""
    return round_shift(product, ATT_FRAC - ACT.frac_bits)


# -- sigmoid LUT -------------------------------------------------------------
#
# D(x) = sigmoid(x / 256). Dividing by 256 is a pure reinterpretation of the
# activation raw value with 16 fraction bits. The 18-bit input spans
# x / 256 in [-2, 2), so 512 entries give a step of 2**-7: the index is the
# top nine bits of the raw value, rounded, j = round(raw / 512).
# Buckets are centred on the table samples so that D(0) is exactly 0.5, and
# the negative half is the mirror 2048 - D(|x|), which makes D(x) + D(-x) == 1
# exactly.

LUT_STEP_BITS = 9
LUT_ENTRIES = 512


def _build_sigmoid_lut() -> np.ndarray:
    half = LUT_ENTRIES // 2
    pos = np.array(
        [quantize(1.0 / (1.0 + math.exp(-j * 2.0 ** (LUT_STEP_BITS - 16))), MASK) for j in range(half)],
        dtype=np.int64,
    )
    lut = np.empty(LUT_ENTRIES, dtype=np.int64)
    # index = j + half for j in [-half, half); entry j = -half reuses the mirror of j = half - 1
    lut[half:] = pos
    lut[1:half] = (1 << MASK.frac_bits) - pos[:0:-1]
    lut[0] = (1 << MASK.frac_bits) - pos[-1]
    lut.setflags(write=False)
    return lut


SIGMOID_LUT = _build_sigmoid_lut()


def lut_index(raw):
    """Signed LUT index for an activation raw value (sign-magnitude rounding)."""
    arr = np.asarray(raw, dtype=np.int64)
    mag = (np.abs(arr) + (1 << (LUT_STEP_BITS - 1))) >> LUT_STEP_BITS
    mag = np.minimum(mag, LUT_ENTRIES // 2 - 1)
    return _out(np.where(arr < 0, -mag, mag), raw)


def sigmoid_d(raw):
    """Shifted sigmoid of an 18-bit activation; returns raw unsigned Q0.11 mask values."""
    idx = np.asarray(lut_index(raw)) + LUT_ENTRIES // 2
    return _out(SIGMOID_LUT[idx], raw)
