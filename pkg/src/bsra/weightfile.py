"""Binary weight file.

Layout (little-endian)::

    magic    4s   b"BSRA"
    version  u16
    config   7 x u16   channels, num_cpab, head_kernel, cpab_pw_kernel,
                       cpab_sp_kernel, tail_kernel, scale
    formats  3 x (u8 int_bits, u8 frac_bits, u8 signed)   weight, activation, accumulator
    nlayers  u16
    layers   nlayers x (u8 kind, u16 out, u16 in, u8 kh, u8 kw, u8 stride)
    payload  int16 per tap, execution order, [out][in][kh][kw]

Each 11-bit tap occupies the low bits of a two's-complement int16.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import qarith
from .hpan import LayerWeights, Model, ModelConfig
from .qarith import ACC, ACT, WEIGHT, QFormat

MAGIC = b"BSRA"
VERSION = 1
_KINDS = {"conv": 0, "transpose_conv": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}
_CONFIG_FIELDS = ("channels", "num_cpab", "head_kernel", "cpab_pw_kernel", "cpab_sp_kernel", "tail_kernel", "scale")


class WeightFileError(ValueError):
    pass


def encode(model: Model) -> bytes:
    cfg = model.config
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<7H", *(getattr(cfg, f) for f in _CONFIG_FIELDS))]
    for fmt in (WEIGHT, ACT, ACC):
        out.append(struct.pack("<3B", fmt.int_bits, fmt.frac_bits, int(fmt.signed)))
    shapes = cfg.layer_shapes()
    out.append(struct.pack("<H", len(shapes)))
    for name, kind, (o, i, kh, kw) in shapes:
        out.append(struct.pack("<BHHBBB", _KINDS[kind], o, i, kh, kw, model.layers[name].stride))
    for name, _, _ in shapes:
        out.append(model.layers[name].taps.astype("<i2").tobytes())
    return b"".join(out)


def decode(buf: bytes) -> Model:
    view = memoryview(buf)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise WeightFileError("truncated weight file header")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    (magic,) = take("<4s")
    if magic != MAGIC:
        raise WeightFileError(f"bad magic {magic!r}")
    (version,) = take("<H")
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version}")
    cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, take("<7H"))))
    for expect, label in ((WEIGHT, "weight"), (ACT, "activation"), (ACC, "accumulator")):
        ib, fb, signed = take("<3B")
        if QFormat(ib, fb, bool(signed)) != expect:
            raise WeightFileError(f"{label} format {QFormat(ib, fb, bool(signed))} does not match {expect}")
    (n,) = take("<H")
    shapes = cfg.layer_shapes()
    if n != len(shapes):
        raise WeightFileError(f"header lists {n} layers, config implies {len(shapes)}")
    for name, kind, shape in shapes:
        k, o, i, kh, kw, stride = take("<BHHBBB")
        if _KIND_NAMES.get(k) != kind or (o, i, kh, kw) != shape:
            raise WeightFileError(f"layer {name}: shape table says {_KIND_NAMES.get(k)} {(o, i, kh, kw)},"
                                  f" config implies {kind} {shape}")
    total = sum(int(np.prod(s)) for _, _, s in shapes)
    payload = np.frombuffer(view[pos:], dtype="<i2")
    if len(view) - pos != 2 * total:
        raise WeightFileError(f"payload is {len(view) - pos} bytes, expected {2 * total}")
    layers = {}
    off = 0
    for name, kind, shape in shapes:
        size = int(np.prod(shape))
        taps = payload[off:off + size].astype(np.int64).reshape(shape)
        if taps.min(initial=0) < WEIGHT.raw_min or taps.max(initial=0) > WEIGHT.raw_max:
            raise WeightFileError(f"layer {name}: taps exceed the {WEIGHT.width}-bit range")
        layers[name] = LayerWeights(name, kind, taps)
        off += size
    return Model(cfg, layers)


def save(path, model: Model) -> None:
    Path(path).write_bytes(encode(model))


def load(path) -> Model:
    return decode(Path(path).read_bytes())


def quantize_float_weights(weights: dict[str, np.ndarray], config: ModelConfig = ModelConfig()):
    """Quantize named float kernels. Returns (Model, per-layer report rows)."""
    report = []
    layers = {}
    for name, kind, shape in config.layer_shapes():
        if name not in weights:
            raise WeightFileError(f"float weights are missing layer {name}")
        w = np.asarray(weights[name], np.float64)
        if w.shape != shape:
            raise WeightFileError(f"layer {name}: float weights have shape {w.shape}, expected {shape}")
        counter = qarith.SatCounter()
        raw = qarith.quantize(w, WEIGHT, counter)
        err = np.abs(qarith.dequantize(raw, WEIGHT) - w)
        layers[name] = LayerWeights(name, kind, raw)
        report.append({"record": "quantize", "layer": name, "taps": int(w.size),
                       "max_abs_error": float(err.max(initial=0.0)), "saturated": counter.count})
    extra = set(weights) - {n for n, _, _ in config.layer_shapes()}
    if extra:
        raise WeightFileError(f"float weights contain unknown layers: {sorted(extra)}")
    return Model(config, layers), report
