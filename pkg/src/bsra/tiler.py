"""Block convolution over the whole network: non-overlapping tiles, fused per tile.

Every tile runs from input to output on its own with zero padding at its
edges; nothing from neighbouring tiles is used and no intermediate feature
map leaves the tile. Outputs are placed at twice the tile origin.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import hpan, pesim
from .hpan import FeatureMap, Model, ModelConfig
from .memmodel import PIXEL_BITS, CapacityError, DramLedger, SramBankSet, bits_to_bytes, capacity_report
from .qarith import ACC, ACT, WEIGHT, SatCounter

TILE_W = 40
TILE_H = 48


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class Tile:
    index: int
    y: int
    x: int
    h: int
    w: int


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    tile_h: int
    tile_w: int
    tiles: tuple[Tile, ...]

    @property
    def rows(self) -> int:
        return math.ceil(self.height / self.tile_h)

    @property
    def cols(self) -> int:
        return math.ceil(self.width / self.tile_w)


def split(h: int, w: int, tile_w: int = TILE_W, tile_h: int = TILE_H) -> TilePlan:
    """Row-major grid of tiles; the last row/column carries the remainder."""
    if h < 1 or w < 1:
        raise ValueError(f"image must be at least 1x1, got {h}x{w}")
    if tile_h < 1 or tile_w < 1:
        raise ValueError(f"tile must be at least 1x1, got {tile_w}x{tile_h}")
    tiles = []
    for y in range(0, h, tile_h):
        for x in range(0, w, tile_w):
            tiles.append(Tile(len(tiles), y, x, min(tile_h, h - y), min(tile_w, w - x)))
    return TilePlan(h, w, tile_h, tile_w, tuple(tiles))


def crop(image: FeatureMap, tile: Tile) -> FeatureMap:
    return FeatureMap(image.data[:, tile.y:tile.y + tile.h, tile.x:tile.x + tile.w])


def fused_forward(tile: FeatureMap, model: Model, counter: SatCounter | None = None) -> FeatureMap:
    """Whole network on one tile in isolation. Intermediates never leave this call."""
    return hpan.forward(tile, model, counter)


@dataclass
class StitchedOutput:
    image: FeatureMap
    provenance: np.ndarray  # tile index per output pixel


def stitch(outputs, plan: TilePlan, scale: int = 2) -> StitchedOutput:
    """Place per-tile outputs at ``scale`` x their origins. ``outputs`` maps tile index -> FeatureMap."""
    if not isinstance(outputs, dict):
        outputs = dict(enumerate(outputs))
    expected = {t.index for t in plan.tiles}
    missing = expected - outputs.keys()
    extra = outputs.keys() - expected
    if missing or extra:
        raise IntegrityError(f"tile outputs do not match plan: missing {sorted(missing)}, unexpected {sorted(extra)}")
    channels = {fm.channels for fm in outputs.values()}
    if len(channels) != 1:
        raise IntegrityError(f"tile outputs disagree on channel count: {sorted(channels)}")
    c = channels.pop()
    data = np.zeros((c, plan.height * scale, plan.width * scale), np.int64)
    prov = np.full((plan.height * scale, plan.width * scale), -1, np.int32)
    for t in plan.tiles:
        fm = outputs[t.index]
        if (fm.height, fm.width) != (t.h * scale, t.w * scale):
            raise IntegrityError(f"tile {t.index}: output {fm.height}x{fm.width}, expected {t.h * scale}x{t.w * scale}")
        ys, xs = slice(t.y * scale, (t.y + t.h) * scale), slice(t.x * scale, (t.x + t.w) * scale)
        if (prov[ys, xs] != -1).any():
            raise IntegrityError(f"tile {t.index} overlaps an earlier tile")
        data[:, ys, xs] = fm.data
        prov[ys, xs] = t.index
    if (prov == -1).any():
        raise IntegrityError("stitched output has uncovered pixels")
    return StitchedOutput(FeatureMap(data), prov)


# -- receptive field ---------------------------------------------------------

def input_span(config: ModelConfig, out_index: int) -> tuple[int, int]:
    """Inclusive input interval (one axis) that output pixel ``out_index`` depends on."""
    p = config.tail_pad()
    k = config.tail_kernel
    # output o = 2i - p + kidx, kidx in [0, k)
    lo = math.ceil((out_index + p - (k - 1)) / 2)
    hi = (out_index + p) // 2
    r = config.input_radius()
    return lo - r, hi + r


def receptive_radius(config: ModelConfig) -> int:
    """Largest distance, in input pixels, between an output pixel's own input pixel and its dependencies."""
    return config.input_radius() + config.tail_pad() // 2


def interior_mask(plan: TilePlan, config: ModelConfig) -> np.ndarray:
    """Output pixels whose receptive field, clipped to the image, lies inside their own tile."""
    scale = config.scale
    ok_y = np.zeros(plan.height * scale, bool)
    ok_x = np.zeros(plan.width * scale, bool)

    def axis_ok(n_in, tile_len, ok):
        for o in range(n_in * scale):
            t0 = (o // scale) // tile_len * tile_len
            t1 = min(t0 + tile_len, n_in) - 1
            lo, hi = input_span(config, o)
            lo, hi = max(lo, 0), min(hi, n_in - 1)
            ok[o] = t0 <= lo and hi <= t1

    axis_ok(plan.height, plan.tile_h, ok_y)
    axis_ok(plan.width, plan.tile_w, ok_x)
    return ok_y[:, None] & ok_x[None, :]


def boundary_band(plan: TilePlan, config: ModelConfig) -> np.ndarray:
    """Output pixels within 2 x receptive radius of an internal tile edge."""
    scale = config.scale
    band = scale * receptive_radius(config)

    def axis(n_in, tile_len):
        edges = [e * scale for e in range(tile_len, n_in, tile_len)]
        idx = np.arange(n_in * scale)
        near = np.zeros(n_in * scale, bool)
        for e in edges:
            near |= (idx >= e - band) & (idx < e + band)
        return near

    ny = axis(plan.height, plan.tile_h)
    nx = axis(plan.width, plan.tile_w)
    return ny[:, None] | nx[None, :]


# -- whole-image driver -------------------------------------------------------

@dataclass
class RunResult:
    output: StitchedOutput
    ledger: DramLedger
    stats: pesim.SimStats | None
    plan: TilePlan
    saturation_events: int = 0
    sram_peak: dict = field(default_factory=dict)

    @property
    def pixels(self) -> np.ndarray:
        return self.output.image.to_pixels()


def process_image(pixels: np.ndarray, model: Model, plan: TilePlan | None = None, *, simulate: bool = False,
                  jobs: int = 1, banks: SramBankSet = SramBankSet(), trace=None, order=None) -> RunResult:
    """Super-resolve an 8-bit luma plane tile by tile.

    DRAM traffic recorded: the input pixels of each tile, its output pixels,
    and the weights once. ``order`` optionally permutes tile processing.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D luma plane, got shape {pixels.shape}")
    plan = plan or split(*pixels.shape)
    image = FeatureMap.from_pixels(pixels)
    ledger = DramLedger()
    ledger.load_weights(model.param_count())
    counter = SatCounter()
    report = capacity_report(model.config, min(plan.tile_h, plan.height), min(plan.tile_w, plan.width), banks)
    bad = [k for k, ok in report.ok.items() if not ok]
    if bad and not simulate:
        # the simulator raises on its own, naming the layer that overflows
        raise CapacityError(f"tile {plan.tile_w}x{plan.tile_h} exceeds on-chip {', '.join(bad)} capacity"
                            f" (peak layer {report.peak_layer})")

    def one(tile: Tile):
        fm = crop(image, tile)
        ledger.record_access("dram_in", bits_to_bytes(tile.h * tile.w * PIXEL_BITS))
        if simulate:
            out, st = pesim.simulate_model(fm, model, banks=banks, counter=counter,
                                           trace=trace if jobs == 1 else None)
        else:
            out, st = fused_forward(fm, model, counter), None
        ledger.record_access("dram_out", bits_to_bytes(out.height * out.width * PIXEL_BITS))
        return tile.index, out, st

    tiles = list(plan.tiles)
    if order is not None:
        tiles = [plan.tiles[i] for i in order]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(one, tiles))
    else:
        results = [one(t) for t in tiles]

    outputs = {i: out for i, out, _ in results}
    stats = None
    if simulate:
        stats = pesim.SimStats()
        for _, _, st in sorted(results, key=lambda r: r[0]):
            stats.merge(st)
        ledger.record_access("sram_read", bits_to_bytes(stats.sram_reads["feature"] * ACT.width)
                             + bits_to_bytes(stats.sram_reads["weight"] * WEIGHT.width))
        ledger.record_access("sram_write", bits_to_bytes(stats.sram_writes["feature"] * ACT.width))
        ledger.record_access("psum", bits_to_bytes((stats.sram_reads["psum"] + stats.sram_writes["psum"]) * ACC.width))
    return RunResult(stitch(outputs, plan, model.config.scale), ledger, stats, plan, counter.count,
                     dict(report.peaks))
