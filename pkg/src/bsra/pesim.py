"""Cycle-level simulator of the accelerator core.

Fabric: 32 PE arrays, one per input channel, each a 6x6 grid of multipliers
(six PE lines of six PEs). A layer is processed in strips: a 6x6 window of
the (zero padded) input sits in every array's PE grid, plus a cache of
``kw - 1`` further columns.

Conv mode, for each output channel of the strip and each kernel row ``r``:
the weight ``w[r][s]`` is broadcast for ``kw`` cycles ``s = 0..kw-1``.
Partial-sum routing rotates one column per cycle, so the product of PE
column ``c`` belongs to strip output column ``(c - s) mod 6``; PE columns
``c < s`` have already handed their feature over and read the cached column
``c + 6`` instead. PE line ``y`` belongs to output row ``y - r`` and is
discarded outside the ``6 - kh + 1`` valid rows. A strip therefore takes
``kh * kw`` cycles per output channel; the window then moves down
``6 - kh + 1`` rows, and right by 6 columns once the column of strips is
done.

Attention mode loads each PE with its own mask value; one cycle multiplies a
6x6 block of all 32 channels.

Products go through a three-stage accumulator: stage 1 sums groups of eight
arrays, stage 2 completes the 32-channel sum, stage 3 (the selective adder)
either accumulates into the partial-sum buffer (conv) or passes the
per-channel attention product through.

Strips are independent, so each simulated cycle is evaluated for every strip
(and every output channel) of the layer at once; the cycle counter advances
by the number of hardware cycles that batch represents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import qarith
from .hpan import ConfigError, FeatureMap, LayerWeights, Model, phase_kernel, transpose_phases
from .memmodel import SramBankSet, layer_class, layer_feature_bytes
from .qarith import ACC, ACT, SatCounter

PE_ROWS = 6
PE_COLS = 6
NUM_ARRAYS = 32
STAGE1_FANIN = 8
ACC_LATENCY = 3
MAX_KERNEL = 6

Trace = Callable[[str], None]


@dataclass
class LayerStats:
    name: str
    mode: str
    cycles: int = 0
    mac_ops: int = 0
    sram_reads: dict[str, int] = field(default_factory=lambda: {"feature": 0, "weight": 0, "psum": 0})
    sram_writes: dict[str, int] = field(default_factory=lambda: {"feature": 0, "psum": 0})
    psum_buffer_peak: int = 0
    saturation_events: int = 0
    feature_bytes: int = 0

    @property
    def utilization(self) -> float:
        cap = PE_ROWS * PE_COLS * NUM_ARRAYS * self.cycles
        return self.mac_ops / cap if cap else 0.0


@dataclass
class SimStats:
    cycles: int = 0
    mac_ops: int = 0
    sram_reads: dict[str, int] = field(default_factory=lambda: {"feature": 0, "weight": 0, "psum": 0})
    sram_writes: dict[str, int] = field(default_factory=lambda: {"feature": 0, "psum": 0})
    psum_buffer_peak: int = 0
    saturation_events: int = 0
    feature_peak_bytes: int = 0
    layers: list[LayerStats] = field(default_factory=list)

    @property
    def utilization(self) -> float:
        cap = PE_ROWS * PE_COLS * NUM_ARRAYS * self.cycles
        return self.mac_ops / cap if cap else 0.0

    def add_layer(self, ls: LayerStats) -> None:
        self.layers.append(ls)
        self._absorb(ls)

    def _absorb(self, s) -> None:
        self.cycles += s.cycles
        self.mac_ops += s.mac_ops
        for k, v in s.sram_reads.items():
            self.sram_reads[k] = self.sram_reads.get(k, 0) + v
        for k, v in s.sram_writes.items():
            self.sram_writes[k] = self.sram_writes.get(k, 0) + v
        self.psum_buffer_peak = max(self.psum_buffer_peak, s.psum_buffer_peak)
        self.saturation_events += s.saturation_events
        peak = getattr(s, "feature_peak_bytes", getattr(s, "feature_bytes", 0))
        self.feature_peak_bytes = max(self.feature_peak_bytes, peak)

    def merge(self, other: "SimStats") -> None:
        """Sum counters of another instance (one per tile); peaks take the max."""
        self._absorb(other)

    def as_dict(self, per_layer: bool = False) -> dict:
        d = {
            "cycles": self.cycles,
            "mac_ops": self.mac_ops,
            "utilization": self.utilization,
            "sram_reads": dict(self.sram_reads),
            "sram_writes": dict(self.sram_writes),
            "psum_buffer_peak": self.psum_buffer_peak,
            "saturation_events": self.saturation_events,
            "feature_peak_bytes": self.feature_peak_bytes,
        }
        if per_layer:
            d["layers"] = [
                {"name": ls.name, "mode": ls.mode, "cycles": ls.cycles, "mac_ops": ls.mac_ops,
                 "utilization": ls.utilization}
                for ls in self.layers
            ]
        return d


@dataclass
class PEArrayState:
    """Register state of one PE array (used for inspection and tracing)."""

    channel_id: int
    mode: str = "conv"
    grid: np.ndarray = field(default_factory=lambda: np.zeros((PE_ROWS, PE_COLS), np.int64))
    multiplicand: np.ndarray = field(default_factory=lambda: np.zeros((PE_ROWS, PE_COLS), np.int64))
    weight_row_regs: np.ndarray = field(default_factory=lambda: np.zeros(PE_COLS, np.int64))

    def broadcast(self, s: int) -> None:
        """Conv mode: the tap at register ``s`` drives every PE (vertical broadcast)."""
        self.mode = "conv"
        self.multiplicand = np.full((PE_ROWS, PE_COLS), self.weight_row_regs[s], np.int64)

    def distribute(self, mask_block: np.ndarray) -> None:
        self.mode = "attention"
        self.multiplicand = np.asarray(mask_block, np.int64).copy()

    def products(self) -> np.ndarray:
        return qarith.mul_wa(self.multiplicand, self.grid)


class AccumPipeline:
    """Three-stage accumulator; one ``tick`` per issue slot, ``drain`` at layer end.

    Stage 1 reduces groups of eight arrays, stage 2 finishes the channel sum,
    stage 3 is the selective adder writing the partial-sum buffer.
    """

    def __init__(self, counter: SatCounter):
        self.counter = counter
        self.slot1 = None
        self.slot2 = None

    @staticmethod
    def stage1(products: np.ndarray) -> np.ndarray:
        """Eight-way adders: (..., arrays, 6, 6) -> (..., ceil(arrays/8), 6, 6).

        Idle arrays beyond the active channel count contribute zero.
        """
        n = products.shape[-3]
        return np.add.reduceat(products, np.arange(0, n, STAGE1_FANIN), axis=-3)

    @staticmethod
    def fused_stage1(grid: np.ndarray, wts: np.ndarray) -> np.ndarray:
        """Broadcast-weight multiply feeding stage 1, without materialising every product.

        grid: (S, C, 6, 6) features, wts: (O, C) broadcast taps -> (S, O, G, 6, 6).
        """
        n = grid.shape[1]
        groups = -(-n // STAGE1_FANIN)
        pad = groups * STAGE1_FANIN - n
        if pad:
            grid = np.pad(grid, ((0, 0), (0, pad), (0, 0), (0, 0)))
            wts = np.pad(wts, ((0, 0), (0, pad)))
        g = grid.reshape(grid.shape[0], groups, STAGE1_FANIN, PE_ROWS * PE_COLS).astype(np.float64)
        w = wts.reshape(wts.shape[0], groups, STAGE1_FANIN).astype(np.float64)
        # |product| < 2**27 and eight of them sum below 2**30, so float64 is exact here
        out = np.matmul(w.transpose(1, 0, 2)[None], g)  # S, G, O, 36
        return out.transpose(0, 2, 1, 3).reshape(grid.shape[0], wts.shape[0], groups, PE_ROWS, PE_COLS).astype(
            np.int64)

    def tick(self, item, stage3: Callable) -> None:
        if self.slot2 is not None:
            stage3(*self.slot2)
        self.slot2 = None
        if self.slot1 is not None:
            value, route = self.slot1
            if route.get("bypass"):
                self.slot2 = (value, route)
            else:
                self.slot2 = (qarith.saturate(value.sum(axis=-3), ACC, self.counter), route)
        self.slot1 = None
        if item is not None:
            products, route = item
            if route.get("bypass"):
                self.slot1 = (products, route)
            elif "weights" in route:
                self.slot1 = (qarith.saturate(self.fused_stage1(products, route["weights"]), ACC, self.counter),
                              route)
            else:
                self.slot1 = (qarith.saturate(self.stage1(products), ACC, self.counter), route)

    def drain(self, stage3: Callable) -> int:
        for _ in range(ACC_LATENCY):
            self.tick(None, stage3)
        return ACC_LATENCY


def strip_origins(h: int, w: int, kh: int) -> list[tuple[int, int]]:
    """Column-major strip order: down by 6-kh+1 rows to the bottom, then right by 6."""
    adv = PE_ROWS - kh + 1
    return [(y, x) for x in range(0, w, PE_COLS) for y in range(0, h, adv)]


def _column_map(s: int) -> tuple[np.ndarray, np.ndarray]:
    """Window column read by each PE column at cycle s, and its output column."""
    c = np.arange(PE_COLS)
    src = np.where(c < s, c + PE_COLS, c)
    dst = (c - s) % PE_COLS
    return src, dst


def run_conv_layer(x: FeatureMap, layer: LayerWeights, *, pad=None, taps=None, post: str = "clamp",
                   name: str | None = None, counter: SatCounter | None = None,
                   trace: Trace | None = None, cycle_base: int = 0):
    """Run one convolution on the PE fabric.

    ``taps`` overrides the layer's kernel (used for transpose-conv phases),
    ``pad`` = (top, bottom, left, right) overrides "same" padding. ``post`` is
    "clamp" (activation output), "sigmoid" (attention mask output) or "raw"
    (accumulator values, no post-processing).
    Returns (output array, LayerStats).
    """
    taps = layer.taps if taps is None else np.asarray(taps, np.int64)
    out_ch, in_ch, kh, kw = taps.shape
    name = name or layer.name
    if kh > MAX_KERNEL or kw > MAX_KERNEL:
        raise ConfigError(f"{name}: kernel {kh}x{kw} does not fit the {PE_ROWS}x{PE_COLS} PE array")
    if in_ch > NUM_ARRAYS:
        raise ConfigError(f"{name}: {in_ch} input channels exceed {NUM_ARRAYS} PE arrays")
    if x.channels != in_ch:
        raise ConfigError(f"{name}: input has {x.channels} channels, layer expects {in_ch}")
    if pad is None:
        pad = ((kh - 1) // 2, kh - 1 - (kh - 1) // 2, (kw - 1) // 2, kw - 1 - (kw - 1) // 2)
    top, bottom, left, right = pad
    h, w = x.height, x.width
    if top + bottom != kh - 1 or left + right != kw - 1:
        raise ConfigError(f"{name}: padding {pad} does not preserve size for a {kh}x{kw} kernel")

    counter = counter or SatCounter()
    sat0 = counter.count
    stats = LayerStats(name, "conv")
    origins = strip_origins(h, w, kh)
    n_strips = len(origins)
    vr = PE_ROWS - kh + 1

    # zero padding plus slack so edge strips can read a full window
    xp = np.pad(x.data, ((0, 0), (top, bottom + PE_ROWS), (left, right + PE_COLS + MAX_KERNEL)))
    wwin = PE_COLS + kw - 1
    windows = np.stack([xp[:, y:y + PE_ROWS, x0:x0 + wwin] for y, x0 in origins])  # S, C, 6, 6+kw-1

    # feature reads: in-tile elements of each strip footprint, loaded once per strip
    for y, x0 in origins:
        rows = min(y - top + PE_ROWS, h) - max(y - top, 0)
        cols = min(x0 - left + wwin, w) - max(x0 - left, 0)
        stats.sram_reads["feature"] += in_ch * max(rows, 0) * max(cols, 0)
        stats.mac_ops += out_ch * in_ch * kh * kw * min(vr, h - y) * min(PE_COLS, w - x0)

    psum = np.zeros((n_strips, out_ch, vr, PE_COLS), np.int64)
    pipe = AccumPipeline(counter)
    cycles = 0
    updates = 0

    def stage3(value, route):
        nonlocal updates
        r, dst = route["row"], route["dst"]
        # selective adder, conv input: PE lines r..r+vr-1 belong to output rows 0..vr-1
        routed = np.empty_like(value[..., r:r + vr, :])
        routed[..., dst] = value[..., r:r + vr, :]
        psum[...] = qarith.sat_add(psum, routed, counter)
        updates += routed.size

    for r in range(kh):
        for s in range(kw):
            src, dst = _column_map(s)
            grid = windows[:, :, :, src]                      # S, C, 6, 6
            wts = taps[:, :, r, s]                            # O, C
            pipe.tick((grid, {"row": r, "dst": dst, "weights": wts}), stage3)
            cycles += n_strips * out_ch
            stats.sram_reads["weight"] += n_strips * out_ch * in_ch
    cycles += pipe.drain(stage3)

    if trace is not None:
        _trace_conv(trace, name, origins, out_ch, kh, kw, cycle_base)

    acc = np.zeros((out_ch, -(-h // vr) * vr, -(-w // PE_COLS) * PE_COLS), np.int64)
    for i, (y, x0) in enumerate(origins):
        acc[:, y:y + vr, x0:x0 + PE_COLS] = psum[i]
    acc = acc[:, :h, :w]

    if post == "raw":
        out = acc
    else:
        out = qarith.clamp255(acc, counter)
        if post == "sigmoid":
            out = qarith.sigmoid_d(out)
    stats.cycles = cycles
    stats.psum_buffer_peak = vr * PE_COLS
    stats.sram_reads["psum"] = updates
    stats.sram_writes["psum"] = updates
    stats.sram_writes["feature"] = out_ch * h * w
    stats.saturation_events = counter.count - sat0
    return out, stats


def _trace_conv(trace: Trace, name, origins, out_ch, kh, kw, base):
    cyc = base
    for y, x0 in origins:
        for o in range(out_ch):
            for r in range(kh):
                for s in range(kw):
                    trace(f"{cyc} pe {name} conv strip=({y},{x0}) oc={o} w=({r},{s})")
                    cyc += 1
    for _ in range(ACC_LATENCY):
        trace(f"{cyc} acc {name} drain")
        cyc += 1


def run_attention(x: FeatureMap, mask: np.ndarray, *, name: str = "attention",
                  counter: SatCounter | None = None, trace: Trace | None = None, cycle_base: int = 0):
    """Element-wise feature x mask on the fabric with distributed multiplicands."""
    mask = np.asarray(mask, np.int64)
    if mask.shape != x.data.shape:
        raise ConfigError(f"{name}: mask shape {mask.shape} does not match features {x.data.shape}")
    if x.channels > NUM_ARRAYS:
        raise ConfigError(f"{name}: {x.channels} channels exceed {NUM_ARRAYS} PE arrays")
    counter = counter or SatCounter()
    stats = LayerStats(name, "attention")
    c, h, w = x.data.shape
    origins = strip_origins(h, w, 1)
    # attention blocks are 6x6 and do not overlap; strip_origins(k=1) advances 6 rows
    ph, pw = -h % PE_ROWS, -w % PE_COLS
    feat = np.pad(x.data, ((0, 0), (0, ph), (0, pw)))
    msk = np.pad(mask, ((0, 0), (0, ph), (0, pw)))
    fblocks = np.stack([feat[:, y:y + PE_ROWS, x0:x0 + PE_COLS] for y, x0 in origins])
    mblocks = np.stack([msk[:, y:y + PE_ROWS, x0:x0 + PE_COLS] for y, x0 in origins])

    out_blocks = np.zeros_like(fblocks)

    def stage3(value, route):
        # selective adder, attention input: pass the per-channel product through
        out_blocks[...] = qarith.attention_requant(value)

    pipe = AccumPipeline(counter)
    products = qarith.mul_wa(mblocks, fblocks)  # distributed multiplicands, 36 per array
    pipe.tick((products, {"bypass": True}), stage3)
    cycles = len(origins) + pipe.drain(stage3)

    out = np.zeros_like(feat)
    for i, (y, x0) in enumerate(origins):
        out[:, y:y + PE_ROWS, x0:x0 + PE_COLS] = out_blocks[i]
    if trace is not None:
        for i, (y, x0) in enumerate(origins):
            trace(f"{cycle_base + i} pe {name} attention block=({y},{x0})")
        for j in range(ACC_LATENCY):
            trace(f"{cycle_base + len(origins) + j} acc {name} drain")
    stats.cycles = cycles
    stats.mac_ops = c * h * w
    stats.sram_reads["feature"] = 2 * c * h * w
    stats.sram_writes["feature"] = c * h * w
    return out[:, :h, :w], stats


def run_transpose_layer(x: FeatureMap, tail: LayerWeights, *, counter: SatCounter | None = None,
                        trace: Trace | None = None, cycle_base: int = 0):
    """Stride-2 transposed conv as four phase convolutions interleaved into the 2x grid."""
    if tail.kind != "transpose_conv":
        raise ConfigError(f"{tail.name}: not a transpose_conv layer")
    counter = counter or SatCounter()
    k = tail.kernel_h
    h, w = x.height, x.width
    acc = np.zeros((tail.out_ch, 2 * h, 2 * w), np.int64)
    stats = LayerStats(tail.name, "transpose")
    cyc = cycle_base
    for py, px, ky, kx, pad in transpose_phases(k, (k - 1) // 2):
        sub = phase_kernel(tail.taps, ky, kx)
        out, ls = run_conv_layer(x, tail, taps=sub, pad=pad, post="raw", name=f"{tail.name}.p{py}{px}",
                                 counter=counter, trace=trace, cycle_base=cyc)
        cyc += ls.cycles
        acc[:, py::2, px::2] = out
        stats.cycles += ls.cycles
        stats.mac_ops += ls.mac_ops
        for d_src, d_dst in ((ls.sram_reads, stats.sram_reads), (ls.sram_writes, stats.sram_writes)):
            for key, v in d_src.items():
                d_dst[key] = d_dst.get(key, 0) + v
        stats.psum_buffer_peak = max(stats.psum_buffer_peak, ls.psum_buffer_peak)
        stats.saturation_events += ls.saturation_events
    sat0 = counter.count
    out = qarith.clamp255(acc, counter)
    stats.saturation_events += counter.count - sat0
    return out, stats


def simulate_model(tile: FeatureMap, model: Model, *, banks: SramBankSet = SramBankSet(),
                   counter: SatCounter | None = None, trace: Trace | None = None):
    """Fused per-tile execution of the whole network; returns (FeatureMap, SimStats)."""
    if tile.channels != 1:
        raise ConfigError(f"simulate_model expects a 1-channel tile, got {tile.channels}")
    counter = counter or SatCounter()
    stats = SimStats()
    th, tw = tile.height, tile.width
    ch = model.config.channels

    def reserve(name, kernel):
        need = layer_feature_bytes(layer_class(name), kernel, ch, th, tw)
        banks.check("feature", need, name)
        return need

    def run(fn, *args, buffer_layer, kernel, **kw):
        need = reserve(buffer_layer, kernel)
        out, ls = fn(*args, counter=counter, trace=trace, cycle_base=stats.cycles, **kw)
        ls.feature_bytes = need
        stats.add_layer(ls)
        return out

    head = model.layers["head"]
    f = FeatureMap(run(run_conv_layer, tile, head, buffer_layer=head.name, kernel=head.kernel_h))
    for i in range(model.config.num_cpab):
        w1, wm, w3 = model.cpab(i)
        h1 = FeatureMap(run(run_conv_layer, f, w1, buffer_layer=w1.name, kernel=w1.kernel_h))
        mask = run(run_conv_layer, h1, wm, buffer_layer=wm.name, kernel=wm.kernel_h, post="sigmoid")
        pa = FeatureMap(run(run_attention, h1, mask, buffer_layer=wm.name, kernel=wm.kernel_h,
                            name=f"cpab{i}.attention"))
        f = FeatureMap(run(run_conv_layer, pa, w3, buffer_layer=w3.name, kernel=w3.kernel_h))
    tail = model.layers["tail"]
    out = run(run_transpose_layer, f, tail, buffer_layer=tail.name, kernel=tail.kernel_h)
    return FeatureMap(out), stats


# -- closed-form cycle model ---------------------------------------------------

def analytic_conv_cycles(h: int, w: int, kh: int, kw: int, out_ch: int) -> int:
    strips = math.ceil(h / (PE_ROWS - kh + 1)) * math.ceil(w / PE_COLS)
    return strips * kh * kw * out_ch + ACC_LATENCY


def analytic_attention_cycles(h: int, w: int) -> int:
    return math.ceil(h / PE_ROWS) * math.ceil(w / PE_COLS) + ACC_LATENCY


def analytic_transpose_cycles(h: int, w: int, k: int, out_ch: int) -> int:
    even = (k + 1) // 2   # taps on the phase that contains the kernel centre
    odd = k // 2
    total = 0
    for kh in (even, odd):
        for kw in (even, odd):
            total += analytic_conv_cycles(h, w, kh, kw, out_ch)
    return total


def analytic_model_cycles(config, h: int, w: int) -> int:
    c = config.channels
    total = analytic_conv_cycles(h, w, config.head_kernel, config.head_kernel, c)
    per_cpab = (2 * analytic_conv_cycles(h, w, config.cpab_pw_kernel, config.cpab_pw_kernel, c)
                + analytic_attention_cycles(h, w)
                + analytic_conv_cycles(h, w, config.cpab_sp_kernel, config.cpab_sp_kernel, c))
    total += config.num_cpab * per_cpab
    return total + analytic_transpose_cycles(h, w, config.tail_kernel, 1)


def throughput_report(model: Model, image_h: int = 540, image_w: int = 960, tile_h: int = 48, tile_w: int = 40,
                      freq_hz: float = 471e6, fps: float = 30.0) -> dict:
    """Frame cycle estimate vs. the clock/frame-rate budget.

    Cycles are data-independent, so each distinct tile shape is simulated
    once and multiplied by how often it occurs in the plan.
    """
    from .tiler import split

    plan = split(image_h, image_w, tile_w=tile_w, tile_h=tile_h)
    shapes: dict[tuple[int, int], int] = {}
    for t in plan.tiles:
        shapes[(t.h, t.w)] = shapes.get((t.h, t.w), 0) + 1
    sim_total = 0
    ana_total = 0
    per_shape = []
    for (h, w), n in sorted(shapes.items()):
        _, st = simulate_model(FeatureMap(np.zeros((1, h, w), np.int64)), model)
        ana = analytic_model_cycles(model.config, h, w)
        sim_total += st.cycles * n
        ana_total += ana * n
        per_shape.append({"tile_h": h, "tile_w": w, "count": n, "sim_cycles": st.cycles, "analytic_cycles": ana,
                          "utilization": st.utilization})
    budget = freq_hz / fps
    return {
        "record": "throughput",
        "image_h": image_h,
        "image_w": image_w,
        "tiles": len(plan.tiles),
        "per_tile": per_shape,
        "frame_cycles_sim": sim_total,
        "frame_cycles_analytic": ana_total,
        "cycle_mismatch": sim_total - ana_total,
        "budget_cycles": budget,
        "budget_ratio": sim_total / budget,
        "meets_budget": sim_total <= budget,
        "achievable_fps": freq_hz / sim_total if sim_total else math.inf,
    }
