"""On-chip buffer capacities and the external DRAM traffic ledger."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

from .qarith import ACC, ACT, MASK, WEIGHT

KIB = 1024
TOTAL_BUDGET = 232 * KIB
NUM_BANKS = 32
PE_DIM = 6
PIXEL_BITS = 8


class CapacityError(RuntimeError):
    pass


class LedgerError(RuntimeError):
    pass


def bits_to_bytes(bits: int) -> int:
    return math.ceil(bits / 8)


@dataclass(frozen=True)
class SramBankSet:
    feature_bank_bytes: int = 5 * KIB
    weight_bank_bytes: int = 1280
    psum_bytes: int = 32 * KIB
    num_banks: int = NUM_BANKS

    def __post_init__(self):
        if self.total_bytes > TOTAL_BUDGET:
            raise CapacityError(f"on-chip buffers need {self.total_bytes} bytes, budget is {TOTAL_BUDGET}")

    @property
    def feature_bytes(self) -> int:
        return self.feature_bank_bytes * self.num_banks

    @property
    def weight_bytes(self) -> int:
        return self.weight_bank_bytes * self.num_banks

    @property
    def total_bytes(self) -> int:
        return self.feature_bytes + self.weight_bytes + self.psum_bytes

    def capacity(self, cls: str) -> int:
        return {"feature": self.feature_bytes, "weight": self.weight_bytes, "psum": self.psum_bytes}[cls]

    def check(self, cls: str, nbytes: int, layer: str) -> None:
        cap = self.capacity(cls)
        if nbytes > cap:
            raise CapacityError(f"layer {layer}: needs {nbytes} bytes of {cls} SRAM, capacity is {cap}")


# -- per-layer footprints of the fused, in-place tile schedule ---------------
#
# Within a tile all 32 output channels of a PE strip are produced before the
# next strip, so a layer can overwrite its input in place. What must be held
# besides the one resident feature map is layer-specific staging.

def fmap_bytes(channels: int, h: int, w: int) -> int:
    return bits_to_bytes(channels * h * w * ACT.width)


def layer_feature_bytes(kind: str, kernel: int, channels: int, th: int, tw: int) -> int:
    """Peak feature-SRAM bytes while running one layer on a th x tw tile.

    kind is one of "head", "pw", "mask", "sp", "tail".
    """
    fm = fmap_bytes(channels, th, tw)
    strip = PE_DIM * PE_DIM
    if kind == "head":
        return bits_to_bytes(th * tw * PIXEL_BITS) + fm
    if kind == "pw":
        return fm + bits_to_bytes(channels * strip * ACT.width)
    if kind == "mask":
        return fm + bits_to_bytes(channels * strip * MASK.width)
    if kind == "sp":
        pad = (kernel - 1) // 2
        staging = channels * (PE_DIM - kernel + 1) * PE_DIM * ACT.width
        # right-hand column halo of the strip column plus bottom rows of the strip
        halo = channels * (th + PE_DIM) * pad * ACT.width
        return fm + bits_to_bytes(staging + halo)
    if kind == "tail":
        return fm + bits_to_bytes(4 * th * tw * PIXEL_BITS)
    raise ValueError(f"unknown layer kind {kind!r}")


def layer_class(name: str) -> str:
    return name.split(".")[-1] if "." in name else name


def weight_bytes(param_count: int) -> int:
    return bits_to_bytes(param_count * WEIGHT.width)


def psum_bytes(entries: int) -> int:
    return bits_to_bytes(entries * ACC.width)


@dataclass
class CapacityReport:
    tile_h: int
    tile_w: int
    peaks: dict[str, int]
    capacities: dict[str, int]
    peak_layer: str

    @property
    def ok(self) -> dict[str, bool]:
        return {k: self.peaks[k] <= self.capacities[k] for k in self.peaks}

    @property
    def total_peak(self) -> int:
        return sum(self.peaks.values())

    def records(self) -> list[dict]:
        return [
            {"record": "capacity", "buffer": k, "peak_bytes": self.peaks[k],
             "capacity_bytes": self.capacities[k], "pass": self.ok[k]}
            for k in self.peaks
        ]


def capacity_report(config, tile_h: int, tile_w: int, banks: SramBankSet = SramBankSet()) -> CapacityReport:
    """Peak SRAM use for one tile; depends only on tile size and model."""
    from .hpan import param_count

    peak, peak_layer = 0, ""
    for name, kind, (o, i, kh, _) in config.layer_shapes():
        b = layer_feature_bytes(layer_class(name), kh, max(o, i), tile_h, tile_w)
        if b > peak:
            peak, peak_layer = b, name
    n_params = param_count(config)
    # widest strip of the schedule is a 1x1 kernel: 6 rows x 6 columns of partial sums
    psum_entries = PE_DIM * PE_DIM if n_params else 0
    peaks = {"feature": peak, "weight": weight_bytes(n_params), "psum": psum_bytes(psum_entries)}
    caps = {k: banks.capacity(k) for k in peaks}
    return CapacityReport(tile_h, tile_w, peaks, caps, peak_layer)


KINDS = ("dram_in", "dram_out", "dram_weight", "dram_intermediate", "sram_read", "sram_write", "psum")


@dataclass
class DramLedger:
    """Byte counters for external traffic plus on-chip access totals.

    bytes_intermediate exists so a leak is observable; check() fails on it.
    """

    bytes_in: int = 0
    bytes_out: int = 0
    bytes_weights: int = 0
    bytes_intermediate: int = 0
    sram_read_bytes: int = 0
    sram_write_bytes: int = 0
    psum_bytes: int = 0
    weight_loads: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    _FIELD = {
        "dram_in": "bytes_in",
        "dram_out": "bytes_out",
        "dram_weight": "bytes_weights",
        "dram_intermediate": "bytes_intermediate",
        "sram_read": "sram_read_bytes",
        "sram_write": "sram_write_bytes",
        "psum": "psum_bytes",
    }

    def record_access(self, kind: str, nbytes: int) -> None:
        if kind not in self._FIELD:
            raise LedgerError(f"unknown access kind {kind!r}")
        if nbytes < 0:
            raise LedgerError(f"negative byte count {nbytes}")
        attr = self._FIELD[kind]
        with self._lock:
            setattr(self, attr, getattr(self, attr) + int(nbytes))

    def load_weights(self, param_count: int) -> None:
        """Weights cross DRAM once per run, however many tiles follow."""
        with self._lock:
            if self.weight_loads:
                return
            self.weight_loads = 1
            self.bytes_weights += weight_bytes(param_count)

    def merge(self, other: "DramLedger") -> None:
        with self._lock:
            for attr in self._FIELD.values():
                if attr == "bytes_weights" and self.weight_loads and other.weight_loads:
                    continue  # the same weights, already resident
                setattr(self, attr, getattr(self, attr) + getattr(other, attr))
            self.weight_loads = max(self.weight_loads, other.weight_loads)

    def check(self) -> None:
        if self.bytes_intermediate:
            raise LedgerError(f"{self.bytes_intermediate} bytes of intermediate features crossed DRAM")

    def as_dict(self) -> dict:
        return {attr: getattr(self, attr) for attr in self._FIELD.values()}
