"""Command-line entry point: ``bsra quantize | run | eval | stats``.

Stats are emitted as line-delimited JSON records.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import imaging, pesim, tiler, weightfile
from .hpan import Model, ModelConfig, param_count
from .memmodel import CapacityError, LedgerError, SramBankSet, capacity_report

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_ERROR = 2


def parse_tile(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tile must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"tile dimensions must be positive, got {text!r}")
    return w, h


def load_model(path: str | None, num_cpab: int = 2) -> Model:
    if path:
        return weightfile.load(path)
    seed = int(os.environ.get("BSRA_SEED", "0"))
    return Model.random(np.random.default_rng(seed), ModelConfig(num_cpab=num_cpab))


class Emitter:
    """Writes JSON records to stdout and, optionally, a stats file."""

    def __init__(self, path: str | None = None, stream=None):
        self.stream = stream or sys.stdout
        self.file = open(path, "w") if path else None

    def __call__(self, record: dict) -> None:
        line = json.dumps(record, default=_jsonable)
        print(line, file=self.stream)
        if self.file:
            self.file.write(line + "\n")

    def close(self):
        if self.file:
            self.file.close()


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"not JSON serialisable: {type(v)}")


def _finite(x: float):
    return x if math.isfinite(x) else "inf"


def super_resolve(pixels: np.ndarray, model: Model, plan: tiler.TilePlan, mode: str, verify: bool,
                  jobs: int = 1, trace=None):
    """Run the model on a luma plane. Returns (RunResult, verified-or-None)."""
    result = tiler.process_image(pixels, model, plan, simulate=(mode == "simulate"), jobs=jobs, trace=trace)
    verified = None
    if verify:
        other = tiler.process_image(pixels, model, plan, simulate=(mode != "simulate"), jobs=jobs)
        verified = bool(np.array_equal(result.output.image.data, other.output.image.data))
    return result, verified


def run_record(result: tiler.RunResult, verified, mode: str) -> dict:
    rec = {
        "record": "run",
        "mode": mode,
        "tiles": len(result.plan.tiles),
        "tile_w": result.plan.tile_w,
        "tile_h": result.plan.tile_h,
        **result.ledger.as_dict(),
        "sram_peak": result.sram_peak,
        "saturation_events": result.saturation_events,
    }
    if result.stats is not None:
        rec.update(result.stats.as_dict())
    if verified is not None:
        rec["verified"] = verified
    return rec


def check_contracts(result: tiler.RunResult, verified) -> list[str]:
    problems = []
    try:
        result.ledger.check()
    except LedgerError as e:
        problems.append(str(e))
    if verified is False:
        problems.append("simulated output differs from the functional model")
    return problems


# -- commands -----------------------------------------------------------------

def cmd_quantize(args, emit) -> int:
    with np.load(args.float_weights) as data:
        weights = {k: data[k] for k in data.files}
    model, report = weightfile.quantize_float_weights(weights, ModelConfig(num_cpab=args.num_cpab))
    weightfile.save(args.out, model)
    for row in report:
        emit(row)
    emit({"record": "weights", "path": str(args.out), "params": model.param_count()})
    return EXIT_OK


def cmd_run(args, emit) -> int:
    model = load_model(args.weights, args.num_cpab)
    img = imaging.read_image(args.input)
    y = imaging.luma(img)
    tw, th = args.tile
    plan = tiler.split(*y.shape, tile_w=tw, tile_h=th)
    trace = (lambda line: print(line, file=sys.stderr)) if args.trace else None
    result, verified = super_resolve(y, model, plan, args.mode, args.verify, args.jobs, trace)
    sr = result.pixels
    if img.ndim == 3:
        ycc = imaging.rgb_to_ycbcr(img)
        chroma = imaging.resize_float(ycc[..., 1:], 2)
        out = imaging.ycbcr_to_rgb(np.dstack([sr.astype(np.float64), chroma]))
    else:
        out = sr
    imaging.write_image(args.output, out)
    emit(run_record(result, verified, args.mode))
    problems = check_contracts(result, verified)
    for p in problems:
        print(f"contract violation: {p}", file=sys.stderr)
    return EXIT_CONTRACT if problems else EXIT_OK


def evaluate_image(path: Path, model: Model | None, tile, mode: str, verify: bool, scale: int = 2) -> dict:
    hr_y = imaging.luma(imaging.read_image(path))
    hr, lr = imaging.degrade(hr_y, scale)
    row = {"record": "eval", "image": path.name}
    if model is None:
        sr = imaging.bicubic_resize(lr, scale)
    else:
        plan = tiler.split(*lr.shape, tile_w=tile[0], tile_h=tile[1])
        result, verified = super_resolve(lr, model, plan, mode, verify)
        sr = result.pixels
        row["bytes_intermediate"] = result.ledger.bytes_intermediate
        row["problems"] = check_contracts(result, verified)
        if result.stats is not None:
            row["cycles"] = result.stats.cycles
    row["psnr"] = imaging.psnr(sr, hr, shave=scale)
    return row


def cmd_eval(args, emit) -> int:
    root = Path(args.dataset)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in imaging.IMAGE_SUFFIXES) if root.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no images found in {root}")
    model = None if args.baseline == "bicubic" else load_model(args.weights, args.num_cpab)

    def one(p):
        return evaluate_image(p, model, args.tile, args.mode, args.verify)

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(one, files))
    else:
        rows = [one(p) for p in files]
    problems = []
    for row in rows:
        problems += row.pop("problems", [])
        emit({**row, "psnr": _finite(row["psnr"])})
    values = [r["psnr"] for r in rows]
    mean = float(np.mean(values))
    emit({"record": "eval_mean", "dataset": root.name, "method": args.baseline or f"model/{args.mode}",
          "images": len(rows), "mean_psnr": _finite(mean)})
    for p in problems:
        print(f"contract violation: {p}", file=sys.stderr)
    return EXIT_CONTRACT if problems else EXIT_OK


def cmd_stats(args, emit) -> int:
    model = load_model(args.weights, args.num_cpab)
    cfg = model.config
    tw, th = args.tile
    emit({"record": "model", "params": param_count(cfg), "num_cpab": cfg.num_cpab,
          "layers": [{"name": n, "kind": k, "shape": list(s)} for n, k, s in cfg.layer_shapes()]})
    banks = SramBankSet()
    report = capacity_report(cfg, th, tw, banks)
    for rec in report.records():
        emit(rec)
    emit({"record": "sram_total", "capacity_bytes": banks.total_bytes, "budget_bytes": 232 * 1024,
          "peak_layer": report.peak_layer})
    plan = tiler.split(args.height, args.width, tile_w=tw, tile_h=th)
    emit({"record": "tiles", "rows": plan.rows, "cols": plan.cols, "count": len(plan.tiles),
          "receptive_radius": tiler.receptive_radius(cfg)})
    rep = pesim.throughput_report(model, args.height, args.width, th, tw, args.freq_mhz * 1e6, args.fps)
    emit(rep)
    ok = all(report.ok.values()) and rep["cycle_mismatch"] == 0
    return EXIT_OK if ok else EXIT_CONTRACT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsra", description="Fixed-point pixel-attention SR model and accelerator simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, weights=True):
        if weights:
            sp.add_argument("--weights", help="weight file (random weights seeded by BSRA_SEED if omitted)")
            sp.add_argument("--num-cpab", type=int, default=2, help="CPAB count for random weights")
        sp.add_argument("--tile", type=parse_tile, default=(tiler.TILE_W, tiler.TILE_H), metavar="WxH")
        sp.add_argument("--stats-out", metavar="PATH", help="also write the JSON records here")

    q = sub.add_parser("quantize", help="quantize float weights (.npz) into a weight file")
    q.add_argument("float_weights")
    q.add_argument("out")
    q.add_argument("--num-cpab", type=int, default=2)
    q.add_argument("--stats-out", metavar="PATH")

    r = sub.add_parser("run", help="super-resolve one image")
    r.add_argument("input")
    r.add_argument("output")
    r.add_argument("--mode", choices=("functional", "simulate"), default="functional")
    r.add_argument("--verify", action="store_true", help="run both paths and require identical output")
    r.add_argument("--trace", action="store_true", help="per-cycle trace on stderr (simulate mode)")
    r.add_argument("--jobs", type=int, default=1)
    common(r)

    e = sub.add_parser("eval", help="PSNR over a directory of HR images")
    e.add_argument("dataset")
    e.add_argument("--mode", choices=("functional", "simulate"), default="functional")
    e.add_argument("--verify", action="store_true")
    e.add_argument("--baseline", choices=("bicubic",))
    e.add_argument("--jobs", type=int, default=1)
    common(e)

    s = sub.add_parser("stats", help="capacity, cycle and throughput report")
    s.add_argument("--height", type=int, default=540, help="input (LR) height")
    s.add_argument("--width", type=int, default=960, help="input (LR) width")
    s.add_argument("--freq-mhz", type=float, default=471.0)
    s.add_argument("--fps", type=float, default=30.0)
    common(s)
    return p


COMMANDS = {"quantize": cmd_quantize, "run": cmd_run, "eval": cmd_eval, "stats": cmd_stats}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    emit = Emitter(getattr(args, "stats_out", None))
    try:
        return COMMANDS[args.command](args, emit)
    except (OSError, ValueError, CapacityError, LedgerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        emit.close()


if __name__ == "__main__":
    sys.exit(main())
