import json

import numpy as np
import pytest

from bsra import cli, imaging, weightfile
from bsra.hpan import Model, ModelConfig
from bsra.weightfile import WeightFileError


def records(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.strip()]


def float_weights(rng, cfg=ModelConfig()):
    return {name: rng.normal(0, 0.3, shape) for name, _, shape in cfg.layer_shapes()}


def test_weightfile_round_trip(model):
    again = weightfile.decode(weightfile.encode(model))
    for name, lw in model.layers.items():
        np.testing.assert_array_equal(again.layers[name].taps, lw.taps)
    assert again.config == model.config


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:10], "truncated"),
    (lambda b: b[:-2], "payload"),
    (lambda b: b[:4] + b"\x09\x00" + b[6:], "version"),
])
def test_weightfile_errors(model, mutate, msg):
    with pytest.raises(WeightFileError, match=msg):
        weightfile.decode(mutate(weightfile.encode(model)))


def test_quantize_examples(rng):
    w = float_weights(rng)
    w["head"][:] = 0.0
    w["tail"][0, 0, 0, 0] = 1.0
    model, report = weightfile.quantize_float_weights(w)
    assert np.all(model.layers["head"].taps == 0)
    assert model.layers["tail"].taps[0, 0, 0, 0] == 256
    assert all(r["max_abs_error"] <= 2 ** -9 for r in report if r["saturated"] == 0)
    with pytest.raises(WeightFileError, match="missing"):
        weightfile.quantize_float_weights({k: v for k, v in w.items() if k != "tail"})
    with pytest.raises(WeightFileError, match="shape"):
        weightfile.quantize_float_weights({**w, "head": np.zeros((1, 1, 5, 5))})


def test_cli_quantize_then_run(tmp_path, rng, capsys):
    np.savez(tmp_path / "w.npz", **float_weights(rng))
    assert cli.main(["quantize", str(tmp_path / "w.npz"), str(tmp_path / "w.bsra")]) == 0
    recs = records(capsys)
    assert recs[-1] == {"record": "weights", "path": str(tmp_path / "w.bsra"), "params": 25_920}
    imaging.write_image(tmp_path / "in.pgm", rng.integers(0, 256, (20, 16)).astype(np.uint8))
    rc = cli.main(["run", str(tmp_path / "in.pgm"), str(tmp_path / "out.pgm"), "--weights", str(tmp_path / "w.bsra")])
    assert rc == 0
    assert imaging.read_image(tmp_path / "out.pgm").shape == (40, 32)


def test_cli_run_simulate_verify(tmp_path, rng, capsys):
    imaging.write_image(tmp_path / "in.pgm", rng.integers(0, 256, (48, 40)).astype(np.uint8))
    stats = tmp_path / "stats.jsonl"
    rc = cli.main(["run", str(tmp_path / "in.pgm"), str(tmp_path / "out.pgm"), "--mode", "simulate", "--verify",
                   "--stats-out", str(stats)])
    assert rc == 0
    rec = records(capsys)[-1]
    assert rec["verified"] is True and rec["bytes_intermediate"] == 0
    assert rec["bytes_weights"] == 35_640 and rec["cycles"] == 201_695
    assert json.loads(stats.read_text().splitlines()[-1]) == rec


def test_cli_run_one_pixel_and_rgb(tmp_path, capsys):
    imaging.write_image(tmp_path / "px.pgm", np.array([[128]], np.uint8))
    assert cli.main(["run", str(tmp_path / "px.pgm"), str(tmp_path / "o.pgm"), "--mode", "simulate"]) == 0
    assert imaging.read_image(tmp_path / "o.pgm").shape == (2, 2)
    imaging.write_image(tmp_path / "c.ppm", np.full((6, 5, 3), 90, np.uint8))
    assert cli.main(["run", str(tmp_path / "c.ppm"), str(tmp_path / "c2.ppm")]) == 0
    assert imaging.read_image(tmp_path / "c2.ppm").shape == (12, 10, 3)


def test_cli_run_trace(tmp_path, capsys):
    imaging.write_image(tmp_path / "px.pgm", np.zeros((2, 2), np.uint8))
    assert cli.main(["run", str(tmp_path / "px.pgm"), str(tmp_path / "o.pgm"), "--mode", "simulate", "--trace"]) == 0
    err = capsys.readouterr().err.splitlines()
    assert err[0].startswith("0 pe head conv")


def test_cli_seed_determinism(tmp_path, rng, monkeypatch, capsys):
    imaging.write_image(tmp_path / "in.pgm", rng.integers(0, 256, (9, 9)).astype(np.uint8))
    monkeypatch.setenv("BSRA_SEED", "5")
    cli.main(["run", str(tmp_path / "in.pgm"), str(tmp_path / "a.pgm")])
    cli.main(["run", str(tmp_path / "in.pgm"), str(tmp_path / "b.pgm")])
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_cli_eval(tmp_path, rng, capsys):
    d = tmp_path / "set"
    d.mkdir()
    for i in range(2):
        imaging.write_image(d / f"im{i}.pgm", rng.integers(0, 256, (18, 15)).astype(np.uint8))
    assert cli.main(["eval", str(d), "--baseline", "bicubic"]) == 0
    recs = records(capsys)
    rows = [r for r in recs if r["record"] == "eval"]
    assert [r["image"] for r in rows] == ["im0.pgm", "im1.pgm"]
    assert recs[-1]["images"] == 2
    assert np.isclose(recs[-1]["mean_psnr"], np.mean([r["psnr"] for r in rows]))
    assert cli.main(["eval", str(d), "--mode", "simulate", "--verify", "--jobs", "2"]) == 0
    assert all(r.get("bytes_intermediate") == 0 for r in records(capsys) if r["record"] == "eval")


def test_cli_errors(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["eval", str(tmp_path / "empty"), "--baseline", "bicubic"]) == 2
    assert cli.main(["run", str(tmp_path / "nope.pgm"), str(tmp_path / "o.pgm")]) == 2
    (tmp_path / "bad.pgm").write_bytes(b"P5\n2 2\n1023\n" + bytes(8))
    assert cli.main(["run", str(tmp_path / "bad.pgm"), str(tmp_path / "o.pgm")]) == 2
    imaging.write_image(tmp_path / "big.pgm", np.zeros((100, 100), np.uint8))
    assert cli.main(["run", str(tmp_path / "big.pgm"), str(tmp_path / "o.pgm"), "--tile", "100x100"]) == 2
    assert "capacity" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["run", "a", "b", "--tile", "40by48"])


def test_cli_stats(capsys):
    assert cli.main(["stats", "--height", "96", "--width", "80"]) == 0
    recs = {r["record"]: r for r in records(capsys)}
    assert recs["model"]["params"] == 25_920
    assert recs["tiles"]["count"] == 4
    assert recs["throughput"]["cycle_mismatch"] == 0
    assert recs["throughput"]["frame_cycles_sim"] == 4 * 201_695
