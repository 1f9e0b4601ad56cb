import json
import pathlib
import socket
import statistics
import threading
import time

import jsonschema
import numpy as np
import pytest

from splitproj.config import ExperimentConfig, with_overrides
from splitproj.errors import Disconnected, InvalidArgument
from splitproj.runner import (RunError, compare, comparison_table, format_ratio, read_pgm, run, run_clients,
                              run_server, write_pgm)

SCHEMA = json.loads((pathlib.Path(__file__).parents[1] / "docs" / "report_schema.json").read_text())

TINY = ExperimentConfig(per_class=30, dims=64, n_clients=3, width=32, rounds=2, batch_size=8,
                        attack_images=4, attack_epochs=2, attack_iterations=5)


def tiny(**kw):
    return with_overrides(TINY, **kw)


def test_report_is_deterministic_and_valid():
    a = run(tiny(lambda_wcc=0.1), write=False)
    b = run(tiny(lambda_wcc=0.1), write=False)
    assert a["deterministic_hash"] == b["deterministic_hash"]
    assert a["wall_time"] is not b["wall_time"]
    jsonschema.validate(a, SCHEMA)
    assert a["trace"]["steps"] == 6 and len(a["accuracy"]) == 2
    assert a["cut"] == {"kind": "projection", "mode": "LS-F", "d": 32, "payload_dim": 4, "liftback_params": 0}
    c = run(tiny(lambda_wcc=0.1, seed=1), write=False)
    assert c["deterministic_hash"] != a["deterministic_hash"]


def test_zero_rounds():
    rep = run(tiny(rounds=0), write=False)
    jsonschema.validate(rep, SCHEMA)
    assert rep["trace"]["steps"] == 0 and rep["accuracy"] == []
    assert rep["comm"]["total_bytes"] == 0 and rep["comm"]["samples"] == 0
    assert rep["final"]["test_acc"] is None


def test_raw_vs_projection_bytes_ratio_is_eight():
    raw = run(tiny(bottleneck="raw"), write=False)
    proj = run(tiny(cr=8.0), write=False)
    assert raw["comm"]["samples"] == proj["comm"]["samples"] > 0
    assert raw["comm"]["total_bytes"] == 8 * proj["comm"]["total_bytes"]
    assert raw["comm"]["measured_bytes"] == raw["comm"]["total_bytes"]


def test_other_bottlenecks_and_modes_run():
    for kw in (dict(mode="LS-L"), dict(bottleneck="learned-1x1", arch="cnn", dims=16, cr=4.0),
               dict(ownership="PCH", optimizer="sgd", lr=0.05), dict(transport="tcp")):
        rep = run(tiny(**kw), write=False)
        jsonschema.validate(rep, SCHEMA)
        assert rep["trace"]["steps"] == 6


def test_tcp_matches_inproc():
    a = run(tiny(), write=False)
    b = run(tiny(transport="tcp"), write=False)
    assert a["trace"]["checksum"] == b["trace"]["checksum"]
    assert a["deterministic_hash"] != b["deterministic_hash"]  # the config echo differs


def test_split_process_mode_matches_single_process():
    cfg = tiny(transport="tcp")
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    addr = f"127.0.0.1:{port}"
    server = threading.Thread(target=run_server, args=(cfg, addr, 10), daemon=True)
    server.start()
    report = None
    for _ in range(200):
        try:
            report = run_clients(cfg, addr)
            break
        except Disconnected:  # server still building its model
            time.sleep(0.05)
    server.join(timeout=10)
    assert report is not None
    assert report["trace"]["checksum"] == run(cfg, write=False)["trace"]["checksum"]


def test_outputs_written(tmp_path):
    cfg = tiny(attack="both", poison_rate=0.3, malicious_fraction=0.34, detect=True,
               out_dir=str(tmp_path / "out"))
    rep = run(cfg)
    jsonschema.validate(rep, SCHEMA)
    out = tmp_path / "out"
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk["deterministic_hash"] == rep["deterministic_hash"]
    assert (out / "metrics.csv").read_text().splitlines()[0] == "round,train_acc,test_acc"
    assert len((out / "trace.jsonl").read_text().splitlines()) == 6
    assert (out / "decoder_inversion.csv").exists() and (out / "gradient_match.csv").exists()
    assert len(list((out / "images").glob("*.pgm"))) == 12
    assert len(rep["malicious"]) == 1 and rep["detection"]["truth"] == rep["malicious"]
    assert len(rep["detection"]["client_ids"]) == 3


def test_data_failure_carries_stage():
    with pytest.raises(RunError, match="data stage"):
        run(tiny(per_class=1, classes=2, n_clients=40), write=False)


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(1, 5, 7)) / 255.0
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), img[0], atol=1e-7)
    rgb = np.random.default_rng(1).integers(0, 256, size=(3, 4, 2)) / 255.0
    write_pgm(tmp_path / "b.ppm", rgb)
    np.testing.assert_allclose(read_pgm(tmp_path / "b.ppm"), rgb, atol=1e-7)
    with pytest.raises(InvalidArgument):
        write_pgm(tmp_path / "c.pgm", np.zeros((2, 3, 3)))


# comparison

def fake_report(label, seed, acc, mse, **config):
    cfg = {"dataset": "blobs", "rounds": 5, **config}
    return {"label": label, "seed": seed, "config": cfg, "final": {"test_acc": acc},
            "attacks": {"decoder_inversion": {"mean": {"mse": mse, "mse_fg": mse, "ssim": 0.5, "ssim_fg": 0.5}}}}


def test_compare_self_is_neutral():
    r = fake_report("raw", 0, 0.8, 0.1)
    out = compare([r])
    row = out["rows"][0]
    assert row["delta_acc_pct"] == 0 and row["mse_ratio"] == 1 and row["ssim_fg_ratio"] == 1


def test_ratio_formatting():
    out = compare([fake_report("raw", 0, 0.9, 0.10), fake_report("proj-k32-LS-F", 0, 0.9, 0.127)])
    ratio = [r for r in out["rows"] if r["method"] != "raw"][0]["mse_ratio"]
    assert format_ratio(ratio) == "×1.27"
    assert "×1.27" in comparison_table(out)
    assert format_ratio(None) == "n/a"


def test_compare_three_seed_summary():
    raw = [fake_report("raw", s, a, m) for s, a, m in ((0, 0.90, 0.10), (1, 0.80, 0.20), (2, 1.00, 0.05))]
    proj = [fake_report("proj", s, a, m) for s, a, m in ((0, 0.85, 0.15), (1, 0.80, 0.30), (2, 0.95, 0.09))]
    out = compare(raw + proj)
    assert out["baseline"] == "raw"
    summary = {e["method"]: e for e in out["summary"]}["proj"]
    ratios = [0.15 / 0.10, 0.30 / 0.20, 0.09 / 0.05]
    deltas = [100 * (0.85 - 0.90) / 0.90, 0.0, 100 * (0.95 - 1.00) / 1.00]
    assert summary["mse_ratio"]["mean"] == pytest.approx(statistics.mean(ratios))
    assert summary["mse_ratio"]["min"] == pytest.approx(1.5) and summary["mse_ratio"]["max"] == pytest.approx(1.8)
    assert summary["delta_acc_pct"]["mean"] == pytest.approx(statistics.mean(deltas))
    assert summary["test_acc"]["min"] == 0.80


def test_compare_rejects_mismatched_axes():
    with pytest.raises(InvalidArgument):
        compare([fake_report("raw", 0, 0.9, 0.1), fake_report("proj", 0, 0.9, 0.1, rounds=6)])
    with pytest.raises(InvalidArgument):
        compare([fake_report("raw", 0, 0.9, 0.1), fake_report("proj", 1, 0.9, 0.1)])
    with pytest.raises(InvalidArgument):
        compare([])
