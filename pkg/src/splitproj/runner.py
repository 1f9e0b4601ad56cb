"""End-to-end experiment runs, report files and cross-run comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict

import numpy as np

from .attacks import decoder_inversion, encode_with, gradient_match_inversion
from .config import ExperimentConfig, config_hash
from .data import (Dataset, PoisonSpec, apply_poison, dataset_hash, dirichlet_partition,
                   load_idx, select_malicious, synth_blobs, train_test_split)
from .detection import client_signatures, mad_z_detector
from .errors import InvalidArgument, SplitError
from .linalg import RngStream
from .models import build_split_model
from .nn import accuracy
from .protocol import (ClientModel, ClientState, CutConfig, OptimSpec, Session, comm_account,
                       serve_forever, server_setup, trace_checksum)
from .wcc import WccConfig

log = logging.getLogger(__name__)

REPORT_SCHEMA = "splitproj.run/1"
NONDETERMINISTIC = ("wall_time",)

# stream tags, one per consumer of randomness
TAG_DATA, TAG_SPLIT, TAG_PARTITION, TAG_POISON, TAG_MODEL, TAG_BATCH, TAG_ATTACK = range(1, 8)


class RunError(SplitError):
    """A run failed; the message carries the stage that failed."""


def prepare_data(cfg: ExperimentConfig, root: RngStream) -> dict:
    if cfg.dataset == "blobs":
        ds = synth_blobs(cfg.classes, cfg.per_class, cfg.dims, cfg.spread, root.spawn(TAG_DATA))
    else:
        ds = load_idx(cfg.idx_images, cfg.idx_labels)
    rest, aux = train_test_split(ds, cfg.aux_fraction, root.spawn(TAG_SPLIT))
    denom = 1.0 - cfg.aux_fraction
    train, test = train_test_split(rest, cfg.test_fraction / denom if denom else 0.0,
                                   root.spawn(TAG_SPLIT).spawn(1))
    shards = dirichlet_partition(train, cfg.n_clients, cfg.alpha, root.spawn(TAG_PARTITION))
    malicious = []
    if cfg.poison_rate > 0:
        spec = PoisonSpec(target_class=cfg.poison_target, rate=cfg.poison_rate,
                          malicious_fraction=cfg.malicious_fraction)
        prng = root.spawn(TAG_POISON)
        malicious = select_malicious(cfg.n_clients, spec, prng.spawn(0))
        for i in malicious:
            shards[i] = apply_poison(shards[i], spec, prng.spawn(1 + i))
    return {"dataset": ds, "train": train, "test": test, "aux": aux, "shards": shards,
            "malicious": malicious}


def build_system(cfg: ExperimentConfig, data: dict, root: RngStream):
    """Server and client states for one run (nothing is connected yet)."""
    shape = data["train"].sample_shape
    model = build_split_model(cfg.arch, shape, data["dataset"].num_classes, cfg.head_depth,
                              cfg.width, root.spawn(TAG_MODEL))
    cut = CutConfig(kind=cfg.bottleneck, k=cfg.k or None, cr=cfg.cr, mode=cfg.mode,
                    hidden=cfg.liftback_hidden, seed=cfg.effective_projection_seed,
                    distribution=cfg.projection)
    if cfg.bottleneck == "projection":
        d, k = model.cut_dim, cfg.payload_k(shape)
        if k > d:
            raise InvalidArgument(f"k={k} exceeds the cut dimension d={d}")
    optim = OptimSpec(cfg.optimizer, cfg.lr)
    server = server_setup(model.backbone, model.cut_shape, cut, range(cfg.n_clients), optim)
    server.record_observations = cfg.detect
    shared = ClientModel(model.head, model.tail, cut, optim)
    clients = []
    for i, shard in enumerate(data["shards"]):
        cm = shared if cfg.ownership == "SCH" else ClientModel(model.head.clone(), model.tail.clone(), cut, optim)
        clients.append(ClientState(i, cm, shard.images, shard.labels, cfg.batch_size,
                                   WccConfig(cfg.lambda_wcc), root.spawn(TAG_BATCH).spawn(i)))
    return model, server, clients


def _evaluate(clients, server, ds: Dataset) -> float | None:
    if len(ds) == 0:
        return None
    models = {id(c.model): c.model for c in clients}.values()
    accs = [accuracy(m.predict(ds.images, server.backbone_fn), ds.labels) for m in models]
    return float(np.mean(accs))


def _train_accuracy(clients, server) -> float:
    correct = total = 0
    for c in clients:
        logits = c.model.predict(c.batches.images, server.backbone_fn)
        correct += int((np.argmax(logits, axis=1) == c.batches.labels).sum())
        total += len(c.batches.labels)
    return correct / total


def deterministic_hash(report: dict) -> str:
    body = {k: v for k, v in report.items() if k not in NONDETERMINISTIC}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def run(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Train, optionally attack and screen, and return the RunReport dict."""
    timings = {}
    t0 = time.perf_counter()
    root = RngStream(cfg.seed)
    stage = "data"
    try:
        data = prepare_data(cfg, root)
        stage = "setup"
        model, server, clients = build_system(cfg, data, root)
        timings["setup"] = time.perf_counter() - t0
        stage = "training"
        history = []
        traces = []
        with Session(server, clients, cfg.transport, cfg.address, cfg.timeout) as session:
            for r in range(cfg.rounds):
                traces += session.run(1)
                if (r + 1) % cfg.eval_every == 0 or r + 1 == cfg.rounds:
                    history.append({"round": r + 1, "train_acc": _train_accuracy(clients, server),
                                    "test_acc": _evaluate(clients, server, data["test"])})
            counters = session.byte_counters()
        timings["training"] = time.perf_counter() - t0 - timings["setup"]
        payload = cfg.payload_k(data["train"].sample_shape) or server.cut.payload_dim
        comm = comm_account(traces, k=payload)
        stage = "attack"
        attacks = run_attacks(cfg, data, clients[0].model, server, root) if cfg.attack != "none" else None
        stage = "detection"
        detection = None
        if cfg.detect:
            sigs = client_signatures(server.observed, cfg.detect_source)
            detection = mad_z_detector(sigs, truth=data["malicious"] if cfg.poison_rate > 0 else None).as_dict()
    except SplitError as exc:
        raise RunError(f"{stage} stage failed: {exc}") from exc
    timings["total"] = time.perf_counter() - t0
    ces = [t.ce for t in traces]
    report = {
        "schema": REPORT_SCHEMA,
        "label": cfg.label(),
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "dataset_hash": dataset_hash(data["dataset"]),
        "cut": {"kind": cfg.bottleneck, "mode": server.mode, "d": model.cut_dim,
                "payload_dim": int(server.cut.payload_dim),
                "liftback_params": int(server.liftback_trainable)},
        "accuracy": history,
        "final": history[-1] if history else {"round": 0, "train_acc": None, "test_acc": None},
        "comm": comm.as_dict(),
        "bytes": counters,
        "trace": {"steps": len(traces), "checksum": trace_checksum(traces),
                  "first_ce": ces[0] if ces else None, "last_ce": ces[-1] if ces else None,
                  "mean_ce": float(np.mean(ces)) if ces else None},
        "malicious": data["malicious"],
        "attacks": None if attacks is None else attacks["reports"],
        "detection": detection,
        "wall_time": timings,
    }
    report["deterministic_hash"] = deterministic_hash(report)
    if write:
        write_outputs(cfg, report, traces, attacks)
    return report


def run_attacks(cfg: ExperimentConfig, data: dict, client_model: ClientModel, server, root) -> dict:
    rng = root.spawn(TAG_ATTACK)
    victims = data["test"].images[:cfg.attack_images]
    if len(victims) == 0:
        raise InvalidArgument("no held-out images to attack")
    basis = server.basis
    encode = encode_with(client_model.head, basis)
    observed = encode(victims)
    out = {"reports": {}, "images": {"original": victims}}
    if cfg.attack in ("decoder", "both"):
        recon, rep = decoder_inversion(observed, victims, encode, data["aux"].images, basis=basis,
                                       arch=cfg.attack_decoder, epochs=cfg.attack_epochs,
                                       lr=cfg.attack_lr, rng=rng.spawn(0))
        out["reports"]["decoder_inversion"] = rep.as_dict()
        out["images"]["decoder_inversion"] = recon
    if cfg.attack in ("gradient_match", "both"):
        res = gradient_match_inversion(observed, client_model.head, basis=basis,
                                       iterations=cfg.attack_iterations, box=(0.0, 1.0),
                                       reference=victims, rng=rng.spawn(1))
        out["reports"]["gradient_match"] = res.report.as_dict()
        out["images"]["gradient_match"] = res.reconstruction
    return out


def write_pgm(path, image: np.ndarray):
    """Binary PGM for ``(H, W)`` or ``(1, H, W)``; PPM for three channels."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    pixels = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    if pixels.ndim == 2:
        head = b"P5\n%d %d\n255\n" % (pixels.shape[1], pixels.shape[0])
    elif pixels.ndim == 3 and pixels.shape[0] == 3:
        pixels = pixels.transpose(1, 2, 0)
        head = b"P6\n%d %d\n255\n" % (pixels.shape[1], pixels.shape[0])
    else:
        raise InvalidArgument(f"cannot write image of shape {image.shape}")
    with open(path, "wb") as fh:
        fh.write(head + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4], dtype=np.uint8)
    if magic == b"P5":
        return data.reshape(h, w).astype(np.float32) / maxval
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / maxval


def write_outputs(cfg: ExperimentConfig, report: dict, traces, attacks):
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("round", "train_acc", "test_acc"))
        for row in report["accuracy"]:
            w.writerow((row["round"], row["train_acc"], row["test_acc"]))
    with open(os.path.join(out, "trace.jsonl"), "w") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")
    if attacks:
        for name, rep in attacks["reports"].items():
            with open(os.path.join(out, f"{name}.csv"), "w") as fh:
                w = csv.writer(fh, lineterminator="\n")
                fields = ("mse", "psnr", "ssim", "mse_fg", "psnr_fg", "ssim_fg")
                w.writerow(("image",) + fields)
                for i, row in enumerate(rep["rows"]):
                    w.writerow((i,) + tuple("" if row[f] is None else row[f] for f in fields))
        if cfg.save_images:
            img_dir = os.path.join(out, "images")
            os.makedirs(img_dir, exist_ok=True)
            for name, stack in attacks["images"].items():
                for i, img in enumerate(stack):
                    write_pgm(os.path.join(img_dir, f"{name}_{i:03d}.pgm"), img)


def run_server(cfg: ExperimentConfig, address: str, timeout: float | None = None):
    """Server half of split-process mode."""
    root = RngStream(cfg.seed)
    data = prepare_data(cfg, root)
    _, server, _ = build_system(cfg, data, root)
    serve_forever(server, address, cfg.n_clients, timeout)


def run_clients(cfg: ExperimentConfig, address: str) -> dict:
    """Client half of split-process mode; accuracy needs the server, so it is omitted."""
    t0 = time.perf_counter()
    root = RngStream(cfg.seed)
    data = prepare_data(cfg, root)
    _, _, clients = build_system(cfg, data, root)
    with Session(None, clients, "tcp", address, cfg.timeout) as session:
        traces = session.run(cfg.rounds)
        counters = session.byte_counters()
    payload = cfg.payload_k(data["train"].sample_shape) or (traces[0].messages[0].dim if traces else 0)
    report = {"schema": REPORT_SCHEMA, "label": cfg.label(), "config": asdict(cfg),
              "config_hash": config_hash(cfg), "seed": cfg.seed,
              "dataset_hash": dataset_hash(data["dataset"]),
              "comm": comm_account(traces, k=payload).as_dict(), "bytes": counters,
              "trace": {"steps": len(traces), "checksum": trace_checksum(traces)},
              "wall_time": {"total": time.perf_counter() - t0}}
    report["deterministic_hash"] = deterministic_hash(report)
    return report


# comparison -----------------------------------------------------------------

AXIS_KEYS = ("dataset", "classes", "per_class", "dims", "spread", "idx_images", "idx_labels",
             "n_clients", "alpha", "arch", "head_depth", "width", "rounds")


def format_ratio(x) -> str:
    return "n/a" if x is None else f"×{x:.2f}"


def _metric(report: dict, name: str):
    atk = report.get("attacks") or {}
    rep = atk.get("decoder_inversion") or atk.get("gradient_match")
    return None if rep is None else rep["mean"].get(name)


def compare(reports: list[dict]) -> dict:
    """Accuracy deltas (percent of Raw) and metric ratios Method/Raw per seed, then aggregated."""
    if not reports:
        raise InvalidArgument("nothing to compare")
    axes = {tuple(r["config"].get(k) for k in AXIS_KEYS) for r in reports}
    if len(axes) > 1:
        raise InvalidArgument("reports differ in dataset or training axes")
    by_method: dict[str, dict[int, dict]] = {}
    for r in reports:
        by_method.setdefault(r["label"], {})[r["seed"]] = r
    seeds = {m: set(v) for m, v in by_method.items()}
    all_seeds = set().union(*seeds.values())
    if any(s != all_seeds for s in seeds.values()):
        raise InvalidArgument("reports do not share the same seeds")
    raw = next((m for m in by_method if m.startswith("raw") and "wcc" not in m), None)
    baseline = by_method[raw] if raw else next(iter(by_method.values()))
    rows = []
    for method, runs in by_method.items():
        for seed in sorted(runs):
            r, b = runs[seed], baseline[seed]
            acc, acc_b = r["final"]["test_acc"], b["final"]["test_acc"]
            row = {"method": method, "seed": seed, "test_acc": acc,
                   "delta_acc_pct": None if acc is None or not acc_b else 100.0 * (acc - acc_b) / acc_b}
            for name in ("mse", "mse_fg", "ssim", "ssim_fg"):
                a, c = _metric(r, name), _metric(b, name)
                row[f"{name}_ratio"] = None if a is None or not c else a / c
            rows.append(row)
    summary = []
    for method in by_method:
        mine = [row for row in rows if row["method"] == method]
        entry = {"method": method}
        for col in ("test_acc", "delta_acc_pct", "mse_ratio", "mse_fg_ratio", "ssim_ratio", "ssim_fg_ratio"):
            vals = [row[col] for row in mine if row[col] is not None]
            entry[col] = ({"mean": float(np.mean(vals)), "min": float(np.min(vals)),
                           "max": float(np.max(vals))} if vals else None)
        summary.append(entry)
    return {"baseline": raw, "rows": rows, "summary": summary}


def comparison_table(result: dict) -> str:
    lines = [f"baseline: {result['baseline']}",
             f"{'method':<28}{'acc mean':>10}{'Δacc% mean':>12}{'MSE_fg ratio (mean/min/max)':>34}"]
    for e in result["summary"]:
        acc = e["test_acc"]["mean"] if e["test_acc"] else None
        dacc = e["delta_acc_pct"]["mean"] if e["delta_acc_pct"] else None
        r = e["mse_fg_ratio"]
        ratio = (" / ".join(format_ratio(r[x]) for x in ("mean", "min", "max")) if r else "n/a")
        lines.append(f"{e['method']:<28}{'n/a' if acc is None else f'{acc:.4f}':>10}"
                     f"{'n/a' if dacc is None else f'{dacc:+.2f}':>12}{ratio:>34}")
    return "\n".join(lines)
