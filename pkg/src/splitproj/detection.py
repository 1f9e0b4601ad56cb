"""Cosine-to-consensus backdoor screening with a robust MAD z-score."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument

MAD_SCALE = 1.4826  # normal-consistency constant
MAD_FLOOR = 1e-12
THRESHOLD = 3.0


def f1_score(predicted, truth) -> tuple[float, float, float]:
    """``(precision, recall, f1)``; two empty sets count as a perfect match."""
    predicted, truth = set(predicted), set(truth)
    tp = len(predicted & truth)
    fp = len(predicted - truth)
    fn = len(truth - predicted)
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, 2 * tp / (2 * tp + fp + fn)


@dataclass
class DetectionReport:
    client_ids: list
    scores: list
    z: list
    flagged: list
    truth: list | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("client", "cosine", "mad_z", "flagged"))
        flagged = set(self.flagged)
        for cid, s, z in zip(self.client_ids, self.scores, self.z):
            w.writerow((cid, repr(s), repr(z), int(cid in flagged)))
        return buf.getvalue()


def mad_z_detector(vectors, truth=None, client_ids=None, threshold: float = THRESHOLD) -> DetectionReport:
    """Flag clients whose cosine to the mean vector is a robust outlier.

    ``vectors`` is ``(n_clients, dim)`` or a mapping from client id to a
    vector.  ``truth`` is the set of truly malicious ids, if known.
    """
    if isinstance(vectors, dict):
        client_ids = sorted(vectors)
        vectors = [np.ravel(vectors[c]) for c in client_ids]
    r = np.asarray(vectors, dtype=np.float64)
    if r.ndim != 2 or len(r) < 3:
        raise InvalidArgument(f"need vectors from at least 3 clients, got shape {r.shape}")
    if client_ids is None:
        client_ids = list(range(len(r)))
    consensus = r.mean(axis=0)
    norms = np.linalg.norm(r, axis=1) * np.linalg.norm(consensus)
    scores = np.divide(r @ consensus, norms, out=np.zeros(len(r)), where=norms > 0)
    med = np.median(scores)
    mad = np.median(np.abs(scores - med))
    z = (scores - med) / (MAD_SCALE * max(mad, MAD_FLOOR))
    flagged = [int(c) for c, zi in zip(client_ids, z) if abs(zi) > threshold]
    report = DetectionReport([int(c) for c in client_ids], scores.tolist(), z.tolist(), flagged,
                             meta={"mad_scale": MAD_SCALE, "threshold": threshold})
    if truth is not None:
        report.truth = sorted(int(t) for t in truth)
        report.precision, report.recall, report.f1 = f1_score(flagged, truth)
    return report


def client_signatures(observed: dict, source: str = "u") -> dict:
    """Per-client mean of what the server saw: backbone outputs ``u`` or payloads ``z``."""
    pick = {"z": 0, "u": 1}.get(source)
    if pick is None:
        raise InvalidArgument(f"source must be 'u' or 'z', got {source!r}")
    out = {}
    for cid, records in observed.items():
        rows = np.concatenate([np.reshape(rec[pick], (len(rec[pick]), -1)) for rec in records])
        out[cid] = rows.mean(axis=0)
    return out
