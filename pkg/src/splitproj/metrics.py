"""Reconstruction quality: MSE, PSNR and SSIM, plain and foreground-masked."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument

MSE_FLOOR = 1e-10
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0
FG_THRESHOLD = 0.1

METRIC_FIELDS = ("mse", "psnr", "ssim", "mse_fg", "psnr_fg", "ssim_fg")


def psnr_from_mse(mse: float) -> float:
    return -10.0 * math.log10(max(mse, MSE_FLOOR))


def _box_mean(x: np.ndarray, win: int) -> np.ndarray:
    """Mean over every ``win x win`` window fully inside ``x`` (valid mode)."""
    c = np.cumsum(np.cumsum(np.pad(x, ((1, 0), (1, 0))), axis=0), axis=1)
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim2d(a: np.ndarray, b: np.ndarray, win: int = SSIM_WINDOW) -> float:
    """Mean SSIM over valid windows; the window shrinks to fit small images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    win = min(win, a.shape[0], a.shape[1])
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    mu_a, mu_b = _box_mean(a, win), _box_mean(b, win)
    var_a = _box_mean(a * a, win) - mu_a ** 2
    var_b = _box_mean(b * b, win) - mu_b ** 2
    cov = _box_mean(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def ssim(a: np.ndarray, b: np.ndarray, win: int = SSIM_WINDOW) -> float:
    """SSIM of one image, ``(H, W)`` or ``(C, H, W)``; channels are averaged."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 2:
        return ssim2d(a, b, win)
    return float(np.mean([ssim2d(a[c], b[c], win) for c in range(a.shape[0])]))


def _bbox(mask2d: np.ndarray):
    rows = np.flatnonzero(mask2d.any(axis=1))
    cols = np.flatnonzero(mask2d.any(axis=0))
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def image_metrics(ref: np.ndarray, test: np.ndarray, mask_threshold: float | None = FG_THRESHOLD) -> dict:
    """Metrics for one image pair.

    With a threshold, the foreground is every pixel whose reference value
    exceeds it.  Masked MSE uses those pixels only; masked SSIM uses the
    tight bounding-box crop of the foreground.  Masked fields are ``None``
    when the foreground is empty.
    """
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise InvalidArgument(f"shape mismatch {ref.shape} vs {test.shape}")
    if ref.ndim == 2:
        ref, test = ref[None], test[None]
    if ref.ndim != 3:
        raise InvalidArgument(f"expected (H, W) or (C, H, W), got {ref.shape}")
    err = (ref - test) ** 2
    mse = float(err.mean())
    row = {"mse": mse, "psnr": psnr_from_mse(mse), "ssim": ssim(ref, test),
           "mse_fg": None, "psnr_fg": None, "ssim_fg": None}
    if mask_threshold is None:
        return row
    mask = ref > mask_threshold
    if mask.any():
        mse_fg = float(err[mask].mean())
        rs, cs = _bbox(mask.any(axis=0))
        row.update(mse_fg=mse_fg, psnr_fg=psnr_from_mse(mse_fg),
                   ssim_fg=ssim(ref[:, rs, cs], test[:, rs, cs]))
    return row


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class ReconReport:
    rows: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_images(cls, refs, tests, mask_threshold: float | None = FG_THRESHOLD, **meta) -> "ReconReport":
        refs = np.asarray(refs)
        tests = np.asarray(tests)
        if refs.shape != tests.shape:
            raise InvalidArgument(f"shape mismatch {refs.shape} vs {tests.shape}")
        rows = [image_metrics(r, t, mask_threshold) for r, t in zip(refs, tests)]
        report = cls(rows, {}, {}, {"ssim_window": f"{SSIM_WINDOW}x{SSIM_WINDOW} uniform",
                                    "mask_threshold": mask_threshold,
                                    "label": "directional", **meta})
        report.mean = {f: _mean(r[f] for r in rows) for f in METRIC_FIELDS}
        return report

    def with_baseline(self, baseline: "ReconReport") -> "ReconReport":
        """Attach ``self / baseline`` ratios of the mean metrics."""
        out = {}
        for f in METRIC_FIELDS:
            a, b = self.mean.get(f), baseline.mean.get(f)
            out[f] = None if a is None or not b else a / b
        self.ratios = out
        return self

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("image",) + METRIC_FIELDS)
        for i, r in enumerate(self.rows):
            w.writerow((i,) + tuple("" if r[f] is None else repr(r[f]) for f in METRIC_FIELDS))
        w.writerow(("mean",) + tuple("" if self.mean[f] is None else repr(self.mean[f])
                                     for f in METRIC_FIELDS))
        return buf.getvalue()
