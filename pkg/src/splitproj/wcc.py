"""Within-class compaction: a client-side penalty on per-class scatter of the
transmitted representation.

Labels only index the batch here; nothing in this module produces data that
leaves the client.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class WccConfig:
    lam: float = 0.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise InvalidArgument(f"lambda must be nonnegative, got {self.lam}")


def _groups(z_tilde, labels):
    z = np.asarray(z_tilde)
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] < 1:
        raise InvalidArgument(f"need a non-empty (batch, k) array, got shape {z.shape}")
    if y.shape != (z.shape[0],):
        raise InvalidArgument(f"expected {z.shape[0]} labels, got shape {y.shape}")
    classes, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    return z.astype(np.float64), classes, inverse, counts


def class_centroids(z_tilde, labels) -> dict[int, np.ndarray]:
    z, classes, inverse, counts = _groups(z_tilde, labels)
    sums = np.zeros((len(classes), z.shape[1]))
    np.add.at(sums, inverse, z)
    means = sums / counts[:, None]
    dtype = np.asarray(z_tilde).dtype
    return {int(c): means[i].astype(dtype) for i, c in enumerate(classes)}


def _centered(z_tilde, labels):
    z, classes, inverse, counts = _groups(z_tilde, labels)
    sums = np.zeros((len(classes), z.shape[1]))
    np.add.at(sums, inverse, z)
    means = sums / counts[:, None]
    return z - means[inverse], counts[inverse]


def wcc_loss(z_tilde, labels) -> float:
    """Sum over classes of the mean squared distance to the class centroid."""
    diff, sizes = _centered(z_tilde, labels)
    return float(np.sum((diff ** 2).sum(axis=1) / sizes))


def wcc_grad(z_tilde, labels) -> np.ndarray:
    """Closed form ``2 (z_i - mu_{y_i}) / |S_{y_i}|``.

    The centroid's own dependence on ``z_i`` drops out because deviations
    from the centroid sum to zero within each class.
    """
    diff, sizes = _centered(z_tilde, labels)
    grad = 2.0 * diff / sizes[:, None]
    dtype = np.asarray(z_tilde).dtype
    return grad.astype(dtype if dtype.kind == "f" else np.float32)


def total_loss(ce: float, wcc: float, cfg: WccConfig) -> float:
    if cfg.lam == 0:
        return ce
    return ce + cfg.lam * wcc
