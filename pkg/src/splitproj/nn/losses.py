from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / b``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise InvalidArgument(f"logits must be (batch, classes), got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise InvalidArgument(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidArgument(f"labels must lie in [0, {c})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    grad /= b
    out_dtype = logits.dtype if logits.dtype.kind == "f" else np.float32
    return loss, grad.astype(out_dtype)


def accuracy(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
