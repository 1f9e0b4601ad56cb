"""Deterministic dense linear algebra on float32 arrays.

Tensors are plain ``numpy.float32`` arrays in C order.  Reductions and dot
products are accumulated in float64 and rounded once on store.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInput, InvalidArgument

F32 = np.float32
F64 = np.float64


class RngStream:
    """Seeded random stream.

    Uniform variates come from numpy's PCG64 bit generator, whose output is
    specified bit-for-bit across platforms.  Normal variates are derived from
    those uniforms with Box-Muller, never from numpy's ziggurat sampler.
    """

    ALGORITHM = "pcg64/box-muller/v1"

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise InvalidArgument(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size) -> np.ndarray:
        """Float64 uniforms in [0, 1)."""
        return self.generator.random(size)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal float64 samples via Box-Muller."""
        pairs = (n + 1) // 2
        u = self.generator.random((pairs, 2))
        # 1 - u lies in (0, 1], keeping log finite
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = radius * np.cos(theta)
        out[:, 1] = radius * np.sin(theta)
        return out.reshape(-1)[:n]

    def spawn(self, tag: int) -> "RngStream":
        """Independent child stream keyed by ``tag``."""
        return RngStream((self.seed * 0x9E3779B97F4A7C15 + int(tag) + 1) % 2**64)

    def __repr__(self):
        return f"RngStream(seed={self.seed})"


def as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))


def gaussian_matrix(rows: int, cols: int, rng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise InvalidArgument(f"dimensions must be positive, got {rows}x{cols}")
    rng = as_rng(rng)
    return rng.normal(rows * cols).reshape(rows, cols).astype(F32)


def uniform_matrix(rows: int, cols: int, rng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise InvalidArgument(f"dimensions must be positive, got {rows}x{cols}")
    return as_rng(rng).uniform((rows, cols)).astype(F32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, stored in ``a``'s dtype."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidArgument(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgument(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype, F32)
    return (a.astype(F64) @ b.astype(F64)).astype(out_dtype)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a).T)


def thin_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Householder thin QR of a ``d x k`` matrix with ``d >= k``.

    Returns ``(Q, T)`` with orthonormal columns in ``Q`` and an upper
    triangular ``T`` whose diagonal is nonnegative, which makes the pair
    unique for full-rank input.
    """
    a = np.asarray(a)
    if a.ndim != 2:
        raise InvalidArgument(f"thin_qr expects a matrix, got shape {a.shape}")
    d, k = a.shape
    if k < 1 or d < k:
        raise InvalidArgument(f"thin_qr needs d >= k >= 1, got d={d}, k={k}")
    out_dtype = np.result_type(a.dtype, F32)

    r = a.astype(F64).copy()
    scale = float(np.max(np.abs(r))) if r.size else 0.0
    vs = []
    for j in range(k):
        x = r[j:, j]
        alpha = np.linalg.norm(x)
        v = x.copy()
        # reflect onto -sign(x0)*|x| e1 to avoid cancellation
        v[0] += alpha if x[0] >= 0 else -alpha
        vnorm = np.linalg.norm(v)
        if vnorm > 0.0:
            v /= vnorm
            r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        vs.append(v)

    t = np.triu(r[:k, :])
    diag = np.abs(np.diag(t))
    if scale == 0.0 or np.any(diag < 1e-10 * scale):
        raise DegenerateInput("matrix is rank deficient to working precision")

    q = np.zeros((d, k))
    q[:k, :k] = np.eye(k)
    for j in range(k - 1, -1, -1):
        v = vs[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])

    signs = np.where(np.diag(t) < 0, -1.0, 1.0)
    q *= signs[None, :]
    t *= signs[:, None]
    return q.astype(out_dtype), t.astype(out_dtype)
