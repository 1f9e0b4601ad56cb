"""Desk-scale inversion attacks against recorded cut-layer traffic.

Both attacks are simplified stand-ins for the published ones and are only
meant for directional comparisons between bottlenecks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bottleneck import ProjectionBasis, lift_fixed, project
from .errors import InvalidArgument
from .linalg import as_rng, matmul
from .metrics import ReconReport
from .nn import Dense, Network, Optimizer, ReLU


def _decoder_input(basis: ProjectionBasis | None, payload: np.ndarray) -> np.ndarray:
    payload = np.asarray(payload, dtype=np.float32)
    return payload if basis is None else lift_fixed(basis, payload).astype(np.float32)


def build_decoder(in_dim: int, out_dim: int, arch: str = "mlp", hidden: int = 256, rng=0) -> Network:
    rng = as_rng(rng)
    if arch == "linear":
        return Network([Dense(in_dim, out_dim, rng=rng.spawn(1))], (in_dim,), name="decoder")
    if arch == "mlp":
        return Network([Dense(in_dim, hidden, rng=rng.spawn(1)), ReLU(),
                        Dense(hidden, out_dim, rng=rng.spawn(2))], (in_dim,), name="decoder")
    raise InvalidArgument(f"unknown decoder architecture {arch!r}")


def _fit_linear(x: np.ndarray, y: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares affine map ``y ~ x W^T + b`` (ridge on ``W`` only)."""
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, xc.T @ yc).T
    return w, my - w @ mx


def decoder_inversion(victim_payload, victim_images, encode_fn, aux_images, *,
                      basis: ProjectionBasis | None = None, arch: str = "mlp", hidden: int = 256,
                      epochs: int = 30, batch_size: int = 64, lr: float = 1e-3,
                      ridge: float = 1e-6, rng=0) -> tuple[np.ndarray, ReconReport]:
    """Train a decoder from observed payloads back to images.

    ``encode_fn`` is the victim's frozen head plus cut encoder; the attacker
    pushes its auxiliary images through it to obtain training pairs.  With a
    projection ``basis`` the decoder sees the fixed lift-back of each
    payload.  ``arch="linear"`` is fitted in closed form.
    """
    aux_images = np.asarray(aux_images, dtype=np.float32)
    if len(aux_images) == 0:
        raise InvalidArgument("auxiliary set is empty")
    victim_images = np.asarray(victim_images, dtype=np.float32)
    shape = aux_images.shape[1:]
    x_aux = _decoder_input(basis, encode_fn(aux_images))
    y_aux = aux_images.reshape(len(aux_images), -1)
    x_vic = _decoder_input(basis, victim_payload)
    rng = as_rng(rng)
    if arch == "linear":
        w, b = _fit_linear(x_aux, y_aux, ridge)
        recon = x_vic.astype(np.float64) @ w.T + b
    else:
        dec = build_decoder(x_aux.shape[1], y_aux.shape[1], arch, hidden, rng.spawn(0))
        opt = Optimizer.for_networks([dec], lr=lr)
        order_rng = rng.spawn(1).generator
        n = len(x_aux)
        for _ in range(epochs):
            perm = order_rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = perm[s:s + batch_size]
                opt.zero_grad()
                out, tape = dec.forward(x_aux[idx])
                grad = 2.0 * (out - y_aux[idx]) / out.size
                dec.backward_from_seed(tape, grad.astype(np.float32))
                opt.step()
        dec.eval()
        recon = dec(x_vic)
    recon = np.clip(recon, 0.0, 1.0).reshape((len(x_vic),) + shape).astype(np.float32)
    report = ReconReport.from_images(victim_images, recon, attack="decoder_inversion",
                                     decoder=arch, epochs=epochs,
                                     bottleneck="raw" if basis is None else f"projection(k={basis.k})")
    return recon, report


@dataclass
class GradientMatchResult:
    reconstruction: np.ndarray
    losses: list
    report: ReconReport | None


def gradient_match_inversion(target_payload, head: Network, *, basis: ProjectionBasis | None = None,
                             iterations: int = 500, lr: float = 0.05, clone_lr: float = 0.0,
                             rule: str = "adam",
                             init: str = "zeros", box: tuple | None = None, reference=None,
                             rng=0) -> GradientMatchResult:
    """Recover inputs whose encoding matches ``target_payload``.

    Alternates a step on the clone head's parameters (skipped when
    ``clone_lr`` is zero) with a step on the candidate input, both on the
    squared payload mismatch.  ``head`` is copied; the caller's network is
    never modified.  ``reference`` images, when given, produce a report.
    With ``rule="sgd"`` and zero init every input update lies in the range
    of the head's adjoint, which keeps linear-head results analyzable.
    """
    target = np.asarray(target_payload, dtype=np.float64)
    rng = as_rng(rng)
    clone = head.clone()
    clone.train()
    shape = (len(target),) + tuple(head.input_shape)
    if init == "zeros":
        x = np.zeros(shape)
    elif init == "uniform":
        x = rng.spawn(3).uniform(shape)
    else:
        raise InvalidArgument(f"unknown init {init!r}")
    x_opt = Optimizer([x], rule=rule, lr=lr)
    clone_opt = Optimizer.for_networks([clone], lr=clone_lr) if clone_lr > 0 else None
    losses = []

    def mismatch():
        z, tape = clone.forward(x.astype(clone.dtype))
        zf = z.reshape(len(z), -1).astype(np.float64)
        enc = zf if basis is None else matmul(zf, basis.R.astype(np.float64))
        diff = enc - target
        g = 2.0 * diff / diff.size
        gz = g if basis is None else matmul(g, basis.R.T.astype(np.float64))
        return float(np.mean(diff ** 2)), tape, gz.reshape(z.shape)

    for _ in range(iterations):
        if clone_opt is not None:
            clone_opt.zero_grad()
            _, tape, gz = mismatch()
            clone.backward_from_seed(tape, gz.astype(clone.dtype))
            clone_opt.step()
        clone.zero_grad()
        loss, tape, gz = mismatch()
        _, gx = clone.backward_from_seed(tape, gz.astype(clone.dtype))
        x_opt.apply([np.asarray(gx, dtype=np.float64)])
        if box is not None:
            np.clip(x, box[0], box[1], out=x)
        losses.append(loss)
    report = None
    if reference is not None:
        report = ReconReport.from_images(np.asarray(reference), x.astype(np.float32),
                                         attack="gradient_match", iterations=iterations)
    return GradientMatchResult(x.astype(np.float32), losses, report)


def null_space_energy(x: np.ndarray, operator: np.ndarray) -> np.ndarray:
    """Per-row squared norm of the part of ``x`` orthogonal to ``range(operator)``.

    ``operator`` is ``(input_dim, payload_dim)`` with rows of ``x`` mapped as
    ``x @ operator``; its column space is what any payload can reveal.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    q, _ = np.linalg.qr(np.asarray(operator, dtype=np.float64))
    resid = x - (x @ q) @ q.T
    return (resid ** 2).sum(axis=1)


def linear_head_operator(head: Network, basis: ProjectionBasis | None = None) -> np.ndarray:
    """``W^T R`` for a bias-free single-Dense head (identity ``R`` for raw)."""
    dense = [l for l in head.layers if isinstance(l, Dense)]
    if len(dense) != 1 or "b" in dense[0].params:
        raise InvalidArgument("expected exactly one bias-free Dense layer")
    op = dense[0].params["W"].T.astype(np.float64)
    return op if basis is None else op @ basis.R.astype(np.float64)


def encode_with(head: Network, basis: ProjectionBasis | None = None):
    """Frozen ``images -> payload`` map of a head plus optional projection."""
    def fn(images):
        mode = head.mode
        head.eval()
        try:
            z = head(np.asarray(images, dtype=head.dtype))
        finally:
            head.mode = mode
        z = z.reshape(len(z), -1)
        return z if basis is None else project(basis, z)
    return fn
