"""Cut-layer transforms: orthonormal projection, fixed and learned lift-back,
the raw identity baseline and the learned 1x1 channel codec baseline."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidArgument
from .linalg import F64, as_rng, gaussian_matrix, matmul, thin_qr, uniform_matrix
from .nn import BatchNorm, Conv2d, Dense, Flatten, Layer, Network, ReLU, Reshape


@dataclass(frozen=True, eq=False)
class ProjectionBasis:
    """Fixed ``d x k`` matrix with orthonormal columns."""

    R: np.ndarray
    d: int
    k: int
    seed: int
    distribution: str = "gaussian"

    def __post_init__(self):
        self.R.setflags(write=False)

    @property
    def compression_ratio(self) -> float:
        return self.d / self.k

    def to_bytes(self) -> bytes:
        """``d, k`` as u32, ``seed`` as u64, then ``R`` row-major as f32 (all LE)."""
        return struct.pack("<IIQ", self.d, self.k, self.seed) + self.R.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ProjectionBasis":
        if len(blob) < 16:
            raise InvalidArgument("basis blob shorter than its header")
        d, k, seed = struct.unpack_from("<IIQ", blob)
        if len(blob) != 16 + 4 * d * k:
            raise InvalidArgument(f"basis blob length {len(blob)} does not match d={d}, k={k}")
        R = np.frombuffer(blob[16:], dtype="<f4").reshape(d, k).astype(np.float32)
        return cls(R, d, k, seed)


def init_projection(d: int, k: int, rng, distribution: str = "gaussian") -> ProjectionBasis:
    if not 1 <= k <= d:
        raise InvalidArgument(f"projection needs 1 <= k <= d, got k={k}, d={d}")
    rng = as_rng(rng)
    if distribution == "gaussian":
        A = gaussian_matrix(d, k, rng)
    elif distribution == "uniform":
        A = uniform_matrix(d, k, rng)
    else:
        raise InvalidArgument(f"unknown distribution {distribution!r}")
    Q, _ = thin_qr(A)
    return ProjectionBasis(Q, d, k, rng.seed, distribution)


def _check_width(x: np.ndarray, width: int, what: str):
    if x.ndim != 2 or x.shape[1] != width:
        raise InvalidArgument(f"{what}: expected (batch, {width}), got {x.shape}")


def project(basis: ProjectionBasis, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    _check_width(z, basis.d, "project")
    return matmul(z, basis.R)


def lift_fixed(basis: ProjectionBasis, z_tilde: np.ndarray) -> np.ndarray:
    z_tilde = np.asarray(z_tilde)
    _check_width(z_tilde, basis.k, "lift_fixed")
    return matmul(z_tilde, basis.R.T)


def backprop_projection(basis: ProjectionBasis, grad_z_tilde: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``z`` given the gradient w.r.t. ``project(z)``."""
    return lift_fixed(basis, grad_z_tilde)


class ProjectLayer(Layer):
    """Fixed ``z -> z R``; holds no trainable parameters."""

    kind = "project"
    trainable = False

    def __init__(self, basis: ProjectionBasis):
        super().__init__()
        self.basis = basis

    def config(self):
        return {"d": self.basis.d, "k": self.basis.k}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.basis.d,):
            raise InvalidArgument(f"project expects ({self.basis.d},), got {in_shape}")
        return (self.basis.k,)

    def forward(self, x, train):
        return project(self.basis, x).astype(F64), None

    def backward(self, cache, dy):
        return matmul(dy, self.basis.R.T)


class LiftFixedLayer(Layer):
    """Fixed ``z~ -> z~ R^T``; holds no trainable parameters."""

    kind = "lift_fixed"
    trainable = False

    def __init__(self, basis: ProjectionBasis):
        super().__init__()
        self.basis = basis

    def config(self):
        return {"d": self.basis.d, "k": self.basis.k}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.basis.k,):
            raise InvalidArgument(f"lift_fixed expects ({self.basis.k},), got {in_shape}")
        return (self.basis.d,)

    def forward(self, x, train):
        return lift_fixed(self.basis, x).astype(F64), None

    def backward(self, cache, dy):
        # adjoint of z~ -> z~ R^T is g -> g R
        return matmul(dy, self.basis.R)


class LiftbackMlp(Network):
    """``W2 relu(BN(W1 z~))`` mapping ``k`` inputs to ``d`` outputs."""

    def __init__(self, k: int, d: int, hidden: int = 128, rng=0, zero_output: bool = False):
        rng = as_rng(rng)
        first = Dense(k, hidden, bias=False, rng=rng.spawn(1))
        last = Dense(hidden, d, bias=False, rng=rng.spawn(2))
        if zero_output:
            last.params["W"][...] = 0.0
        super().__init__([first, BatchNorm(hidden), ReLU(), last], (k,), name="liftback_mlp")
        self.k, self.d, self.hidden = k, d, hidden


def lift_learned(mlp: LiftbackMlp, z_tilde: np.ndarray) -> np.ndarray:
    z_tilde = np.asarray(z_tilde)
    _check_width(z_tilde, mlp.k, "lift_learned")
    return mlp(z_tilde)


def realizable_channels(channels: int, requested_cr: float) -> int:
    """Nearest realizable channel count; ties round half to even."""
    return max(1, round(channels / requested_cr))


class Channel1x1Codec:
    """Paired 1x1 convolutions: ``C -> k_ch`` on the client, ``k_ch -> C`` on the server."""

    def __init__(self, channels: int, requested_cr: float, height: int = 1, width: int = 1, rng=0):
        rng = as_rng(rng)
        self.channels = channels
        self.height, self.width = height, width
        self.requested_cr = requested_cr
        self.k_ch = realizable_channels(channels, requested_cr)
        self.effective_cr = Fraction(channels, self.k_ch)
        self.encoder = Network([Conv2d(channels, self.k_ch, 1, rng=rng.spawn(1))],
                               (channels, height, width), name="codec_encoder")
        self.decoder = Network([Conv2d(self.k_ch, channels, 1, rng=rng.spawn(2))],
                               (self.k_ch, height, width), name="codec_decoder")


def codec_1x1(codec: Channel1x1Codec, feature_map: np.ndarray, direction: str) -> np.ndarray:
    feature_map = np.asarray(feature_map)
    if direction == "encode":
        net = codec.encoder
    elif direction == "decode":
        net = codec.decoder
    else:
        raise InvalidArgument(f"direction must be 'encode' or 'decode', got {direction!r}")
    expected = net.input_shape[0]
    if feature_map.ndim != 4 or feature_map.shape[1] != expected:
        raise InvalidArgument(f"{direction}: expected {expected} channels, got shape {feature_map.shape}")
    if feature_map.shape[2:] != net.input_shape[1:]:
        net = Network(net.layers, (expected,) + feature_map.shape[2:], name=net.name)
    return net(feature_map)


@dataclass
class CutCodec:
    """Client-side encoder and server-side decoder around one cut.

    ``encoder`` maps the head output to the flat payload; ``decoder`` maps
    the payload back to the head's output shape for the backbone.
    """

    kind: str
    encoder: Network
    decoder: Network
    payload_dim: int
    basis: ProjectionBasis | None = None
    codec: Channel1x1Codec | None = None

    @property
    def decoder_trainable(self) -> int:
        return self.decoder.num_trainable()


def build_cut(kind: str, cut_shape, *, k: int | None = None, cr: float | None = None,
              mode: str = "LS-F", hidden: int = 128, rng=0, basis: ProjectionBasis | None = None,
              zero_output: bool = False) -> CutCodec:
    """Assemble the encoder/decoder pair for a bottleneck ``kind``.

    ``kind`` is ``raw``, ``projection`` or ``learned-1x1``.  For projection,
    ``mode`` selects the fixed (``LS-F``) or learned (``LS-L``) lift-back.
    """
    rng = as_rng(rng)
    cut_shape = tuple(int(s) for s in cut_shape)
    d = int(np.prod(cut_shape))
    flat = [Flatten()] if len(cut_shape) > 1 else []
    if kind == "raw":
        enc = Network(list(flat) or [Reshape((d,))], cut_shape, name="encoder")
        dec = Network([Reshape(cut_shape)], (d,), name="decoder")
        return CutCodec(kind, enc, dec, d)
    if kind == "projection":
        if k is None:
            if cr is None:
                raise InvalidArgument("projection needs k or cr")
            k = max(1, int(round(d / cr)))
        if not 1 <= k <= d:
            raise InvalidArgument(f"projection needs 1 <= k <= d, got k={k}, d={d}")
        if basis is None:
            basis = init_projection(d, k, rng.spawn(0))
        if (basis.d, basis.k) != (d, k):
            raise InvalidArgument(f"basis is {basis.d}x{basis.k}, cut needs {d}x{k}")
        enc = Network(flat + [ProjectLayer(basis)], cut_shape, name="encoder")
        if mode == "LS-F":
            dec = Network([LiftFixedLayer(basis), Reshape(cut_shape)], (k,), name="decoder")
        elif mode == "LS-L":
            mlp = LiftbackMlp(k, d, hidden, rng=rng.spawn(3), zero_output=zero_output)
            dec = Network(mlp.layers + [Reshape(cut_shape)], (k,), name="decoder")
        else:
            raise InvalidArgument(f"mode must be LS-F or LS-L, got {mode!r}")
        return CutCodec(kind, enc, dec, k, basis=basis)
    if kind == "learned-1x1":
        if cr is None:
            raise InvalidArgument("learned-1x1 needs a requested cr")
        fmap = cut_shape if len(cut_shape) == 3 else (d, 1, 1)
        codec = Channel1x1Codec(fmap[0], cr, fmap[1], fmap[2], rng=rng.spawn(4))
        pre = [] if len(cut_shape) == 3 else [Reshape(fmap)]
        payload = codec.k_ch * fmap[1] * fmap[2]
        enc = Network(pre + codec.encoder.layers + [Flatten()], cut_shape, name="encoder")
        dec = Network([Reshape((codec.k_ch, fmap[1], fmap[2]))] + codec.decoder.layers
                      + [Reshape(cut_shape)], (payload,), name="decoder")
        return CutCodec(kind, enc, dec, payload, codec=codec)
    raise InvalidArgument(f"unknown bottleneck {kind!r}")
