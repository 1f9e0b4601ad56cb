"""Desk-scale datasets, Dirichlet non-IID partitioning and trigger poisoning."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, InconsistentPair, InvalidArgument, PartitionFailure
from .linalg import as_rng

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise InvalidArgument(f"images must be (n, C, H, W) with n labels, got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgument(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        base = self.indices if self.indices is not None else np.arange(len(self))
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, base[idx])

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def dataset_hash(ds: Dataset) -> str:
    raw = ds.images.astype("<f4").tobytes() + ds.labels.astype("<u4").tobytes()
    return f"{fnv1a64(raw):016x}"


def _square(dims) -> tuple[int, int]:
    if isinstance(dims, (tuple, list)):
        return int(dims[0]), int(dims[1])
    side = int(round(np.sqrt(dims)))
    if side * side != dims:
        raise InvalidArgument(f"dims={dims} is not a square; pass (H, W)")
    return side, side


def blob_prototypes(classes: int, height: int, width: int, rng) -> np.ndarray:
    """One bright Gaussian bump per class on a dark background."""
    rng = as_rng(rng)
    yy, xx = np.mgrid[0:height, 0:width]
    protos = np.empty((classes, height, width))
    sigma = max(height, width) / 6.0
    for c in range(classes):
        cy, cx = rng.uniform(2) * [height - 1, width - 1]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        protos[c] = bump / bump.max()
    return protos


def synth_blobs(classes: int, per_class: int, dims=256, spread: float = 0.1, rng=0) -> Dataset:
    """Gaussian clusters around per-class bump images, clipped to [0, 1]."""
    if classes < 2:
        raise InvalidArgument("need at least two classes")
    rng = as_rng(rng)
    h, w = _square(dims)
    protos = blob_prototypes(classes, h, w, rng.spawn(0))
    noise = rng.spawn(1).normal(classes * per_class * h * w).reshape(classes, per_class, h, w)
    images = np.clip(protos[:, None] + spread * noise, 0.0, 1.0)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(images.reshape(-1, 1, h, w).astype(np.float32), labels, classes)


def train_test_split(ds: Dataset, test_fraction: float, rng) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes ``floor(n_c * test_fraction)`` test samples."""
    rng = as_rng(rng)
    test = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = rng.generator.permutation(idx)
        test.extend(idx[:int(len(idx) * test_fraction)])
    mask = np.zeros(len(ds), dtype=bool)
    mask[test] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))


def write_idx(images_path, labels_path, ds: Dataset):
    """Write single-channel uint8 IDX files (pixels scaled by 255 and rounded)."""
    if ds.images.shape[1] != 1:
        raise InvalidArgument("IDX images are single channel")
    n, _, h, w = ds.images.shape
    pixels = np.clip(np.rint(ds.images[:, 0] * 255), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES, n, h, w) + pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS, n) + ds.labels.astype(np.uint8).tobytes())


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = 4 + 4 * ndim
    if len(blob) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack_from(">I", blob)
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(blob) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = int(np.prod(dims))
    if len(blob) != head + count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(blob) - head}")
    return np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_LABELS, 1).astype(np.int64)
    if len(images) != len(labels):
        raise InconsistentPair(f"{len(images)} images but {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images[:, None].astype(np.float32) / 255.0, labels, num_classes)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, n_clients: int, alpha: float, rng,
                        max_retries: int = 100) -> list[Dataset]:
    """Per-class client proportions from Dirichlet(alpha), realized exactly.

    Draws are redone while any shard comes out empty, up to ``max_retries``.
    """
    if n_clients < 1:
        raise InvalidArgument("need at least one client")
    if not alpha > 0:
        raise InvalidArgument(f"alpha must be positive, got {alpha}")
    rng = as_rng(rng)
    gen = rng.generator
    for _ in range(max_retries):
        assignment = [[] for _ in range(n_clients)]
        ok = True
        for c in range(ds.num_classes):
            idx = gen.permutation(np.flatnonzero(ds.labels == c))
            if len(idx) == 0:
                continue
            g = gen.gamma(alpha, size=n_clients)
            if not np.isfinite(g).all() or g.sum() <= 0:
                ok = False
                break
            counts = _largest_remainder(len(idx), g / g.sum())
            start = 0
            for i, n in enumerate(counts):
                assignment[i].extend(idx[start:start + n])
                start += n
        if ok and all(assignment):
            return [ds.subset(np.sort(np.asarray(a, dtype=np.int64))) for a in assignment]
    raise PartitionFailure(f"no partition without empty shards after {max_retries} draws")


@dataclass(frozen=True)
class PoisonSpec:
    target_class: int = 0
    rate: float = 0.3
    malicious_fraction: float = 0.1
    trigger_size: int = 3
    trigger_value: float = 1.0
    corner: str = "top-left"

    def __post_init__(self):
        if not 0 <= self.rate <= 1:
            raise InvalidArgument(f"poison rate must lie in [0, 1], got {self.rate}")
        if not 0 <= self.malicious_fraction <= 1:
            raise InvalidArgument("malicious fraction must lie in [0, 1]")


def select_malicious(n_clients: int, spec: PoisonSpec, rng) -> list[int]:
    count = int(round(spec.malicious_fraction * n_clients))
    if spec.malicious_fraction > 0:
        count = max(1, count)
    return sorted(int(i) for i in as_rng(rng).generator.permutation(n_clients)[:count])


def apply_poison(shard: Dataset, spec: PoisonSpec, rng) -> Dataset:
    """Stamp the trigger on ``floor(rate * n)`` samples and relabel them."""
    h, w = shard.images.shape[2:]
    s = spec.trigger_size
    if h < s or w < s:
        raise InvalidArgument(f"images {h}x{w} smaller than the {s}x{s} trigger")
    count = int(np.floor(spec.rate * len(shard)))
    chosen = np.sort(as_rng(rng).generator.permutation(len(shard))[:count])
    images = shard.images.copy()
    labels = shard.labels.copy()
    images[chosen, :, :s, :s] = spec.trigger_value
    labels[chosen] = spec.target_class
    out = replace(shard, images=images, labels=labels)
    out.poisoned = chosen
    return out
