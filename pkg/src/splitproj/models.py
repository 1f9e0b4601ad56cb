"""Desk-scale head / backbone / tail partitions for U-shaped training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .linalg import as_rng
from .nn import Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, Reshape


@dataclass
class SplitModel:
    head: Network
    backbone: Network
    tail: Network

    @property
    def cut_shape(self) -> tuple:
        return self.head.output_shape

    @property
    def cut_dim(self) -> int:
        return int(np.prod(self.cut_shape))


def build_split_model(arch: str, input_shape, classes: int, head_depth: int = 1,
                      width: int = 256, rng=0) -> SplitModel:
    """Build ``(f, g, h)``.

    ``mlp``: each head layer is Dense(width) + ReLU, so the cut has ``width``
    features.  ``cnn``: 3x3 conv blocks with 8 channels, pooled after the
    first block.  ``linear``: a single bias-free Dense head, used by the
    inversion-attack checks.
    """
    rng = as_rng(rng)
    input_shape = tuple(int(s) for s in input_shape)
    n_in = int(np.prod(input_shape))
    if head_depth < 1:
        raise InvalidArgument(f"head_depth must be >= 1, got {head_depth}")
    spawn = iter(range(100, 1000))

    def nxt():
        return rng.spawn(next(spawn))

    if arch in ("mlp", "linear"):
        layers = [Flatten()] if len(input_shape) > 1 else []
        fan = n_in
        for i in range(head_depth):
            layers.append(Dense(fan, width, bias=arch == "mlp", rng=nxt()))
            if arch == "mlp":
                layers.append(ReLU())
            fan = width
        head = Network(layers, input_shape, name="head")
        hidden = max(classes, width // 4)
        backbone = Network([Dense(width, hidden, rng=nxt()), ReLU(),
                            Dense(hidden, hidden, rng=nxt()), ReLU()], (width,), name="backbone")
        tail = Network([Dense(hidden, classes, rng=nxt())], (hidden,), name="tail")
        return SplitModel(head, backbone, tail)

    if arch == "cnn":
        if len(input_shape) != 3:
            raise InvalidArgument(f"cnn needs (C, H, W) input, got {input_shape}")
        ch = 8
        layers = [Conv2d(input_shape[0], ch, 3, padding=1, rng=nxt()), ReLU(), MaxPool2d(2)]
        for _ in range(head_depth - 1):
            layers += [Conv2d(ch, ch, 3, padding=1, rng=nxt()), ReLU()]
        head = Network(layers, input_shape, name="head")
        c, h, w = head.output_shape
        bb_layers = [Conv2d(c, 16, 3, padding=1, rng=nxt()), ReLU(), MaxPool2d(2), Flatten()]
        probe = Network(list(bb_layers), (c, h, w))
        flat = probe.output_shape[0]
        hidden = 64
        backbone = Network(bb_layers + [Dense(flat, hidden, rng=nxt()), ReLU()], (c, h, w), name="backbone")
        tail = Network([Dense(hidden, classes, rng=nxt())], (hidden,), name="tail")
        return SplitModel(head, backbone, tail)

    raise InvalidArgument(f"unknown architecture {arch!r}")


def identity_network(shape, name="identity") -> Network:
    shape = tuple(shape)
    return Network([Reshape(shape)], shape, name=name)
