from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation, InvalidArgument
from .layers import Layer

_tape_ids = itertools.count()


@dataclass
class Tape:
    """Activation record of one forward pass."""

    network_id: int
    version: int
    input_shape: tuple
    output_shape: tuple
    caches: list = field(default_factory=list)
    tape_id: int = field(default_factory=lambda: next(_tape_ids))


class Network:
    """Sequential stack of layers with reverse-mode differentiation.

    ``input_shape`` is the per-sample shape (batch axis excluded).
    """

    def __init__(self, layers: list[Layer], input_shape, dtype=np.float32, name: str = "net"):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.name = name
        self.mode = "train"
        self.version = 0
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = tuple(shape)
        if any(p.dtype != self.dtype for layer in self.layers for p in layer.params.values()):
            for layer in self.layers:
                layer.astype(self.dtype)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x)
        if x.ndim < 1 or tuple(x.shape[1:]) != self.input_shape:
            raise InvalidArgument(
                f"{self.name}: expected input (batch, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        tape = Tape(id(self), self.version, tuple(x.shape), ())
        train = self.mode == "train"
        h = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            y, cache = layer.forward(h, train)
            tape.caches.append(cache)
            h = y.astype(self.dtype)
        tape.output_shape = tuple(h.shape)
        return h, tape

    def __call__(self, x):
        return self.forward(x)[0]

    def backward_from_seed(self, tape: Tape, seed_grad: np.ndarray):
        """Backpropagate ``seed_grad`` through the recorded pass.

        Returns ``(param_grads, input_grad)``.  Parameter gradients add onto
        whatever the layers already hold; call :meth:`zero_grad` between steps.
        """
        if tape.network_id != id(self):
            raise ContractViolation(f"{self.name}: tape belongs to a different network")
        if tape.version != self.version:
            raise ContractViolation(f"{self.name}: tape is stale (parameters changed since forward)")
        seed_grad = np.asarray(seed_grad)
        if tuple(seed_grad.shape) != tape.output_shape:
            raise InvalidArgument(
                f"{self.name}: seed shape {seed_grad.shape} != output shape {tape.output_shape}")
        g = seed_grad.astype(np.float64)
        for layer, cache in zip(reversed(self.layers), reversed(tape.caches)):
            g = layer.backward(cache, g).astype(self.dtype).astype(np.float64)
        return self.param_grads(), g.astype(self.dtype)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{layer.kind}.{name}", p

    def parameter_slots(self):
        """``(layer, name)`` pairs addressing every trainable tensor."""
        return [(layer, name) for layer in self.layers if layer.trainable for name in layer.params]

    def param_grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{layer.kind}.{name}": layer.grads[name].astype(self.dtype)
                for i, layer in enumerate(self.layers) for name in layer.params}

    def num_trainable(self) -> int:
        return sum(int(layer.params[n].size) for layer, n in self.parameter_slots())

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in itertools.chain(layer.params.items(), layer.buffers.items()):
                out[f"{i}.{layer.kind}.{name}"] = p
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    key = f"{i}.{layer.kind}.{name}"
                    if key not in tensors:
                        raise InvalidArgument(f"{self.name}: missing tensor {key}")
                    value = np.asarray(tensors[key])
                    if value.shape != store[name].shape:
                        raise InvalidArgument(f"{self.name}: shape mismatch for {key}")
                    # in place: optimizers hold references to these arrays
                    store[name][...] = value.astype(self.dtype)
        self.version += 1

    def astype(self, dtype) -> "Network":
        """Deep copy with every tensor cast to ``dtype``."""
        other = copy.deepcopy(self)
        other.dtype = np.dtype(dtype)
        for layer in other.layers:
            layer.astype(other.dtype)
        other.version = 0
        return other

    def clone(self) -> "Network":
        return self.astype(self.dtype)

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Network({self.name}: {self.input_shape} -> {self.output_shape}; {inner})"


def forward(net: Network, x):
    return net.forward(x)


def backward_from_seed(net: Network, tape: Tape, seed_grad):
    return net.backward_from_seed(tape, seed_grad)


def chain(*nets: Network, name="chain") -> Network:
    """Concatenate networks into one sharing the same layer objects."""
    layers = [layer for net in nets for layer in net.layers]
    out = Network.__new__(Network)
    out.layers = layers
    out.input_shape = nets[0].input_shape
    out.output_shape = nets[-1].output_shape
    out.dtype = nets[0].dtype
    out.name = name
    out.mode = "train"
    out.version = 0
    return out
