"""Parameter-wise first-order optimizers (SGD and Adam with AMSGrad)."""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from .network import Network


class Optimizer:
    """Optimizer state over a fixed, ordered list of parameter arrays.

    ``apply(grads)`` updates the arrays in place.  Networks registered via
    :meth:`for_networks` get their ``version`` bumped on every step so that
    tapes recorded before the update are rejected afterwards.
    """

    def __init__(self, params: list[np.ndarray], rule: str = "adam", lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8, amsgrad: bool = True):
        rule = rule.lower()
        if rule not in ("sgd", "adam"):
            raise InvalidArgument(f"unknown optimizer rule {rule!r}")
        self.params = list(params)
        self.rule = rule
        self.lr = float(lr)
        self.betas = tuple(float(b) for b in betas)
        self.eps = float(eps)
        self.amsgrad = amsgrad
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.vmax = [np.zeros(p.shape) for p in self.params]
        self._slots: list = []
        self._networks: list[Network] = []

    @classmethod
    def for_networks(cls, networks, **kwargs) -> "Optimizer":
        networks = [n for n in networks if n is not None]
        slots = [slot for net in networks for slot in net.parameter_slots()]
        opt = cls([layer.params[name] for layer, name in slots], **kwargs)
        opt._slots = slots
        opt._networks = networks
        return opt

    def zero_grad(self):
        for net in self._networks:
            net.zero_grad()

    def step(self):
        """Apply the gradients currently held by the registered networks."""
        self.apply([layer.grads[name] for layer, name in self._slots])

    def apply(self, grads):
        if len(grads) != len(self.params):
            raise InvalidArgument(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise InvalidArgument(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=np.float64)
            p64 = p.astype(np.float64)
            if self.rule == "sgd":
                p64 = p64 - self.lr * g
            else:
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
                second = self.v[i]
                if self.amsgrad:
                    self.vmax[i] = np.maximum(self.vmax[i], self.v[i])
                    second = self.vmax[i]
                bc1 = 1 - b1 ** t
                bc2 = 1 - b2 ** t
                denom = np.sqrt(second) / np.sqrt(bc2) + self.eps
                p64 = p64 - (self.lr / bc1) * self.m[i] / denom
            p[...] = p64.astype(p.dtype)
        for net in self._networks:
            net.version += 1
        return self.params

    def state_summary(self) -> dict:
        return {"rule": self.rule, "lr": self.lr, "step": self.step_count,
                "betas": list(self.betas), "eps": self.eps, "amsgrad": self.amsgrad}


def optimizer_apply(opt: Optimizer, params, grads):
    if len(params) != len(opt.params) or any(a is not b for a, b in zip(params, opt.params)):
        raise InvalidArgument("parameters do not match the optimizer state")
    return opt.apply(grads)
