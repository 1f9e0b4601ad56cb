"""Layer kinds for the feed-forward engine.

Every layer computes in float64 and rounds its output to the dtype of the
owning network.  ``backward`` adds parameter gradients into ``self.grads``
rather than overwriting them, so two backward calls on one tape sum.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from ..linalg import F64, RngStream, as_rng


class Layer:
    kind = "layer"
    trainable = True

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray, train: bool):
        raise NotImplementedError

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros(p.shape, dtype=F64)

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for name in store:
                store[name] = store[name].astype(dtype)
        self.zero_grad()
        return self

    def config(self) -> dict:
        return {}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


def _he_init(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    n = int(np.prod(shape))
    return (rng.normal(n) * np.sqrt(2.0 / fan_in)).reshape(shape)


class Dense(Layer):
    """``y = x W^T + b`` on ``(batch, in)`` input."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=0):
        super().__init__()
        rng = as_rng(rng)
        self.in_features = in_features
        self.out_features = out_features
        self.use_bias = bias
        self.params["W"] = _he_init(rng, (out_features, in_features), in_features).astype(np.float32)
        if bias:
            self.params["b"] = np.zeros(out_features, dtype=np.float32)
        self.zero_grad()

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features, "bias": self.use_bias}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise InvalidArgument(f"dense expects ({self.in_features},) inputs, got {in_shape}")
        return (self.out_features,)

    def forward(self, x, train):
        x64 = x.astype(F64)
        y = x64 @ self.params["W"].astype(F64).T
        if self.use_bias:
            y += self.params["b"].astype(F64)
        return y, x64

    def backward(self, x64, dy):
        self.grads["W"] += dy.T @ x64
        if self.use_bias:
            self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"].astype(F64)


class Conv2d(Layer):
    """Direct 2-D convolution over ``(batch, C, H, W)`` input."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True, rng=0):
        super().__init__()
        rng = as_rng(rng)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.use_bias = bias
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.params["W"] = _he_init(rng, shape, fan_in).astype(np.float32)
        if bias:
            self.params["b"] = np.zeros(out_channels, dtype=np.float32)
        self.zero_grad()

    def config(self):
        return {
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "kernel_size": self.kernel_size, "stride": self.stride,
            "padding": self.padding, "bias": self.use_bias,
        }

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise InvalidArgument(f"conv2d expects ({self.in_channels}, H, W) inputs, got {in_shape}")
        _, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise InvalidArgument(f"input {in_shape} too small for kernel {k}")
        return (self.out_channels, ho, wo)

    def _windows(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        for i in range(k):
            for j in range(k):
                yield i, j, np.s_[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    def forward(self, x, train):
        p = self.padding
        xp = np.pad(x.astype(F64), ((0, 0), (0, 0), (p, p), (p, p)))
        W = self.params["W"].astype(F64)
        y = None
        for i, j, sl in self._windows(x.shape[2], x.shape[3]):
            term = np.einsum("bchw,oc->bohw", xp[sl], W[:, :, i, j])
            y = term if y is None else y + term
        if self.use_bias:
            y += self.params["b"].astype(F64)[None, :, None, None]
        return y, xp

    def backward(self, xp, dy):
        W = self.params["W"].astype(F64)
        dxp = np.zeros_like(xp)
        p = self.padding
        h, w = xp.shape[2] - 2 * p, xp.shape[3] - 2 * p
        for i, j, sl in self._windows(h, w):
            self.grads["W"][:, :, i, j] += np.einsum("bohw,bchw->oc", dy, xp[sl])
            dxp[sl] += np.einsum("bohw,oc->bchw", dy, W[:, :, i, j])
        if self.use_bias:
            self.grads["b"] += dy.sum(axis=(0, 2, 3))
        return dxp[:, :, p:p + h, p:p + w]


class ReLU(Layer):
    kind = "relu"
    trainable = False

    def forward(self, x, train):
        mask = x > 0
        return np.where(mask, x.astype(F64), 0.0), mask

    def backward(self, mask, dy):
        return np.where(mask, dy, 0.0)


class MaxPool2d(Layer):
    kind = "maxpool2d"
    trainable = False

    def __init__(self, size: int = 2, stride: int | None = None):
        super().__init__()
        self.size = size
        self.stride = stride or size

    def config(self):
        return {"size": self.size, "stride": self.stride}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise InvalidArgument(f"maxpool2d expects (C, H, W) inputs, got {in_shape}")
        c, h, w = in_shape
        ho, wo = (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise InvalidArgument(f"input {in_shape} too small for pool {self.size}")
        return (c, ho, wo)

    def _slices(self, h, w):
        s, k = self.stride, self.size
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        return [np.s_[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                for i in range(k) for j in range(k)]

    def forward(self, x, train):
        x64 = x.astype(F64)
        slices = self._slices(x.shape[2], x.shape[3])
        stack = np.stack([x64[sl] for sl in slices])
        arg = stack.argmax(axis=0)
        y = np.take_along_axis(stack, arg[None], axis=0)[0]
        return y, (x.shape, arg)

    def backward(self, cache, dy):
        shape, arg = cache
        dx = np.zeros(shape, dtype=F64)
        for n, sl in enumerate(self._slices(shape[2], shape[3])):
            dx[sl] += np.where(arg == n, dy, 0.0)
        return dx


class BatchNorm(Layer):
    """Batch normalization over dim 1 of 2-D or 4-D input."""

    kind = "batchnorm"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(num_features, dtype=np.float32)
        self.params["beta"] = np.zeros(num_features, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(num_features, dtype=np.float32)
        self.buffers["running_var"] = np.ones(num_features, dtype=np.float32)
        self.zero_grad()

    def config(self):
        return {"num_features": self.num_features, "eps": self.eps, "momentum": self.momentum}

    def output_shape(self, in_shape):
        if in_shape[0] != self.num_features or len(in_shape) not in (1, 3):
            raise InvalidArgument(f"batchnorm expects {self.num_features} features, got {in_shape}")
        return in_shape

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, ndim):
        return v if ndim == 2 else v[None, :, None, None]

    def forward(self, x, train):
        x64 = x.astype(F64)
        axes = self._axes(x)
        if train:
            mean = x64.mean(axis=axes)
            var = x64.var(axis=axes)
            n = x64.size // self.num_features
            unbiased = var * n / (n - 1) if n > 1 else var
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = ((1 - m) * rm.astype(F64) + m * mean).astype(rm.dtype)
            self.buffers["running_var"] = ((1 - m) * rv.astype(F64) + m * unbiased).astype(rv.dtype)
        else:
            mean = self.buffers["running_mean"].astype(F64)
            var = self.buffers["running_var"].astype(F64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x64 - self._bcast(mean, x.ndim)) * self._bcast(inv_std, x.ndim)
        gamma = self.params["gamma"].astype(F64)
        y = xhat * self._bcast(gamma, x.ndim) + self._bcast(self.params["beta"].astype(F64), x.ndim)
        return y, (xhat, inv_std, train)

    def backward(self, cache, dy):
        xhat, inv_std, train = cache
        axes = self._axes(dy)
        nd = dy.ndim
        self.grads["gamma"] += (dy * xhat).sum(axis=axes)
        self.grads["beta"] += dy.sum(axis=axes)
        dxhat = dy * self._bcast(self.params["gamma"].astype(F64), nd)
        if not train:
            return dxhat * self._bcast(inv_std, nd)
        n = dy.size // self.num_features
        s1 = self._bcast(dxhat.sum(axis=axes), nd)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), nd)
        return (n * dxhat - s1 - xhat * s2) * self._bcast(inv_std, nd) / n


class Flatten(Layer):
    kind = "flatten"
    trainable = False

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1).astype(F64), x.shape

    def backward(self, shape, dy):
        return dy.reshape(shape)


class Reshape(Layer):
    kind = "reshape"
    trainable = False

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def config(self):
        return {"shape": list(self.shape)}

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise InvalidArgument(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, x, train):
        return x.reshape((x.shape[0],) + self.shape).astype(F64), x.shape

    def backward(self, shape, dy):
        return dy.reshape(shape)


class Identity(Layer):
    kind = "identity"
    trainable = False

    def forward(self, x, train):
        return x.astype(F64), None

    def backward(self, cache, dy):
        return dy
