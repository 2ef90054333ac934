"""Stateful layer wrappers around :mod:`cbcnet.tensor_core`.

Every layer follows the same small protocol:

``forward(x, training=True)``
    computes and caches what ``backward`` needs.
``backward(grad_out)``
    returns the gradient w.r.t. the input and fills ``self.grad`` with
    gradients keyed like ``params()``.
``params()``
    dict of live parameter arrays (updated in place by the optimizer).
"""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .errors import ShapeError, StateError


class Layer:
    kind = "layer"

    def __init__(self):
        self.grad: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def zero_grad(self):
        self.grad = {k: np.zeros_like(v) for k, v in self.params().items()}

    def _require(self, attr: str):
        value = getattr(self, attr, None)
        if value is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return value

    def state_dict(self) -> dict:
        out = {"type": self.kind}
        for name, arr in {**self.params(), **self.buffers()}.items():
            out[name] = arr.tolist()
        return out

    def load_arrays(self, d: dict):
        for name, arr in {**self.params(), **self.buffers()}.items():
            src = np.asarray(d[name], dtype=np.float64).reshape(arr.shape)
            arr[...] = src


class Conv2d(Layer):
    """Plain convolution with stored weights."""

    kind = "conv"

    def __init__(self, geom: tc.ConvGeometry, weights=None, bias=None, use_bias: bool = True):
        super().__init__()
        self.geom = geom
        self.weights = np.zeros(geom.weight_shape) if weights is None else np.array(weights, dtype=np.float64)
        self.bias = None
        if use_bias:
            self.bias = np.zeros(geom.out_channels) if bias is None else np.array(bias, dtype=np.float64)
        self._x = None

    def params(self):
        p = {"weights": self.weights}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, training=True):
        self._x = x
        return tc.conv2d_forward(x, self.weights, self.bias, self.geom)

    def backward(self, grad_out):
        x = self._require("_x")
        gw, gb = tc.conv2d_backward_weights(x, grad_out, self.geom)
        self.grad = {"weights": gw}
        if self.bias is not None:
            self.grad["bias"] = gb
        return tc.conv2d_backward_input(self.weights, grad_out, self.geom, x.shape[2:])


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x, training=True):
        self._x = x
        return tc.relu_forward(x)

    def backward(self, grad_out):
        return tc.relu_backward(self._require("_x"), grad_out)


class MaxPool2x2(Layer):
    kind = "maxpool"

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, training=True):
        out, idx = tc.maxpool2x2_forward(x)
        self._cache = (idx, x.shape)
        return out

    def backward(self, grad_out):
        idx, shape = self._require("_cache")
        return tc.maxpool2x2_backward(grad_out, idx, shape)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, training=True):
        self._shape = x.shape
        return tc.global_avg_pool_forward(x)

    def backward(self, grad_out):
        return tc.global_avg_pool_backward(grad_out, self._require("_shape"))


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=True):
        out, self._cache = tc.batchnorm_forward(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training
        )
        return out

    def backward(self, grad_out):
        cache = self._require("_cache")
        gx, gg, gb = tc.batchnorm_backward(grad_out, cache)
        self.grad = {"gamma": gg, "beta": gb}
        return gx


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, units: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.units = units
        limit = np.sqrt(6.0 / (in_features + units))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = rng.uniform(-limit, limit, size=(units, in_features))
        self.bias = np.zeros(units)
        self._x = None

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, training=True):
        self._x = x
        return tc.dense_forward(x, self.weights, self.bias)

    def backward(self, grad_out):
        gx, gw, gb = tc.dense_backward(self._require("_x"), self.weights, grad_out)
        self.grad = {"weights": gw, "bias": gb}
        return gx


class Sequential(Layer):
    """Chain of layers; parameter names are prefixed with the layer index."""

    kind = "sequential"

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = list(layers)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers().items():
                out[f"{i}.{k}"] = v
        return out

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        self.grad = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.grad.items():
                self.grad[f"{i}.{k}"] = v
        return grad_out


class Bottleneck(Layer):
    """ResNet bottleneck: 1x1 -> 3x3 (strided) -> 1x1, each followed by batchnorm.

    ``main`` and ``shortcut`` are :class:`Sequential` stacks; ``shortcut`` is
    ``None`` for the identity path.
    """

    kind = "bottleneck"

    def __init__(self, main: Sequential, shortcut: Sequential | None):
        super().__init__()
        self.main = main
        self.shortcut = shortcut
        self._pre = None

    def params(self):
        out = {f"main.{k}": v for k, v in self.main.params().items()}
        if self.shortcut is not None:
            out.update({f"short.{k}": v for k, v in self.shortcut.params().items()})
        return out

    def buffers(self):
        out = {f"main.{k}": v for k, v in self.main.buffers().items()}
        if self.shortcut is not None:
            out.update({f"short.{k}": v for k, v in self.shortcut.buffers().items()})
        return out

    def forward(self, x, training=True):
        y = self.main.forward(x, training)
        s = x if self.shortcut is None else self.shortcut.forward(x, training)
        if y.shape != s.shape:
            raise ShapeError(f"residual shapes differ: {y.shape} vs {s.shape}")
        self._pre = y + s
        return tc.relu_forward(self._pre)

    def backward(self, grad_out):
        g = tc.relu_backward(self._require("_pre"), grad_out)
        gx = self.main.backward(g)
        self.grad = {f"main.{k}": v for k, v in self.main.grad.items()}
        if self.shortcut is None:
            return gx + g
        gx = gx + self.shortcut.backward(g)
        self.grad.update({f"short.{k}": v for k, v in self.shortcut.grad.items()})
        return gx
